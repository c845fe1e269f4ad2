import sys

from dyfadet.cli import main

sys.exit(main())
