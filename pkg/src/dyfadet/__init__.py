"""Dynamic feature aggregation for temporal action detection, in numpy."""

from dyfadet.config import ModelConfig, TrainConfig
from dyfadet.detection import Detection, Segment
from dyfadet.model import Detector

__all__ = ["Detection", "Detector", "ModelConfig", "Segment", "TrainConfig"]
__version__ = "0.1.0"
