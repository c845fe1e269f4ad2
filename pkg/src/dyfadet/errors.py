class DyfadetError(Exception):
    pass


class DimensionError(DyfadetError, ValueError):
    """Array shapes do not conform."""


class ConfigurationError(DyfadetError, ValueError):
    """A structural setting is invalid (even kernel, bad group count, short input)."""


class ContractError(DyfadetError, RuntimeError):
    """An API precondition was violated by the caller."""


class TrainingError(DyfadetError, RuntimeError):
    """Training diverged (non-finite loss)."""
