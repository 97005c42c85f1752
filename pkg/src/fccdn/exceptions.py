class FCCDNError(Exception):
    """Base class for errors raised by this package."""


class ConfigurationError(FCCDNError, ValueError):
    pass


class ShapeError(FCCDNError, ValueError):
    pass


class CheckpointError(FCCDNError):
    """Checkpoint cannot be loaded into the current network configuration."""


class TrainingDiverged(FCCDNError, RuntimeError):
    pass
