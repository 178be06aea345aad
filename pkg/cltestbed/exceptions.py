"""Exception hierarchy shared by all cltestbed modules."""


class CLTestbedError(Exception):
    """Base class for every error raised by cltestbed."""


class ConfigError(CLTestbedError, ValueError):
    """Experiment config or hyperparameters are invalid."""


class UnknownStrategyError(ConfigError):
    """A strategy name is not registered."""


class DataFormatError(CLTestbedError, ValueError):
    """Input data is malformed (IDX header, payload, labels, blob spec)."""


class ShapeMismatchError(CLTestbedError, ValueError):
    """Array dimensions do not agree with the model or stored state."""


class NotFittedError(CLTestbedError, LookupError):
    """A generative class model was queried before being fitted."""


class TrainingDivergedError(CLTestbedError, FloatingPointError):
    """Parameters or loss became NaN/Inf during training."""
