"""Exception hierarchy shared by every module."""


class SpikeSegError(Exception):
    """Base class for all library errors."""


class DimensionError(SpikeSegError, ValueError):
    """Tensor shapes do not line up."""


class ConfigurationError(SpikeSegError, ValueError):
    """A layer, network or experiment configuration is invalid."""


class ValidationError(SpikeSegError, ValueError):
    """Input data violates a documented precondition."""


class ModeError(SpikeSegError):
    """Operation called on a model in the wrong execution mode."""


class StateError(SpikeSegError):
    """Required cached state is missing."""


class FormatError(SpikeSegError):
    """A file on disk is malformed or has an unsupported version."""


class NumericalError(SpikeSegError, FloatingPointError):
    """Non-finite values appeared where finite ones are required."""
