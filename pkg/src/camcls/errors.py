"""Exception hierarchy shared by every camcls module."""


class CamclsError(Exception):
    """Base class for all library errors."""


class ContractError(CamclsError, ValueError):
    """An argument violates an operation's precondition."""


class DimensionError(ContractError):
    """Tensor shapes are incompatible with the requested operation."""


class NonFiniteError(CamclsError, FloatingPointError):
    """A NaN or Inf appeared in a tensor."""


class ConfigError(CamclsError, ValueError):
    """A configuration value is missing, unknown or out of range."""


class IngestionError(CamclsError):
    """A dataset directory could not be read."""


class SplitError(CamclsError, ValueError):
    """A dataset cannot be split as requested."""


class TrainingDiverged(CamclsError, RuntimeError):
    """The training loss became non-finite."""


class CheckpointError(CamclsError):
    """A checkpoint file is malformed."""
