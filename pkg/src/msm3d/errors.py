"""Exception hierarchy shared by every module."""


class MSMError(Exception):
    """Base class for all errors raised by msm3d."""


class ShapeError(MSMError, ValueError):
    pass


class NumericError(MSMError, FloatingPointError):
    pass


class ContractError(MSMError, ValueError):
    pass


class EmptySceneError(MSMError, ValueError):
    pass


class RangeError(MSMError, OverflowError):
    pass


class SpecError(MSMError, ValueError):
    pass


class FormatError(MSMError, ValueError):
    pass


class DegenerateViewError(MSMError, ValueError):
    pass


class DegenerateInputError(MSMError, ValueError):
    pass


class DegenerateBatchError(MSMError, ValueError):
    pass


class CheckpointError(MSMError, IOError):
    pass


class ConfigError(MSMError, ValueError):
    pass
