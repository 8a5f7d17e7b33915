"""Exception hierarchy shared by all modules."""


class FuseFLError(Exception):
    pass


class ConfigError(FuseFLError, ValueError):
    """Invalid configuration or layer/model specification."""


class ShapeError(FuseFLError, ValueError):
    """Tensor shape incompatible with a layer, stage or adaptor."""


class LoadError(FuseFLError):
    pass


class BadMagicError(LoadError):
    pass


class TruncatedFileError(LoadError):
    pass


class CountMismatchError(LoadError):
    pass


class EmptyDatasetError(LoadError):
    pass


class PartitionError(FuseFLError):
    pass


class FusionError(FuseFLError, ValueError):
    pass


class ProbeError(FuseFLError, ValueError):
    pass


class CheckpointError(FuseFLError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointDigestError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass
