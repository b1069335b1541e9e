"""Exception types shared across the package."""


class MedafError(Exception):
    pass


class DimensionError(MedafError, ValueError):
    """Tensor shapes do not agree for the requested operation."""


class ContractError(MedafError, RuntimeError):
    """A precondition of an engine call was violated (e.g. non-scalar loss)."""


class ConfigError(MedafError, ValueError):
    pass


class ArgumentError(MedafError, ValueError):
    pass


class IngestionError(MedafError, ValueError):
    """Base class for IDX parsing failures."""


class BadMagicError(IngestionError):
    pass


class TruncatedFileError(IngestionError):
    pass


class CountMismatchError(IngestionError):
    pass


class CheckpointError(MedafError, ValueError):
    pass
