"""Exception types shared across the package."""


class FedUnlearnError(Exception):
    """Base class for all package errors."""


class ShapeError(FedUnlearnError, ValueError):
    """Incompatible tensor or layer shapes."""


class ContractError(FedUnlearnError, ValueError):
    """A documented precondition was violated."""


class DataFormatError(FedUnlearnError, ValueError):
    """Malformed input file (CSV, IDX, model file)."""


class ArchMismatchError(DataFormatError):
    """A model file was loaded against the wrong architecture."""


class ConfigError(FedUnlearnError, ValueError):
    """Invalid experiment configuration."""
