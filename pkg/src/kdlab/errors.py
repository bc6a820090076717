"""Exception types shared across the package."""


class KdlabError(Exception):
    """Base class for all errors raised by kdlab."""


class ShapeError(KdlabError):
    """Operands have incompatible shapes or extents."""


class ParameterError(KdlabError):
    """A hyperparameter or configuration value is out of its valid range."""


class ContractError(KdlabError):
    """An operation was invoked in a way that violates its contract."""


class DegenerateBatchError(ContractError):
    """Batch statistics were requested for a batch too small to supply them."""


class ConfigError(KdlabError):
    """Invalid run configuration: CLI flags, config file, or dataset mismatch."""


class FormatError(KdlabError):
    """A file does not conform to its declared binary or text format."""


class UndefinedMetricError(KdlabError):
    """The requested metric is undefined for the given inputs."""
