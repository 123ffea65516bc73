"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class DomainError(ValueError):
    """Input outside an operation's mathematical domain (e.g. log of <= 0)."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration value."""


class EmptyBagError(ValueError):
    """Attention pooling over a bag with zero instances."""


class MissingModalityError(ValueError):
    """Multimodal forward requested for a sample without genomic data."""


class WindowTooSmallError(ValueError):
    """Batch-level loss needs at least two samples in the window."""


class IngestionError(ValueError):
    """A data file failed validation; message names the file and offset."""


class DivergenceError(ArithmeticError):
    """Training produced a non-finite loss."""


class PlanningError(ValueError):
    """Cross-validation folds cannot be built as requested."""


class UndefinedMetricError(ValueError):
    """Metric has no defined value for this input (e.g. single-class AUC)."""
