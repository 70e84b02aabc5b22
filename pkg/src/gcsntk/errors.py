"""Exception hierarchy shared by all modules."""


class GCSNTKError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(GCSNTKError, ValueError):
    pass


class LabelRangeError(GCSNTKError, ValueError):
    pass


class DegenerateDegreeError(GCSNTKError, ValueError):
    pass


class ConfigError(GCSNTKError, ValueError):
    pass


class NumericalError(GCSNTKError, ArithmeticError):
    """Base for failures of the numerical pipeline."""


class DegenerateAggregationError(NumericalError):
    """An aggregated neighborhood has zero (or negative) squared norm."""


class NumericalOverflowError(NumericalError):
    def __init__(self, stage, message=None):
        self.stage = stage
        super().__init__(message or f"non-finite values produced at stage {stage!r}")


class SingularSystemError(NumericalError):
    def __init__(self, pivot, message=None):
        self.pivot = pivot
        super().__init__(
            message or f"regularized kernel is not positive definite (smallest pivot {pivot:.3e})"
        )


class DivergenceError(NumericalError):
    """Training produced a non-finite loss; carries the last good checkpoint."""

    def __init__(self, epoch, checkpoint, history, cause=None):
        self.epoch = epoch
        self.checkpoint = checkpoint
        self.history = history
        self.cause = cause
        super().__init__(f"condensation diverged at epoch {epoch}: {cause}")


class InsufficientNodesError(GCSNTKError, ValueError):
    pass


class UndefinedAccuracyError(GCSNTKError, ValueError):
    pass


class BundleError(GCSNTKError, OSError):
    """Base for graph-bundle format problems; ``path`` names the offending file."""

    def __init__(self, path, message):
        self.path = str(path)
        super().__init__(f"{self.path}: {message}")


class MagicMismatchError(BundleError):
    pass


class CountMismatchError(BundleError):
    pass


class IndexRangeError(BundleError):
    pass
