"""Exception types shared across the package."""


class GplvmError(Exception):
    """Base class for every error raised by this package."""


class ShapeMismatch(GplvmError):
    """Operands have incompatible shapes."""


class NotPositiveDefinite(GplvmError):
    """A matrix failed Cholesky factorization even after the jitter ladder."""


class InvalidCount(GplvmError):
    """A count argument (sample size, dimension, ...) is out of range."""


class NonScalarLoss(GplvmError):
    """backward() was called on a non-scalar quantity."""


class IndexOutOfRange(GplvmError):
    """A data-point or dimension index exceeds the stored range."""


class InvalidK(GplvmError):
    """An annealing or sample count K is out of range."""


class NonFiniteDrift(GplvmError):
    """A Langevin drift evaluation produced NaN or infinity."""


class ParseError(GplvmError):
    """A CSV cell could not be parsed; message names row and column."""


class RaggedRows(GplvmError):
    """CSV rows have inconsistent lengths."""


class DegenerateColumn(GplvmError):
    """A data column has zero variance and cannot be standardized."""


class NoMaskedEntries(GplvmError):
    """Reconstruction was requested on a dataset without missing entries."""


class VersionMismatch(GplvmError):
    """Checkpoint format version is not supported."""


class CorruptCheckpoint(GplvmError):
    """Checkpoint file is truncated or not parseable."""


class ShapeTableMismatch(GplvmError):
    """Checkpoint array data disagrees with its declared shape table."""
