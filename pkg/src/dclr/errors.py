"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array shapes are incompatible with the operation."""


class DataError(ValueError):
    """Input data cannot satisfy the request (e.g. clip too short)."""


class BatchSizeError(ValueError):
    """Batch too small to form negatives."""


class IntegrityError(RuntimeError):
    """A persisted artifact failed its checksum, version or config check."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite."""
