from typing import Optional, Sequence


class SketchError(ValueError):
    """Base class for every error raised by pcsketch."""


class ParameterError(SketchError):
    pass


class DimensionMismatchError(SketchError):
    pass


class IndexOutOfRangeError(SketchError):
    pass


class VariantError(SketchError):
    pass


class MergeError(SketchError):
    pass


class CollisionError(SketchError):
    """Two indices of a support set share a bucket in some row."""

    def __init__(self, row: int, bucket: int, indices: Optional[Sequence[int]] = None):
        self.row = int(row)
        self.bucket = int(bucket)
        self.indices = [int(i) for i in indices] if indices is not None else []
        super().__init__(
            f"collision in row {self.row}, bucket {self.bucket} (indices {self.indices})"
        )


class PrivacyParameterError(SketchError):
    pass


class DatasetError(SketchError):
    pass


class SerializationError(SketchError):
    pass


class MemoryGuardError(SketchError):
    pass
