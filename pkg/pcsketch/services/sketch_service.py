import logging
import struct
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from pydantic import ValidationError

# Local imports
from ..exceptions import (
    DimensionMismatchError,
    IndexOutOfRangeError,
    MergeError,
    SerializationError,
    VariantError,
)
from ..models import (
    Estimator,
    HashFamily,
    NoiseKind,
    NoiseSpec,
    Sketch,
    SketchParams,
    SparseVector,
    Variant,
)
from .hashing_service import hashing_service

logger = logging.getLogger(__name__)

SKETCH_MAGIC = b"PCSS1"
SKETCH_HEADER = struct.Struct("<5sQQQQBBd")

VARIANT_CODES = {Variant.COUNTSKETCH: 0, Variant.COUNTMIN: 1}
NOISE_CODES = {NoiseKind.NONE: 0, NoiseKind.GAUSSIAN: 1, NoiseKind.LAPLACE: 2}


class SketchService:
    """Linear sketching of vectors, sketch algebra and point estimators."""

    def empty_sketch(self, family: HashFamily, variant: Variant = Variant.COUNTSKETCH) -> Sketch:
        p = family.params
        return Sketch(params=p, family=family, table=np.zeros((p.k, p.b)), variant=variant)

    def sketch_vector(self, x: SparseVector, family: HashFamily,
                      variant: Variant = Variant.COUNTSKETCH) -> Sketch:
        """
        table[i, j] = sum over l with buckets[i, l] == j of signs[i, l] * x_l
        (signs taken as +1 for Count-Min). Cells accumulate row by row in index order.
        """
        p = family.params
        if x.dimension != p.d:
            raise DimensionMismatchError(f"vector dimension {x.dimension} != sketch dimension {p.d}")

        sketch = self.empty_sketch(family, variant)
        if x.nnz == 0:
            return sketch

        buckets = family.buckets[:, x.indices]
        if variant == Variant.COUNTMIN:
            weights = np.broadcast_to(x.values, buckets.shape)
        else:
            weights = family.signs[:, x.indices] * x.values
        cells = np.arange(p.k)[:, None] * p.b + buckets
        sketch.table = np.bincount(
            cells.ravel(), weights=weights.ravel(), minlength=p.k * p.b
        ).reshape(p.k, p.b)
        return sketch

    def sketch_dense(self, dense: np.ndarray, family: HashFamily,
                     variant: Variant = Variant.COUNTSKETCH) -> Sketch:
        return self.sketch_vector(SparseVector.from_dense(dense), family, variant)

    def update(self, sketch: Sketch, index: int, delta: float) -> Sketch:
        """Add delta to coordinate index of the sketched vector, in place."""
        self._check_indices(sketch.params, [index])
        rows = np.arange(sketch.params.k)
        cols = sketch.family.buckets[:, index]
        if sketch.variant == Variant.COUNTMIN:
            sketch.table[rows, cols] += delta
        else:
            sketch.table[rows, cols] += sketch.family.signs[:, index] * delta
        return sketch

    def merge_add(self, a: Sketch, b: Sketch) -> Sketch:
        self._check_mergeable(a, b)
        return Sketch(
            params=a.params, family=a.family, table=a.table + b.table, variant=a.variant,
            noise_applied=a.noise_applied.compose(b.noise_applied)
        )

    def merge_sub(self, a: Sketch, b: Sketch) -> Sketch:
        self._check_mergeable(a, b)
        return Sketch(
            params=a.params, family=a.family, table=a.table - b.table, variant=a.variant,
            noise_applied=a.noise_applied.compose(b.noise_applied)
        )

    def scale_sketch(self, sketch: Sketch, factor: float) -> Sketch:
        return Sketch(
            params=sketch.params, family=sketch.family, table=sketch.table * factor,
            variant=sketch.variant, noise_applied=sketch.noise_applied.scaled(factor)
        )

    def row_estimates(self, sketch: Sketch, index: int) -> np.ndarray:
        """The k per-row estimators of x_index."""
        return self._row_matrix(sketch, self._check_indices(sketch.params, [index]))[:, 0]

    def estimate_median(self, sketch: Sketch, index: int) -> float:
        return float(self.estimate_all(sketch, [index], Estimator.MEDIAN)[0])

    def estimate_mean(self, sketch: Sketch, index: int) -> float:
        return float(self.estimate_all(sketch, [index], Estimator.MEAN)[0])

    def estimate_min(self, sketch: Sketch, index: int) -> float:
        return float(self.estimate_all(sketch, [index], Estimator.MIN)[0])

    def estimate_all(self, sketch: Sketch, indices: Sequence[int],
                     estimator: Optional[Estimator] = None) -> np.ndarray:
        """
        Batched point estimates. The default estimator is the median for CountSketch
        and the minimum for Count-Min. Any out-of-range index fails the whole batch.
        """
        estimator = Estimator(estimator) if estimator is not None else self.default_estimator(sketch.variant)
        self._check_estimator(sketch.variant, estimator)
        idx = self._check_indices(sketch.params, indices)
        if idx.size == 0:
            return np.zeros(0)

        rows = self._row_matrix(sketch, idx)
        if estimator == Estimator.MEDIAN:
            # k is odd: the middle order statistic, no interpolation
            return np.sort(rows, axis=0)[sketch.params.k // 2]
        if estimator == Estimator.MEAN:
            return rows.mean(axis=0)
        return rows.min(axis=0)

    @staticmethod
    def default_estimator(variant: Variant) -> Estimator:
        return Estimator.MIN if variant == Variant.COUNTMIN else Estimator.MEDIAN

    def serialize_sketch(self, sketch: Sketch) -> bytes:
        p = sketch.params
        header = SKETCH_HEADER.pack(
            SKETCH_MAGIC, p.d, p.k, p.b, p.seed,
            VARIANT_CODES[sketch.variant],
            NOISE_CODES[sketch.noise_applied.kind],
            sketch.noise_applied.scale
        )
        return header + np.ascontiguousarray(sketch.table, dtype="<f8").tobytes()

    def deserialize_sketch(self, data: bytes, family: Optional[HashFamily] = None) -> Sketch:
        """Inverse of serialize_sketch. Without a family, it is rebuilt from the stored seed."""
        if len(data) < SKETCH_HEADER.size:
            raise SerializationError(f"sketch blob too short ({len(data)} bytes)")
        magic, d, k, b, seed, variant_code, noise_code, scale = SKETCH_HEADER.unpack_from(data, 0)
        if magic != SKETCH_MAGIC:
            raise SerializationError(f"bad magic {magic!r}, expected {SKETCH_MAGIC!r}")
        try:
            params = SketchParams(d=d, k=k, b=b, seed=seed)
            variant = {code: v for v, code in VARIANT_CODES.items()}[variant_code]
            kind = {code: n for n, code in NOISE_CODES.items()}[noise_code]
            noise = NoiseSpec(kind=kind, scale=scale)
        except (ValidationError, KeyError) as e:
            raise SerializationError(f"invalid sketch header: {e}") from e

        expected = SKETCH_HEADER.size + 8 * k * b
        if len(data) != expected:
            raise SerializationError(f"sketch blob has {len(data)} bytes, expected {expected}")
        if family is None:
            family = hashing_service.family_for(params)
        elif family.params != params:
            raise SerializationError("supplied hash family does not match the stored params")

        table = np.frombuffer(data, dtype="<f8", count=k * b, offset=SKETCH_HEADER.size)
        return Sketch(
            params=params, family=family, table=table.reshape(k, b).astype(np.float64),
            variant=variant, noise_applied=noise
        )

    def save_sketch(self, sketch: Sketch, path: Union[str, Path]):
        Path(path).write_bytes(self.serialize_sketch(sketch))
        logger.info(f"Saved {sketch.variant.value} sketch k={sketch.params.k} b={sketch.params.b} to {path}")

    def load_sketch(self, path: Union[str, Path], family: Optional[HashFamily] = None) -> Sketch:
        return self.deserialize_sketch(Path(path).read_bytes(), family)

    def _row_matrix(self, sketch: Sketch, idx: np.ndarray) -> np.ndarray:
        rows = np.arange(sketch.params.k)[:, None]
        values = sketch.table[rows, sketch.family.buckets[:, idx]]
        if sketch.variant == Variant.COUNTSKETCH:
            values = values * sketch.family.signs[:, idx]
        return values

    @staticmethod
    def _check_indices(params: SketchParams, indices: Sequence[int]) -> np.ndarray:
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        if idx.size and (idx.min() < 0 or idx.max() >= params.d):
            bad = idx[(idx < 0) | (idx >= params.d)]
            raise IndexOutOfRangeError(f"indices {bad[:5].tolist()} outside [0, {params.d})")
        return idx

    @staticmethod
    def _check_estimator(variant: Variant, estimator: Estimator):
        if variant == Variant.COUNTMIN and estimator != Estimator.MIN:
            raise VariantError(f"the {estimator.value} estimator needs a countsketch, not countmin")
        if variant == Variant.COUNTSKETCH and estimator == Estimator.MIN:
            raise VariantError("the min estimator needs a countmin sketch, not countsketch")

    @staticmethod
    def _check_mergeable(a: Sketch, b: Sketch):
        if a.params != b.params:
            raise MergeError(f"params differ: {a.params} vs {b.params}")
        if a.variant != b.variant:
            raise MergeError(f"variants differ: {a.variant.value} vs {b.variant.value}")
        if a.family is not b.family and not (
            np.array_equal(a.family.buckets, b.family.buckets)
            and np.array_equal(a.family.signs, b.family.signs)
        ):
            raise MergeError("sketches were built over different hash families")


# Global sketch_service instance
sketch_service = SketchService()
