import math
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .exceptions import MergeError


class Variant(str, Enum):
    COUNTSKETCH = "countsketch"
    COUNTMIN = "countmin"


class Estimator(str, Enum):
    MEDIAN = "median"
    MEAN = "mean"
    MIN = "min"


class NoiseKind(str, Enum):
    NONE = "none"
    GAUSSIAN = "gaussian"
    LAPLACE = "laplace"


class SensitivityMode(str, Enum):
    WORST_CASE = "worst_case"
    COLLISION_FREE = "collision_free"


class DeltaForm(str, Enum):
    TAIL_B = "tail_b"
    TAIL_HALF_B = "tail_half_b"


class ErrorScale(str, Enum):
    DELTA = "delta"
    SIGMA = "sigma"
    MAX = "max"


class ExperimentId(str, Enum):
    MEDIAN_NORMALS = "median_normals"
    ZERO_VARIANCE = "zero_variance"
    SPARSE = "sparse"
    CITIES = "cities"
    BASKETS = "baskets"
    FAILURE_CURVE = "failure_curve"


def _readonly(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


class SketchParams(BaseModel):
    """Shape and seed of a sketch instance: k rows of b buckets over dimension d."""
    model_config = ConfigDict(frozen=True)

    d: int = Field(ge=1)
    k: int = Field(ge=1)
    b: int = Field(ge=2, lt=2**31)
    seed: int = Field(default=0, ge=0, lt=2**64)

    @field_validator("k")
    @classmethod
    def k_must_be_odd(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError(f"k must be odd, got {value}")
        return value

    @field_validator("b")
    @classmethod
    def b_must_be_even(cls, value: int) -> int:
        if value % 2 != 0:
            raise ValueError(f"b must be even, got {value}")
        return value

    @property
    def hash_entries(self) -> int:
        return self.k * self.d

    def with_seed(self, seed: int) -> "SketchParams":
        return SketchParams(d=self.d, k=self.k, b=self.b, seed=seed)


class NoiseSpec(BaseModel):
    """Distribution of the i.i.d. noise added to every sketch cell."""
    model_config = ConfigDict(frozen=True)

    kind: NoiseKind = NoiseKind.NONE
    scale: float = 0.0

    @model_validator(mode="after")
    def check_scale(self) -> "NoiseSpec":
        if not math.isfinite(self.scale) or self.scale < 0:
            raise ValueError(f"noise scale must be finite and nonnegative, got {self.scale}")
        if (self.scale == 0) != (self.kind == NoiseKind.NONE):
            raise ValueError(f"scale {self.scale} is inconsistent with noise kind '{self.kind.value}'")
        return self

    @classmethod
    def none(cls) -> "NoiseSpec":
        return cls()

    @classmethod
    def gaussian(cls, sigma: float) -> "NoiseSpec":
        """Gaussian noise; sigma == 0 means no noise at all."""
        if sigma == 0:
            return cls()
        return cls(kind=NoiseKind.GAUSSIAN, scale=sigma)

    @classmethod
    def laplace(cls, scale: float) -> "NoiseSpec":
        if scale == 0:
            return cls()
        return cls(kind=NoiseKind.LAPLACE, scale=scale)

    @property
    def sigma(self) -> float:
        return self.scale if self.kind == NoiseKind.GAUSSIAN else 0.0

    def compose(self, other: "NoiseSpec") -> "NoiseSpec":
        """Noise of the sum (or difference) of two independently noised tables."""
        if other.kind == NoiseKind.NONE:
            return self
        if self.kind == NoiseKind.NONE:
            return other
        if self.kind == NoiseKind.GAUSSIAN and other.kind == NoiseKind.GAUSSIAN:
            return NoiseSpec.gaussian(math.hypot(self.scale, other.scale))
        raise MergeError(
            f"cannot record composition of {self.kind.value} and {other.kind.value} noise"
        )

    def scaled(self, factor: float) -> "NoiseSpec":
        if self.kind == NoiseKind.NONE or factor == 0:
            return NoiseSpec()
        return NoiseSpec(kind=self.kind, scale=self.scale * abs(factor))


class PrivacyBudget(BaseModel):
    model_config = ConfigDict(frozen=True)

    epsilon: float = Field(gt=0)
    delta: float = Field(gt=0, lt=1)
    rho: Optional[float] = Field(default=None, gt=0)


class HashFamily(BaseModel):
    """Materialized fully random hash functions: k bucket rows and k sign rows over [d].

    Buckets are stored 0-based. The arrays are read-only once validated.
    """
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    params: SketchParams
    buckets: np.ndarray
    signs: np.ndarray

    @field_validator("buckets", mode="before")
    @classmethod
    def as_bucket_array(cls, value: Any) -> np.ndarray:
        return np.array(value, dtype=np.int32, copy=True)

    @field_validator("signs", mode="before")
    @classmethod
    def as_sign_array(cls, value: Any) -> np.ndarray:
        return np.array(value, dtype=np.int8, copy=True)

    @model_validator(mode="after")
    def check_tables(self) -> "HashFamily":
        shape = (self.params.k, self.params.d)
        if self.buckets.shape != shape or self.signs.shape != shape:
            raise ValueError(
                f"hash tables must have shape {shape}, got {self.buckets.shape} and {self.signs.shape}"
            )
        if self.buckets.min() < 0 or self.buckets.max() >= self.params.b:
            raise ValueError(f"bucket values must lie in [0, {self.params.b})")
        if not np.all(np.abs(self.signs) == 1):
            raise ValueError("sign values must be -1 or +1")
        _readonly(self.buckets)
        _readonly(self.signs)
        return self


class SparseVector(BaseModel):
    """Vector in R^d given by strictly increasing 0-based indices and their values."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    dimension: int = Field(ge=1)
    indices: np.ndarray
    values: np.ndarray

    @field_validator("indices", mode="before")
    @classmethod
    def as_index_array(cls, value: Any) -> np.ndarray:
        return np.array(value, dtype=np.int64, copy=True).reshape(-1)

    @field_validator("values", mode="before")
    @classmethod
    def as_value_array(cls, value: Any) -> np.ndarray:
        return np.array(value, dtype=np.float64, copy=True).reshape(-1)

    @model_validator(mode="after")
    def check_entries(self) -> "SparseVector":
        if self.indices.shape != self.values.shape:
            raise ValueError(
                f"{self.indices.size} indices but {self.values.size} values"
            )
        if self.indices.size:
            if self.indices[0] < 0 or self.indices[-1] >= self.dimension:
                raise ValueError(f"indices must lie in [0, {self.dimension})")
            if np.any(np.diff(self.indices) <= 0):
                raise ValueError("indices must be strictly increasing")
            if not np.all(np.isfinite(self.values)):
                raise ValueError("values must be finite")
        _readonly(self.indices)
        _readonly(self.values)
        return self

    @classmethod
    def zeros(cls, dimension: int) -> "SparseVector":
        return cls(dimension=dimension, indices=[], values=[])

    @classmethod
    def one_hot(cls, dimension: int, index: int, value: float = 1.0) -> "SparseVector":
        return cls(dimension=dimension, indices=[index], values=[value])

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> "SparseVector":
        dense = np.asarray(dense, dtype=np.float64).reshape(-1)
        support = np.flatnonzero(dense)
        return cls(dimension=dense.size, indices=support, values=dense[support])

    @classmethod
    def from_dict(cls, dimension: int, entries: Dict[int, float]) -> "SparseVector":
        indices = sorted(entries)
        return cls(dimension=dimension, indices=indices, values=[entries[i] for i in indices])

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def to_dense(self) -> np.ndarray:
        dense = np.zeros(self.dimension)
        dense[self.indices] = self.values
        return dense

    def to_dict(self) -> Dict[int, float]:
        return {int(i): float(v) for i, v in zip(self.indices, self.values)}

    def get(self, index: int) -> float:
        position = np.searchsorted(self.indices, index)
        if position < self.indices.size and self.indices[position] == index:
            return float(self.values[position])
        return 0.0

    def combine(self, other: "SparseVector", alpha: float = 1.0, beta: float = 1.0) -> "SparseVector":
        """alpha * self + beta * other over the union of both supports."""
        if other.dimension != self.dimension:
            raise ValueError(f"dimensions differ: {self.dimension} vs {other.dimension}")
        support = np.union1d(self.indices, other.indices)
        values = np.zeros(support.size)
        values[np.searchsorted(support, self.indices)] += alpha * self.values
        values[np.searchsorted(support, other.indices)] += beta * other.values
        return SparseVector(dimension=self.dimension, indices=support, values=values)


class Sketch(BaseModel):
    """k x b table of a (possibly noised) CountSketch or Count-Min sketch."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    params: SketchParams
    family: HashFamily
    table: np.ndarray
    variant: Variant = Variant.COUNTSKETCH
    noise_applied: NoiseSpec = NoiseSpec()
    clip_bound: Optional[float] = None

    @field_validator("table", mode="before")
    @classmethod
    def as_table(cls, value: Any) -> np.ndarray:
        return np.asarray(value, dtype=np.float64)

    @model_validator(mode="after")
    def check_table(self) -> "Sketch":
        if self.family.params != self.params:
            raise ValueError("sketch params differ from its hash family params")
        shape = (self.params.k, self.params.b)
        if self.table.shape != shape:
            raise ValueError(f"table must have shape {shape}, got {self.table.shape}")
        if not np.all(np.isfinite(self.table)):
            raise ValueError("table entries must be finite")
        return self

    def clone(self) -> "Sketch":
        return self.model_copy(update={"table": self.table.copy()})


class ErrorSummary(BaseModel):
    median: float
    q90: float
    q95: float
    q99: float
    max: float


class ErrorReport(BaseModel):
    """Absolute errors of a batch of estimates and their empirical CDF."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    errors: np.ndarray
    thresholds: np.ndarray
    cum_probs: np.ndarray
    summary: ErrorSummary
    metadata: Dict[str, Any] = Field(default_factory=dict)

    @property
    def cdf(self) -> List[Tuple[float, float]]:
        return [(float(t), float(p)) for t, p in zip(self.thresholds, self.cum_probs)]

    @property
    def trials(self) -> int:
        return int(self.errors.size)


class Dataset(BaseModel):
    """Aggregate count vector of a dataset plus the baskets it was built from.

    Baskets are stored flattened: basket i is basket_items[basket_offsets[i]:basket_offsets[i + 1]].
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    name: str
    keys: List[str]
    vector: SparseVector
    basket_items: Optional[np.ndarray] = None
    basket_offsets: Optional[np.ndarray] = None
    max_basket: Optional[int] = None
    stats: Dict[str, int] = Field(default_factory=dict)

    @model_validator(mode="after")
    def check_index_map(self) -> "Dataset":
        if len(self.keys) != self.vector.dimension:
            raise ValueError(f"{len(self.keys)} keys for a vector of dimension {self.vector.dimension}")
        if (self.basket_items is None) != (self.basket_offsets is None):
            raise ValueError("basket items and offsets must be given together")
        return self

    @property
    def dimension(self) -> int:
        return self.vector.dimension

    @property
    def has_baskets(self) -> bool:
        return self.basket_offsets is not None

    @property
    def n_baskets(self) -> int:
        return int(self.basket_offsets.size - 1) if self.has_baskets else 0

    @property
    def basket_sizes(self) -> np.ndarray:
        return np.diff(self.basket_offsets) if self.has_baskets else np.zeros(0, dtype=np.int64)

    @property
    def largest_basket(self) -> int:
        sizes = self.basket_sizes
        return int(sizes.max()) if sizes.size else 0

    @property
    def total_count(self) -> float:
        return float(self.vector.values.sum())

    @property
    def index_map(self) -> Dict[str, int]:
        return {key: i for i, key in enumerate(self.keys)}

    def basket(self, i: int) -> np.ndarray:
        return self.basket_items[self.basket_offsets[i]:self.basket_offsets[i + 1]]

    def summary_text(self) -> str:
        lines = [
            f"name: {self.name}",
            f"distinct_ids: {self.dimension}",
            f"total_count: {int(self.total_count)}",
        ]
        if self.has_baskets:
            lines.append(f"baskets: {self.n_baskets}")
            lines.append(f"max_basket: {self.max_basket}")
            lines.append(f"largest_basket: {self.largest_basket}")
        lines.extend(f"{key}: {value}" for key, value in sorted(self.stats.items()))
        return "\n".join(lines) + "\n"


class SensitivityResolution(BaseModel):
    sensitivity: float
    mode: SensitivityMode
    seed: int
    attempts: int
    basket_size: int


class FailureRateConfig(BaseModel):
    """Setup of a Monte Carlo estimate of Pr[|estimate - truth| > alpha * scale]."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    x: SparseVector
    k: int
    b: int
    noise: NoiseSpec = NoiseSpec()
    indices: List[int]
    alpha: float
    scale: ErrorScale = ErrorScale.DELTA
    delta_form: DeltaForm = DeltaForm.TAIL_HALF_B

    @field_validator("alpha")
    @classmethod
    def alpha_in_unit_interval(cls, value: float) -> float:
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {value}")
        return value


class ExperimentConfig(BaseModel):
    experiment: ExperimentId
    ks: List[int] = Field(default_factory=lambda: [1, 5, 15, 25])
    b: Optional[int] = None
    kb: Optional[int] = None
    d: Optional[int] = None
    t: Optional[int] = None
    value: float = 10.0
    sigma: Optional[float] = Field(default=None, ge=0)
    epsilon: Optional[float] = None
    delta: Optional[float] = None
    trials: int = Field(default=100_000, ge=1)
    seed: int = Field(default=0, ge=0, lt=2**64)
    workers: int = Field(default=1, ge=1)
    estimator: Estimator = Estimator.MEDIAN
    dataset_path: Optional[str] = None
    max_basket: Optional[int] = Field(default=None, ge=1)
    countmin_baseline: bool = False
    out: Optional[str] = None

    @field_validator("ks")
    @classmethod
    def ks_must_be_odd(cls, value: List[int]) -> List[int]:
        if not value:
            raise ValueError("at least one k is required")
        bad = [k for k in value if k < 1 or k % 2 == 0]
        if bad:
            raise ValueError(f"every k must be a positive odd integer, got {bad}")
        return value

    @model_validator(mode="after")
    def check_required_fields(self) -> "ExperimentConfig":
        missing = []
        if self.experiment == ExperimentId.SPARSE:
            if self.t is None:
                missing.append("t")
        if self.experiment in (ExperimentId.CITIES, ExperimentId.BASKETS):
            if not self.dataset_path:
                missing.append("dataset_path")
            if self.b is None and self.kb is None:
                missing.append("b or kb")
        if self.experiment == ExperimentId.CITIES and self.sigma is None:
            missing.append("sigma")
        if self.experiment == ExperimentId.BASKETS and self.sigma is None:
            if self.epsilon is None or self.delta is None:
                missing.append("sigma or (epsilon, delta)")
        if missing:
            raise ValueError(f"experiment '{self.experiment.value}' requires: {', '.join(missing)}")
        return self

    @property
    def budget(self) -> Optional[PrivacyBudget]:
        if self.epsilon is None or self.delta is None:
            return None
        return PrivacyBudget(epsilon=self.epsilon, delta=self.delta)


class ExperimentResult(BaseModel):
    experiment: ExperimentId
    series: Dict[str, ErrorReport] = Field(default_factory=dict)
    curves: Dict[str, List[Tuple[int, float]]] = Field(default_factory=dict)
    metadata: Dict[str, Any] = Field(default_factory=dict)


class CalibrationResponseModel(BaseModel):
    success: bool = True
    epsilon: float
    delta: float
    k: int
    sigma: float
    rho: float


class QueryResponseModel(BaseModel):
    success: bool = True
    name: str
    estimator: Estimator
    indices: List[int]
    estimates: List[float]
