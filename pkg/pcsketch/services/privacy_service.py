import itertools
import logging
import math
from typing import Optional, Sequence

import numpy as np

# Local imports
from ..config import get_settings
from ..exceptions import CollisionError, ParameterError, PrivacyParameterError
from ..models import (
    Dataset,
    HashFamily,
    NoiseKind,
    NoiseSpec,
    PrivacyBudget,
    SensitivityMode,
    SensitivityResolution,
    Sketch,
    SketchParams,
    SparseVector,
)
from .hashing_service import hashing_service
from .sketch_service import sketch_service

logger = logging.getLogger(__name__)

NOISE_STREAM = 1
RESAMPLE_STREAM = 2
COLLISION_CHUNK = 50_000


class PrivacyService:
    """
    Noise mechanisms and calibration for Private CountSketch.

    Noise comes from a statistical (non-cryptographic) PCG64 stream seeded by the master
    seed, independent of any hash seed. Deployments that need cryptographic randomness
    should install their own generator with set_entropy_source. Gaussian draws use numpy's
    continuous sampler; floating-point attacks on it are out of scope.
    """

    def __init__(self, master_seed: Optional[int] = None):
        self._master_seed = master_seed
        self._entropy: Optional[np.random.Generator] = None
        self._streams_issued = itertools.count()

    @property
    def master_seed(self) -> int:
        if self._master_seed is None:
            self._master_seed = get_settings().seed
        return self._master_seed

    def set_entropy_source(self, generator: Optional[np.random.Generator]):
        """Route all future noise draws through the given generator (None restores the default)."""
        self._entropy = generator

    def noise_generator(self, sketch: Sketch) -> np.random.Generator:
        if self._entropy is not None:
            return self._entropy
        stream = next(self._streams_issued)
        seq = np.random.SeedSequence(self.master_seed, spawn_key=(NOISE_STREAM, sketch.params.seed, stream))
        return np.random.Generator(np.random.PCG64(seq))

    # --- calibration ---

    def gaussian_sigma(self, epsilon: float, delta: float, sensitivity: float) -> float:
        """Gaussian mechanism scale sensitivity * sqrt(2 ln(1.25/delta)) / epsilon."""
        if not 0 < epsilon <= 1:
            raise PrivacyParameterError(f"epsilon must lie in (0, 1], got {epsilon}")
        if not 0 < delta < 1:
            raise PrivacyParameterError(f"delta must lie in (0, 1), got {delta}")
        if not sensitivity > 0:
            raise PrivacyParameterError(f"sensitivity must be positive, got {sensitivity}")
        return sensitivity * math.sqrt(2 * math.log(1.25 / delta)) / epsilon

    def calibrate_gaussian(self, epsilon: float, delta: float, k: int) -> float:
        """
        Per-cell sigma making a k-row CountSketch (epsilon, delta)-DP:
        sigma^2 = 2k ln(1.25/delta) / epsilon^2. This is the boundary value; callers that
        need the strict inequality should shave a little off epsilon.
        """
        if k < 1:
            raise PrivacyParameterError(f"k must be at least 1, got {k}")
        return self.gaussian_sigma(epsilon, delta, self.sensitivity_single(k))

    def zcdp_of(self, sigma: float, k: int) -> float:
        if not sigma > 0:
            raise PrivacyParameterError(f"sigma must be positive, got {sigma}")
        return k / (2 * sigma ** 2)

    def sigma_for_zcdp(self, rho: float, k: int) -> float:
        if not rho > 0:
            raise PrivacyParameterError(f"rho must be positive, got {rho}")
        return math.sqrt(k / (2 * rho))

    def calibrate_laplace(self, epsilon: float, k: int) -> float:
        """Laplace scale for a k-row Count-Min sketch (L1 sensitivity k)."""
        if not epsilon > 0:
            raise PrivacyParameterError(f"epsilon must be positive, got {epsilon}")
        return k / epsilon

    def budget_from_sigma(self, sigma: float, k: int, delta: float) -> PrivacyBudget:
        rho = self.zcdp_of(sigma, k)
        epsilon = math.sqrt(2 * k * math.log(1.25 / delta)) / sigma
        if epsilon > 1:
            logger.warning(f"sigma={sigma} with k={k} gives epsilon={epsilon:.3f}, outside the calibrated regime")
        return PrivacyBudget(epsilon=epsilon, delta=delta, rho=rho)

    # --- sensitivity ---

    def sensitivity_single(self, k: int) -> float:
        if k < 1:
            raise ParameterError(f"k must be at least 1, got {k}")
        return math.sqrt(k)

    def group_sensitivity(self, k: int, m: int, family: HashFamily, support: Sequence[int],
                          mode: SensitivityMode = SensitivityMode.COLLISION_FREE) -> float:
        """
        L2 sensitivity for changing m coordinates by at most 1 each.
        worst_case: m * sqrt(k) for any hash outcome. collision_free: sqrt(m * k), valid only
        when no two support indices share a bucket in any row of this family.
        """
        support = np.unique(np.asarray(support, dtype=np.int64))
        if m < 1 or support.size != m:
            raise ParameterError(f"support must hold exactly m={m} distinct indices, got {support.size}")
        if k != family.params.k:
            raise ParameterError(f"k={k} does not match the family's k={family.params.k}")
        if support[0] < 0 or support[-1] >= family.params.d:
            raise ParameterError(f"support indices must lie in [0, {family.params.d})")

        if SensitivityMode(mode) == SensitivityMode.WORST_CASE:
            return m * math.sqrt(k)

        buckets = family.buckets[:, support]
        order = np.argsort(buckets, axis=1, kind="stable")
        ranked = np.take_along_axis(buckets, order, axis=1)
        clashes = np.argwhere(ranked[:, 1:] == ranked[:, :-1])
        if clashes.size:
            row, position = clashes[0]
            bucket = ranked[row, position]
            raise CollisionError(row, bucket, support[buckets[row] == bucket])
        return math.sqrt(m * k)

    def find_basket_collision(self, dataset: Dataset, family: HashFamily):
        """First (row, bucket, basket) where two items of one basket share a bucket, or None."""
        b = family.params.b
        offsets = dataset.basket_offsets
        n = dataset.n_baskets
        for start in range(0, n, COLLISION_CHUNK):
            stop = min(start + COLLISION_CHUNK, n)
            items = dataset.basket_items[offsets[start]:offsets[stop]]
            if items.size == 0:
                continue
            owners = np.repeat(np.arange(start, stop, dtype=np.int64), np.diff(offsets[start:stop + 1]))
            for row in range(family.params.k):
                keys = np.sort(owners * b + family.buckets[row, items])
                clash = np.flatnonzero(keys[1:] == keys[:-1])
                if clash.size:
                    key = int(keys[clash[0]])
                    return row, key % b, key // b
        return None

    def resolve_basket_sensitivity(self, dataset: Dataset, params: SketchParams,
                                   resample_limit: Optional[int] = None) -> SensitivityResolution:
        """
        Basket-level sensitivity: try collision_free on params.seed, then on up to
        resample_limit derived seeds, else fall back to worst_case on params.seed.
        """
        if not dataset.has_baskets:
            raise ParameterError(f"dataset '{dataset.name}' has no baskets")
        limit = get_settings().resample_limit if resample_limit is None else resample_limit
        m = max(dataset.largest_basket, 1)

        seeds = [params.seed] + [
            int(np.random.SeedSequence(params.seed, spawn_key=(RESAMPLE_STREAM, attempt))
                .generate_state(1, np.uint64)[0])
            for attempt in range(1, limit + 1)
        ]
        for attempt, seed in enumerate(seeds):
            family = hashing_service.build_hash_family(params.with_seed(seed))
            collision = self.find_basket_collision(dataset, family)
            if collision is None:
                logger.info(f"Basket sensitivity: collision_free with seed {seed} after {attempt + 1} attempt(s)")
                return SensitivityResolution(
                    sensitivity=math.sqrt(m * params.k), mode=SensitivityMode.COLLISION_FREE,
                    seed=seed, attempts=attempt + 1, basket_size=m
                )
            row, bucket, basket = collision
            logger.debug(f"Seed {seed}: basket {basket} collides in row {row}, bucket {bucket}")

        logger.warning(
            f"⚠️ Every tried seed has an intra-basket collision ({len(seeds)} attempts); "
            f"falling back to worst_case sensitivity {m}*sqrt({params.k})"
        )
        return SensitivityResolution(
            sensitivity=m * math.sqrt(params.k), mode=SensitivityMode.WORST_CASE,
            seed=params.seed, attempts=len(seeds), basket_size=m
        )

    # --- mechanisms ---

    def privatize(self, sketch: Sketch, noise: NoiseSpec,
                  rng: Optional[np.random.Generator] = None) -> Sketch:
        """Add i.i.d. noise to every cell, in place. Re-noising composes in noise_applied."""
        if noise.scale < 0:
            raise PrivacyParameterError(f"noise scale must be nonnegative, got {noise.scale}")
        if noise.kind == NoiseKind.NONE:
            return sketch

        composed = sketch.noise_applied.compose(noise)
        generator = rng if rng is not None else self.noise_generator(sketch)
        shape = sketch.table.shape
        if noise.kind == NoiseKind.GAUSSIAN:
            draws = generator.normal(0.0, noise.scale, size=shape)
        else:
            draws = generator.laplace(0.0, noise.scale, size=shape)
        sketch.table += draws
        sketch.noise_applied = composed
        return sketch

    def clip_sketch(self, sketch: Sketch, bound: float) -> Sketch:
        """Rescale the table in place so that its L2 norm is at most bound."""
        if not bound > 0:
            raise PrivacyParameterError(f"clip bound must be positive, got {bound}")
        norm = float(np.linalg.norm(sketch.table))
        if norm > bound:
            factor = bound / norm
            clipped = sketch.table * factor
            while np.linalg.norm(clipped) > bound:
                factor = np.nextafter(factor, 0.0)
                clipped = sketch.table * factor
            sketch.table = clipped
        sketch.clip_bound = bound
        return sketch

    def ldp_encode_sparse(self, x: SparseVector, t: int, family: HashFamily, epsilon: float,
                          delta: float, rng: Optional[np.random.Generator] = None) -> Sketch:
        """
        Local encoding of a t-sparse vector in [-1, 1]^d: CountSketch, clip to 2 sqrt(kt),
        then Gaussian noise calibrated to that clip bound.
        """
        if t < 1:
            raise PrivacyParameterError(f"t must be at least 1, got {t}")
        nonzero = x.values[x.values != 0]
        if nonzero.size > t:
            raise PrivacyParameterError(f"vector has {nonzero.size} nonzero entries, more than t={t}")
        if np.any(np.abs(nonzero) > 1):
            raise PrivacyParameterError("nonzero values must lie in [-1, 1]")

        bound = 2 * math.sqrt(family.params.k * t)
        sketch = sketch_service.sketch_vector(x, family)
        self.clip_sketch(sketch, bound)
        sigma = self.gaussian_sigma(epsilon, delta, bound)
        return self.privatize(sketch, NoiseSpec.gaussian(sigma), rng)


# Global privacy_service instance
privacy_service = PrivacyService()
