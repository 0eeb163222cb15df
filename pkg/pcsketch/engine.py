import logging
import math
from functools import partial
from typing import Any, Dict, Optional, Tuple

import numpy as np

# Local imports
from .exceptions import DatasetError, ParameterError
from .models import (
    Dataset,
    Estimator,
    ExperimentConfig,
    ExperimentId,
    ExperimentResult,
    NoiseSpec,
    PrivacyBudget,
    SketchParams,
    SparseVector,
    Variant,
)
from .services.analysis_service import analysis_service, map_trials, trial_generator, trial_seed
from .services.dataset_service import dataset_service
from .services.hashing_service import hashing_service
from .services.privacy_service import privacy_service
from .services.sketch_service import sketch_service

logger = logging.getLogger(__name__)

TRIAL_STREAM = 0
BASELINE_STREAM = 1
BLOCK_SIZE = 10_000
DEFAULT_EPSILON = 1.0
DEFAULT_DELTA = 1e-6
FAILURE_BETAS = (0.55, 0.65, 0.75, 0.85)
FAILURE_KS = tuple(range(1, 50, 2))


def _median_noise_block(k: int, sigma: float, task: Tuple[int, np.random.SeedSequence]) -> np.ndarray:
    """Signed median of k Gaussian draws with standard deviation sigma, n times."""
    n, seq = task
    rng = np.random.Generator(np.random.PCG64(seq))
    draws = rng.normal(0.0, sigma, size=(n, k))
    return np.sort(draws, axis=1)[:, k // 2]


def _sparse_trial(d: int, t: int, value: float, params: Tuple[int, int], noise: NoiseSpec,
                  estimator: Estimator, seq: np.random.SeedSequence) -> np.ndarray:
    k, b = params
    support_seq, noise_seq = seq.spawn(2)
    support = np.random.Generator(np.random.PCG64(support_seq)).choice(d, size=t, replace=False)
    x = SparseVector(dimension=d, indices=np.sort(support), values=np.full(t, value))

    family = hashing_service.build_hash_family(SketchParams(d=d, k=k, b=b, seed=trial_seed(seq)))
    sketch = sketch_service.sketch_vector(x, family)
    privacy_service.privatize(sketch, noise, np.random.Generator(np.random.PCG64(noise_seq)))
    return sketch_service.estimate_all(sketch, x.indices, estimator) - value


class Engine:
    def run(self, config: ExperimentConfig) -> ExperimentResult:
        logger.info("=" * 60)
        logger.info(f"🚀 EXPERIMENT {config.experiment.value.upper()} STARTED")
        logger.info("=" * 60)

        runners = {
            ExperimentId.MEDIAN_NORMALS: self.run_median_normals,
            ExperimentId.ZERO_VARIANCE: self.run_zero_variance,
            ExperimentId.SPARSE: self.run_sparse,
            ExperimentId.CITIES: self.run_dataset,
            ExperimentId.BASKETS: self.run_dataset,
            ExperimentId.FAILURE_CURVE: self.run_failure_curve,
        }
        try:
            result = runners[config.experiment](config)
        except Exception as e:
            logger.error(f"💥 Experiment {config.experiment.value} failed: {e}")
            raise

        for name, report in result.series.items():
            s = report.summary
            logger.info(f"   {name}: median={s.median:.4g} q90={s.q90:.4g} q99={s.q99:.4g} ({report.trials} errors)")
        if config.out:
            self.write_result(result, config)

        logger.info("=" * 60)
        logger.info(f"✅ EXPERIMENT {config.experiment.value.upper()} COMPLETED")
        logger.info("=" * 60)
        return result

    def write_result(self, result: ExperimentResult, config: ExperimentConfig):
        echo = {key: value for key, value in config.model_dump(mode="json").items()
                if key not in ("out", "workers")}
        echo.update(result.metadata)
        if result.curves:
            analysis_service.write_curve_csv(config.out, result.curves, echo)
        else:
            analysis_service.write_cdf_csv(config.out, result.series, echo)

    # --- synthetic experiments ---

    def run_median_normals(self, config: ExperimentConfig) -> ExperimentResult:
        """Median of k independent releases of a zero answer, each with noise variance k."""
        result = ExperimentResult(experiment=config.experiment)
        for k in config.ks:
            signed = self._median_of_noise(k, math.sqrt(k), config)
            result.series[f"k={k}"] = analysis_service.report_from_errors(
                signed, metadata={"signed_sd": float(np.std(signed))}
            )
        return result

    def run_zero_variance(self, config: ExperimentConfig) -> ExperimentResult:
        """
        Exact row estimators (no collisions) plus Gaussian cell noise at rho = 1/2, so
        sigma^2 = k. The 'gaussian' series is |N(0, 1)|, the error of a direct release.
        """
        result = ExperimentResult(experiment=config.experiment, metadata={"rho": 0.5})
        for k in config.ks:
            sigma = privacy_service.sigma_for_zcdp(0.5, k)
            signed = self._median_of_noise(k, sigma, config)
            result.series[f"k={k}"] = analysis_service.report_from_errors(
                signed, metadata={"sigma": sigma, "signed_sd": float(np.std(signed))}
            )
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(config.seed, spawn_key=(BASELINE_STREAM,))))
        result.series["gaussian"] = analysis_service.report_from_errors(rng.normal(0.0, 1.0, size=config.trials))
        return result

    def _median_of_noise(self, k: int, sigma: float, config: ExperimentConfig) -> np.ndarray:
        sizes = [BLOCK_SIZE] * (config.trials // BLOCK_SIZE)
        if config.trials % BLOCK_SIZE:
            sizes.append(config.trials % BLOCK_SIZE)
        seqs = np.random.SeedSequence(config.seed, spawn_key=(TRIAL_STREAM, k)).spawn(len(sizes))
        blocks = map_trials(partial(_median_noise_block, k, sigma), list(zip(sizes, seqs)), config.workers)
        return np.concatenate(blocks)

    def run_sparse(self, config: ExperimentConfig) -> ExperimentResult:
        """
        t-sparse vectors with every nonzero equal to config.value. Each trial draws a fresh
        support and a fresh hash family; all t support entries are queried.
        """
        t = config.t
        if t < 1:
            raise ParameterError(f"t must be at least 1, got {t}")
        d = config.d or 10 * t
        if d < t:
            raise ParameterError(f"dimension d={d} cannot hold {t} nonzero entries")
        b = config.b or self._even_buckets(max(t, 2), "b=t")

        result = ExperimentResult(experiment=config.experiment, metadata={"d": d, "b": b})
        for k in config.ks:
            sigma, budget_note = self._sparse_sigma(config, k)
            noise = NoiseSpec.gaussian(sigma)
            logger.info(f"🔍 k={k} b={b} sigma={sigma:.4g} ({budget_note}), {config.trials} trials")

            seqs = np.random.SeedSequence(config.seed, spawn_key=(TRIAL_STREAM, k)).spawn(config.trials)
            trial = partial(_sparse_trial, d, t, config.value, (k, b), noise, config.estimator)
            errors = np.vstack(map_trials(trial, seqs, config.workers))
            exact = float(np.mean(np.all(errors == 0, axis=1)))
            result.series[f"pcs k={k}"] = analysis_service.report_from_errors(
                errors, metadata={"sigma": sigma, "exact_trials": exact}
            )

            # Direct Gaussian release of x at the same zCDP level
            baseline_sigma = sigma / math.sqrt(k)
            rng = np.random.Generator(np.random.PCG64(
                np.random.SeedSequence(config.seed, spawn_key=(BASELINE_STREAM, k))
            ))
            result.series[f"gaussian k={k}"] = analysis_service.report_from_errors(
                rng.normal(0.0, baseline_sigma, size=errors.size) if baseline_sigma > 0 else np.zeros(errors.size),
                metadata={"sigma": baseline_sigma}
            )
        return result

    def _sparse_sigma(self, config: ExperimentConfig, k: int) -> Tuple[float, str]:
        if config.sigma is not None:
            return config.sigma, "fixed sigma"
        budget = config.budget or PrivacyBudget(
            epsilon=config.epsilon if config.epsilon is not None else DEFAULT_EPSILON,
            delta=config.delta if config.delta is not None else DEFAULT_DELTA,
        )
        sigma = privacy_service.calibrate_gaussian(budget.epsilon, budget.delta, k)
        return sigma, f"epsilon={budget.epsilon}, delta={budget.delta}"

    # --- datasets ---

    def run_dataset(self, config: ExperimentConfig) -> ExperimentResult:
        """
        Sketch the aggregate vector once per k, then report the errors of every support
        index without noise (cs) and with Gaussian noise (pcs).
        """
        if config.experiment == ExperimentId.CITIES:
            dataset = dataset_service.load_dataset(config.dataset_path, "cities")
        else:
            dataset = dataset_service.load_dataset(config.dataset_path, "transactions", config.max_basket)
            if not dataset.has_baskets:
                raise DatasetError("basket-level privacy needs a transaction dataset")

        result = ExperimentResult(
            experiment=config.experiment,
            metadata={"dataset": dataset.name, "d": dataset.dimension, "total_count": int(dataset.total_count)}
        )
        discrepancy = dataset_service.check_known_totals(dataset)
        if discrepancy:
            logger.warning(f"⚠️ {discrepancy}")
            result.metadata["totals_discrepancy"] = discrepancy

        x = dataset.vector
        truth = x.values
        for k in config.ks:
            b = config.b or self._even_buckets(config.kb // k, f"kb/k={config.kb}/{k}")
            seq = np.random.SeedSequence(config.seed, spawn_key=(TRIAL_STREAM, k))
            params = SketchParams(d=dataset.dimension, k=k, b=b, seed=trial_seed(seq))
            sigma, details = self._dataset_sigma(config, dataset, params)
            params = params.with_seed(details.pop("seed", params.seed))
            logger.info(f"🔍 k={k} b={b} sigma={sigma:.4g} {details}")

            family = hashing_service.build_hash_family(params)
            cs = sketch_service.sketch_vector(x, family)
            cs_errors = sketch_service.estimate_all(cs, x.indices, config.estimator) - truth
            pcs = privacy_service.privatize(cs.clone(), NoiseSpec.gaussian(sigma), trial_generator(seq))
            pcs_errors = sketch_service.estimate_all(pcs, x.indices, config.estimator) - truth

            thresholds = analysis_service.threshold_grid(cs_errors, pcs_errors)
            result.series[f"cs k={k}"] = analysis_service.report_from_errors(cs_errors, thresholds, {"b": b})
            result.series[f"pcs k={k}"] = analysis_service.report_from_errors(
                pcs_errors, thresholds, {"b": b, "sigma": sigma, **details}
            )
            if config.countmin_baseline:
                result.series[f"countmin k={k}"] = self._countmin_baseline(config, x, params, sigma)
        return result

    def _dataset_sigma(self, config: ExperimentConfig, dataset: Dataset,
                       params: SketchParams) -> Tuple[float, Dict[str, Any]]:
        if config.experiment == ExperimentId.CITIES or config.sigma is not None:
            return config.sigma, {}
        resolution = privacy_service.resolve_basket_sensitivity(dataset, params)
        budget = config.budget
        sigma = privacy_service.gaussian_sigma(budget.epsilon, budget.delta, resolution.sensitivity)
        logger.info(
            f"   Basket sensitivity {resolution.sensitivity:.4g} ({resolution.mode.value}, "
            f"basket size {resolution.basket_size}, {resolution.attempts} attempt(s))"
        )
        return sigma, {"sensitivity_mode": resolution.mode.value, "sensitivity": resolution.sensitivity,
                       "seed": resolution.seed}

    def _countmin_baseline(self, config: ExperimentConfig, x: SparseVector, params: SketchParams,
                           sigma: float):
        """Count-Min with Laplace noise at the epsilon implied by the Gaussian run."""
        epsilon = config.epsilon
        if epsilon is None and sigma > 0:
            delta = config.delta if config.delta is not None else DEFAULT_DELTA
            epsilon = privacy_service.budget_from_sigma(sigma, params.k, delta).epsilon
        scale = privacy_service.calibrate_laplace(epsilon, params.k) if epsilon else 0.0
        family = hashing_service.build_hash_family(params)
        sketch = sketch_service.sketch_vector(x, family, Variant.COUNTMIN)
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence(config.seed, spawn_key=(BASELINE_STREAM, params.k))
        ))
        privacy_service.privatize(sketch, NoiseSpec.laplace(scale), rng)
        errors = sketch_service.estimate_all(sketch, x.indices) - x.values
        return analysis_service.report_from_errors(errors, metadata={"laplace_scale": scale, "epsilon": epsilon})

    @staticmethod
    def _even_buckets(b: int, origin: str) -> int:
        if b % 2:
            logger.warning(f"⚠️ {origin} gives odd b={b}; rounding down to {b - 1}")
            b -= 1
        if b < 2:
            raise ParameterError(f"{origin} leaves fewer than 2 buckets per row")
        return b

    # --- analytic curves ---

    def run_failure_curve(self, config: ExperimentConfig) -> ExperimentResult:
        """Exact failure probability of the median of k symmetric estimators, per beta."""
        result = ExperimentResult(experiment=config.experiment)
        for beta in FAILURE_BETAS:
            result.curves[f"beta={beta}"] = [
                (k, analysis_service.median_failure_probability(beta, k)) for k in FAILURE_KS
            ]
        return result

    def summarize(self, path: str, kind: str, max_basket: Optional[int] = None) -> str:
        dataset = dataset_service.load_dataset(path, kind, max_basket)
        text = dataset.summary_text()
        discrepancy = dataset_service.check_known_totals(dataset)
        if discrepancy:
            text += f"discrepancy: {discrepancy}\n"
        return text


engine = Engine()
