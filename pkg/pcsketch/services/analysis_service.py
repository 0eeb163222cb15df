import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import stats

# Local imports
from ..exceptions import ParameterError
from ..models import (
    DeltaForm,
    ErrorReport,
    ErrorScale,
    ErrorSummary,
    FailureRateConfig,
    SketchParams,
    SparseVector,
)
from .hashing_service import hashing_service
from .privacy_service import privacy_service
from .sketch_service import sketch_service

logger = logging.getLogger(__name__)

QUANTILES = {"median": 0.5, "q90": 0.9, "q95": 0.95, "q99": 0.99}
DEFAULT_GRID_POINTS = 201
ROW_SAMPLE_CHUNK = 2_000


def trial_seed(seq: np.random.SeedSequence) -> int:
    """64-bit hash seed for one Monte Carlo trial."""
    return int(seq.generate_state(1, np.uint64)[0])


def trial_generator(seq: np.random.SeedSequence) -> np.random.Generator:
    """Noise generator for one trial, on a stream distinct from its hash seed."""
    return np.random.Generator(np.random.PCG64(seq.spawn(1)[0]))


def map_trials(fn: Callable, tasks: Sequence[Any], workers: int = 1) -> List[Any]:
    """Apply fn to every task, in task order, optionally across worker processes."""
    if workers <= 1 or len(tasks) <= 1:
        return [fn(task) for task in tasks]
    chunksize = max(1, len(tasks) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(fn, tasks, chunksize=chunksize))


def _failure_trial(config: FailureRateConfig, threshold: float, seq: np.random.SeedSequence) -> int:
    params = SketchParams(d=config.x.dimension, k=config.k, b=config.b, seed=trial_seed(seq))
    family = hashing_service.build_hash_family(params)
    sketch = sketch_service.sketch_vector(config.x, family)
    privacy_service.privatize(sketch, config.noise, trial_generator(seq))
    estimates = sketch_service.estimate_all(sketch, config.indices)
    truth = np.array([config.x.get(i) for i in config.indices])
    return int(np.count_nonzero(np.abs(estimates - truth) > threshold))


class AnalysisService:
    """Tail norms, error scales, error reports and Monte Carlo verification helpers."""

    def tail_norm(self, x: SparseVector, m: int) -> float:
        """
        L2 norm of x after zeroing its m largest-magnitude entries. Among equal
        magnitudes the larger index is zeroed first.
        """
        if m < 0:
            raise ParameterError(f"m must be nonnegative, got {m}")
        if m >= x.nnz:
            return 0.0
        order = np.lexsort((-x.indices, -np.abs(x.values)))
        return float(np.linalg.norm(x.values[order[m:]]))

    def delta_scale(self, x: SparseVector, b: int, form: DeltaForm = DeltaForm.TAIL_HALF_B) -> float:
        if b < 2 or b % 2:
            raise ParameterError(f"b must be a positive even integer, got {b}")
        m = b if DeltaForm(form) == DeltaForm.TAIL_B else b // 2
        return self.tail_norm(x, m) / math.sqrt(b)

    def error_report(self, estimates: Sequence[float], truth: Sequence[float],
                     thresholds: Optional[Sequence[float]] = None,
                     metadata: Optional[Dict[str, Any]] = None) -> ErrorReport:
        estimates = np.asarray(estimates, dtype=np.float64).reshape(-1)
        truth = np.asarray(truth, dtype=np.float64).reshape(-1)
        if estimates.size != truth.size:
            raise ParameterError(f"{estimates.size} estimates for {truth.size} true values")
        if estimates.size == 0:
            raise ParameterError("cannot report on an empty batch")
        return self.report_from_errors(np.abs(estimates - truth), thresholds, metadata)

    def report_from_errors(self, errors: np.ndarray, thresholds: Optional[Sequence[float]] = None,
                           metadata: Optional[Dict[str, Any]] = None) -> ErrorReport:
        errors = np.abs(np.asarray(errors, dtype=np.float64).reshape(-1))
        if errors.size == 0:
            raise ParameterError("cannot report on an empty batch")
        if thresholds is None:
            thresholds = self.threshold_grid(errors)
        thresholds = np.unique(np.asarray(thresholds, dtype=np.float64))

        ranked = np.sort(errors)
        cum_probs = np.searchsorted(ranked, thresholds, side="right") / ranked.size
        summary = ErrorSummary(
            max=float(ranked[-1]),
            **{name: float(np.quantile(ranked, q, method="inverted_cdf")) for name, q in QUANTILES.items()}
        )
        return ErrorReport(
            errors=errors, thresholds=thresholds, cum_probs=cum_probs,
            summary=summary, metadata=dict(metadata or {})
        )

    @staticmethod
    def threshold_grid(*error_sets: np.ndarray, points: int = DEFAULT_GRID_POINTS) -> np.ndarray:
        top = max((float(np.max(np.abs(e))) for e in error_sets if np.size(e)), default=0.0)
        if top == 0.0:
            return np.zeros(1)
        return np.linspace(0.0, top, points)

    def empirical_failure_rate(self, config: FailureRateConfig, trials: int, seed: int = 0,
                               workers: int = 1) -> float:
        """
        Fraction of (trial, index) pairs with |estimate - truth| > alpha * scale; every
        trial draws a fresh hash family and fresh noise.
        """
        if trials < 1:
            raise ParameterError(f"trials must be at least 1, got {trials}")
        if not config.indices:
            raise ParameterError("failure rate needs at least one query index")
        threshold = config.alpha * self.error_scale(config)
        seqs = np.random.SeedSequence(seed).spawn(trials)
        failures = map_trials(partial(_failure_trial, config, threshold), seqs, workers)
        return sum(failures) / (trials * len(config.indices))

    def error_scale(self, config: FailureRateConfig) -> float:
        delta = self.delta_scale(config.x, config.b, config.delta_form)
        sigma = config.noise.sigma
        if config.scale == ErrorScale.DELTA:
            return delta
        if config.scale == ErrorScale.SIGMA:
            return sigma
        return max(delta, sigma)

    def symmetric_median_bound(self, p: float, k: int) -> float:
        """Ceiling 2 exp(-p^2 k / 2) on the failure probability of the median trick."""
        if not 0 < p <= 1:
            raise ParameterError(f"p must lie in (0, 1], got {p}")
        if k < 1:
            raise ParameterError(f"k must be at least 1, got {k}")
        return 2 * math.exp(-p * p * k / 2)

    def median_failure_probability(self, beta: float, k: int) -> float:
        """
        Exact probability that the median of k i.i.d. symmetric estimators leaves the
        error range when each one lands inside it with probability beta.
        """
        if not 0 <= beta <= 1:
            raise ParameterError(f"beta must lie in [0, 1], got {beta}")
        if k < 1 or k % 2 == 0:
            raise ParameterError(f"k must be a positive odd integer, got {k}")
        one_side = stats.binom.sf((k - 1) // 2, k, (1 - beta) / 2)
        return float(min(1.0, 2 * one_side))

    def row_errors(self, x: SparseVector, b: int, index: int, samples: int, seed: int = 0,
                   sigma: float = 0.0) -> np.ndarray:
        """
        Samples of one row's estimation error for x_index under a fresh fully random row
        hash: every other coordinate collides with probability 1/b and enters with a random
        sign. With sigma > 0 a Gaussian cell noise term is added.
        """
        if not 0 <= index < x.dimension:
            raise ParameterError(f"index {index} outside [0, {x.dimension})")
        others = x.values[x.indices != index]
        rng = np.random.default_rng(seed)
        errors = np.empty(samples)
        for start in range(0, samples, ROW_SAMPLE_CHUNK):
            n = min(ROW_SAMPLE_CHUNK, samples - start)
            collide = rng.random((n, others.size)) < 1.0 / b
            signs = rng.integers(0, 2, size=(n, others.size)) * 2 - 1
            errors[start:start + n] = (collide * signs) @ others
        if sigma > 0:
            errors += rng.normal(0.0, sigma, size=samples)
        return errors

    def property_c_constant(self, errors: np.ndarray, scale: float,
                            alphas: Iterable[float] = np.linspace(0.1, 1.0, 10)) -> float:
        """Largest c with Pr[|error| <= alpha * scale] >= c * alpha over the alpha grid."""
        if not scale > 0:
            raise ParameterError(f"scale must be positive, got {scale}")
        magnitudes = np.abs(np.asarray(errors))
        return float(min(np.mean(magnitudes <= a * scale) / a for a in alphas))

    # --- CSV artifacts ---

    def report_to_csv(self, report: ErrorReport) -> str:
        buffer = io.StringIO()
        for line in self._summary_lines(report):
            buffer.write(f"# {line}\n")
        frame = pd.DataFrame(report.cdf, columns=["threshold", "cum_prob"])
        frame.to_csv(buffer, index=False, lineterminator="\n")
        return buffer.getvalue()

    def write_cdf_csv(self, path: Union[str, Path], series: Dict[str, ErrorReport],
                      config_echo: Dict[str, Any]):
        """One file, several CDF series; config and per-series summaries as # lines."""
        buffer = io.StringIO()
        for key, value in config_echo.items():
            buffer.write(f"# {key}={value}\n")
        for name, report in series.items():
            buffer.write(f"# series={name} " + " ".join(self._summary_lines(report)) + "\n")
        rows = [(name, threshold, prob) for name, report in series.items() for threshold, prob in report.cdf]
        frame = pd.DataFrame(rows, columns=["series", "threshold", "cum_prob"])
        frame.to_csv(buffer, index=False, lineterminator="\n")
        self._write(path, buffer.getvalue())

    def write_curve_csv(self, path: Union[str, Path], curves: Dict[str, List[Tuple[int, float]]],
                        config_echo: Dict[str, Any]):
        buffer = io.StringIO()
        for key, value in config_echo.items():
            buffer.write(f"# {key}={value}\n")
        rows = [(name, k, prob) for name, points in curves.items() for k, prob in points]
        frame = pd.DataFrame(rows, columns=["series", "k", "failure_probability"])
        frame.to_csv(buffer, index=False, lineterminator="\n")
        self._write(path, buffer.getvalue())

    def read_cdf_csv(self, path: Union[str, Path]) -> pd.DataFrame:
        return pd.read_csv(path, comment="#", float_precision="round_trip")

    @staticmethod
    def _summary_lines(report: ErrorReport) -> List[str]:
        s = report.summary
        lines = [
            f"median_abs_err={s.median!r}",
            f"q90_abs_err={s.q90!r}",
            f"q95_abs_err={s.q95!r}",
            f"q99_abs_err={s.q99!r}",
            f"max_abs_err={s.max!r}",
            f"trials={report.trials}",
        ]
        lines.extend(f"{key}={value}" for key, value in report.metadata.items())
        return lines

    @staticmethod
    def _write(path: Union[str, Path], text: str):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
        logger.info(f"Wrote {path}")


# Global analysis_service instance
analysis_service = AnalysisService()
