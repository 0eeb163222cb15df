import io
import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from pcsketch.exceptions import ParameterError
from pcsketch.models import DeltaForm, ErrorScale, FailureRateConfig, NoiseSpec, SparseVector
from pcsketch.services.analysis_service import analysis_service, map_trials

magnitudes = st.lists(st.integers(min_value=-20, max_value=20), min_size=1, max_size=40)


def brute_force_tail(values, m):
    order = sorted(range(len(values)), key=lambda i: (-abs(values[i]), -i))
    kept = [values[i] for i in order[m:]]
    return math.sqrt(sum(v * v for v in kept))


def test_tail_norm_examples():
    x = SparseVector.from_dense([5.0, 3.0, 1.0, 1.0])

    assert analysis_service.tail_norm(x, 2) == pytest.approx(math.sqrt(2))
    assert analysis_service.tail_norm(x, 0) == pytest.approx(6.0)
    assert analysis_service.tail_norm(x, 4) == 0.0
    assert analysis_service.tail_norm(x, 10) == 0.0


def test_tail_norm_keeps_the_smaller_index_on_ties():
    x = SparseVector(dimension=3, indices=[0, 1, 2], values=[-2.0, 2.0, 1.0])

    # zeroing one entry removes index 1, so 0 and 2 remain
    assert analysis_service.tail_norm(x, 1) == pytest.approx(math.sqrt(5))


@given(values=magnitudes, m=st.integers(min_value=0, max_value=45))
def test_tail_norm_matches_sort_oracle(values, m):
    x = SparseVector.from_dense(np.array(values, dtype=float))
    dense = [float(v) for v in values]

    assert analysis_service.tail_norm(x, m) == pytest.approx(brute_force_tail(dense, m), abs=1e-12)


def test_delta_scale_forms():
    sparse = SparseVector.from_dict(100, {3: 7.0, 8: -2.0})
    ones = SparseVector.from_dense(np.ones(32))

    assert analysis_service.delta_scale(sparse, 4, DeltaForm.TAIL_B) == 0.0
    assert analysis_service.delta_scale(sparse, 4, DeltaForm.TAIL_HALF_B) == 0.0
    assert analysis_service.delta_scale(ones, 16, DeltaForm.TAIL_B) == pytest.approx(1.0)
    assert analysis_service.delta_scale(ones, 16, DeltaForm.TAIL_HALF_B) == pytest.approx(math.sqrt(24 / 16))
    with pytest.raises(ParameterError):
        analysis_service.delta_scale(ones, 5)


def test_exact_estimates_report_zero_error():
    report = analysis_service.error_report([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])

    assert report.cdf == [(0.0, 1.0)]
    assert report.summary.max == 0.0


def test_single_error_cdf():
    report = analysis_service.error_report([2.0], [0.0], thresholds=[1.0, 3.0])

    assert report.cdf == [(1.0, 0.0), (3.0, 1.0)]


def test_error_report_rejects_bad_batches():
    with pytest.raises(ParameterError):
        analysis_service.error_report([1.0, 2.0], [1.0])
    with pytest.raises(ParameterError):
        analysis_service.error_report([], [])


def test_quantiles_are_order_statistics(rng):
    errors = rng.standard_cauchy(size=999)

    report = analysis_service.report_from_errors(errors)

    ranked = np.sort(np.abs(errors))
    assert report.summary.median == ranked[499]
    assert report.summary.q90 == ranked[math.ceil(0.9 * 999) - 1]
    assert report.summary.q99 == ranked[math.ceil(0.99 * 999) - 1]
    assert report.summary.max == ranked[-1]
    assert np.all(np.diff(report.cum_probs) >= 0)
    assert report.cum_probs[-1] == 1.0


def test_symmetric_median_bound_values():
    assert analysis_service.symmetric_median_bound(0.5, 8) == pytest.approx(2 * math.exp(-1))
    assert analysis_service.symmetric_median_bound(0.1, 10_000) == pytest.approx(2 * math.exp(-50))
    with pytest.raises(ParameterError):
        analysis_service.symmetric_median_bound(0.0, 5)
    with pytest.raises(ParameterError):
        analysis_service.symmetric_median_bound(0.5, 0)


def test_symmetric_median_bound_is_monotone():
    grid = [[analysis_service.symmetric_median_bound(p, k) for k in range(1, 30)] for p in np.linspace(0.1, 1.0, 10)]

    assert np.all(np.diff(grid, axis=0) < 0)
    assert np.all(np.diff(grid, axis=1) < 0)


def test_median_failure_probability():
    assert analysis_service.median_failure_probability(0.75, 1) == pytest.approx(0.25)
    assert analysis_service.median_failure_probability(0.75, 29) < 1e-6
    with pytest.raises(ParameterError):
        analysis_service.median_failure_probability(0.75, 4)

    curve = [analysis_service.median_failure_probability(0.65, k) for k in range(1, 50, 2)]
    assert np.all(np.diff(curve) < 0)


def test_zero_vector_never_fails():
    config = FailureRateConfig(x=SparseVector.zeros(50), k=3, b=8, indices=[0, 1, 2], alpha=0.5)

    assert analysis_service.empirical_failure_rate(config, trials=50, seed=1) == 0.0


def test_alpha_zero_with_noise_always_fails():
    config = FailureRateConfig(
        x=SparseVector.one_hot(50, 3, 4.0), k=3, b=8, noise=NoiseSpec.gaussian(1.0),
        indices=[3], alpha=0.0, scale=ErrorScale.SIGMA
    )

    assert analysis_service.empirical_failure_rate(config, trials=50, seed=1) == 1.0


def test_alpha_outside_unit_interval_is_rejected():
    with pytest.raises(ValueError):
        FailureRateConfig(x=SparseVector.zeros(5), k=1, b=2, indices=[0], alpha=1.5)


def test_failure_rate_is_invariant_to_worker_count():
    x = SparseVector.from_dense(1.0 / np.arange(1, 201))
    config = FailureRateConfig(x=x, k=3, b=16, indices=[0, 1], alpha=0.5)

    serial = analysis_service.empirical_failure_rate(config, trials=40, seed=3, workers=1)
    parallel = analysis_service.empirical_failure_rate(config, trials=40, seed=3, workers=2)

    assert serial == parallel


def test_map_trials_preserves_order():
    assert map_trials(abs, [-3, 1, -2, 5], workers=2) == [3, 1, 2, 5]


def test_row_errors_of_an_isolated_item_are_noise_only():
    x = SparseVector.one_hot(100, 7, 9.0)

    assert not analysis_service.row_errors(x, 8, 7, samples=500, seed=0).any()
    noisy = analysis_service.row_errors(x, 8, 7, samples=20_000, seed=0, sigma=2.0)
    assert noisy.std() == pytest.approx(2.0, rel=0.05)


def test_property_c_constant_of_exact_rows_is_one():
    assert analysis_service.property_c_constant(np.zeros(100), 1.0) == pytest.approx(1.0)


@pytest.mark.slow
def test_failure_rate_decays_in_k_below_the_median_bound():
    # GIVEN a dense heavy-tailed vector
    x = SparseVector.from_dense(1.0 / np.arange(1, 1001))
    b, alpha = 32, 0.5
    delta = analysis_service.delta_scale(x, b, DeltaForm.TAIL_HALF_B)
    c = analysis_service.property_c_constant(analysis_service.row_errors(x, b, 0, samples=100_000, seed=1), delta)

    # WHEN
    rates = [
        analysis_service.empirical_failure_rate(
            FailureRateConfig(x=x, k=k, b=b, indices=[0], alpha=alpha), trials=10_000, seed=k
        )
        for k in (3, 9, 27)
    ]

    # THEN
    assert c > 0
    assert rates[0] >= rates[1] >= rates[2]
    assert rates[2] < analysis_service.symmetric_median_bound(min(1.0, c * alpha), 27)


@settings(max_examples=20, deadline=None)
@given(errors=st.lists(st.floats(min_value=-1e3, max_value=1e3, allow_nan=False), min_size=1, max_size=200))
def test_csv_report_parses_back_into_a_cdf(errors, tmp_path_factory):
    # GIVEN
    report = analysis_service.report_from_errors(np.array(errors))
    path = tmp_path_factory.mktemp("cdf") / "report.csv"

    # WHEN
    analysis_service.write_cdf_csv(path, {"only": report}, {"seed": 1})
    frame = analysis_service.read_cdf_csv(path)

    # THEN
    assert list(frame.columns) == ["series", "threshold", "cum_prob"]
    assert np.all(np.diff(frame["cum_prob"]) >= 0)
    assert frame["cum_prob"].iloc[-1] == 1.0
    np.testing.assert_array_equal(frame["threshold"].to_numpy(), report.thresholds)


def test_standalone_report_csv_header():
    report = analysis_service.report_from_errors(np.array([0.5, 1.5]))

    lines = analysis_service.report_to_csv(report).splitlines()

    assert lines[0].startswith("# median_abs_err=")
    assert "threshold,cum_prob" in lines


@pytest.mark.parametrize("noise_ratio", [0.5, 1.0, 4.0])
def test_noisy_rows_keep_a_positive_concentration_constant(noise_ratio):
    # GIVEN a dense vector and cell noise on either side of its error scale
    x = SparseVector.from_dense(1.0 / np.arange(1, 1001))
    b = 32
    delta = analysis_service.delta_scale(x, b, DeltaForm.TAIL_HALF_B)
    sigma = noise_ratio * delta

    # WHEN
    errors = analysis_service.row_errors(x, b, 0, samples=20_000, seed=5, sigma=sigma)
    c = analysis_service.property_c_constant(errors, max(delta, sigma))

    # THEN
    assert 0 < c <= 1 / 0.1
    for alpha in np.linspace(0.1, 1.0, 10):
        assert np.mean(np.abs(errors) <= alpha * max(delta, sigma)) >= c * alpha - 1e-12


def test_csv_rows_keep_full_float_precision(tmp_path):
    # GIVEN
    report = analysis_service.report_from_errors(np.array([1 / 3, 2 / 3, 1.0]), thresholds=[1 / 3, 2 / 3, 1.0])
    curve = {"beta=0.75": [(1, 0.25), (3, 1 / 7)]}

    # WHEN
    frame = pd.read_csv(io.StringIO(analysis_service.report_to_csv(report)), comment="#",
                        float_precision="round_trip")
    analysis_service.write_curve_csv(tmp_path / "curve.csv", curve, {"seed": 0})

    # THEN
    np.testing.assert_array_equal(frame["threshold"].to_numpy(), [1 / 3, 2 / 3, 1.0])
    lines = (tmp_path / "curve.csv").read_text().splitlines()
    assert lines == ["# seed=0", "series,k,failure_probability", "beta=0.75,1,0.25", f"beta=0.75,3,{1 / 7!r}"]
