import numpy as np
import pytest

from gformula.errors import GFormulaError
from gformula.models.covariate import CovariateSpec, HistorySpec
from gformula.models.intervention import InterventionRule, InterventionSpec, Static
from gformula.models.run import RunConfig, SimulationResult
from gformula.services.formula_dsl import parse_formula
from gformula.services.gformula_core import estimates, fit_all, simulate
from gformula.services.inference import (
    InferenceError,
    _realize_events,
    bootstrap,
    bootstrap_intervals,
    contrasts,
    hazard_ratio,
    nearest_rank,
    percentile_interval,
)
from gformula.services.panel_data import panel_from_frame
from tests.conftest import cohort_schema, simulate_cohort

NULL_INTERVENTIONS = [
    InterventionSpec("always", (InterventionRule("A", Static((1.0, 1.0, 1.0))),)),
    InterventionSpec("never", (InterventionRule("A", Static((0.0, 0.0, 0.0))),)),
]


def null_pipeline(data, replicate):
    """Fit, simulate always/never and return their risk curves"""
    specs = [
        CovariateSpec("L", "binary", parse_formula("L ~ lag1_A + W")),
        CovariateSpec("A", "binary", parse_formula("A ~ L + lag1_A")),
    ]
    run = RunConfig(nsimul=400, seed=3)
    suite = fit_all(data, specs, parse_formula("Y ~ L + A + W"), run, histories=[HistorySpec("lagged", ("A", "L"))])
    return np.vstack([estimates(simulate(suite, spec, run, replicate)) for spec in NULL_INTERVENTIONS]), None


def mean_outcome_run(data, replicate):
    """Replicate pipeline stand-in: observed event share per time as one 'intervention' pair"""
    share = data.table.groupby("time")["Y"].mean().reindex([0, 1], fill_value=0.0).to_numpy() + 1.0
    return np.vstack([share, share / 2.0]), float(replicate)


def flaky_run(data, replicate):
    if replicate == 3:
        raise GFormulaError("design is singular", module="model_fitting")
    return mean_outcome_run(data, replicate)


def failing_run(data, replicate):
    raise GFormulaError("no records to fit", module="model_fitting")


def test_nearest_rank_order_statistics():
    values = np.arange(1.0, 21.0)
    assert nearest_rank(values, 0.025) == 1.0
    assert nearest_rank(values, 0.975) == 20.0
    lower, upper = percentile_interval(np.arange(1.0, 201.0))
    assert (lower, upper) == (5.0, 195.0)


def test_nearest_rank_propagates_missing_replicates():
    values = np.array([[1.0, 2.0], [np.nan, 3.0], [0.5, 4.0]])
    result = nearest_rank(values, 0.5)
    assert np.isnan(result[0])
    assert result[1] == 3.0


def test_contrasts_against_the_reference():
    estimates = np.array([[0.5048278], [0.7314627], [0.2339747]])
    ratio, difference = contrasts(estimates, 0)
    assert ratio[:, 0] == pytest.approx([1.0, 1.4489351, 0.4634743], abs=1e-7)
    assert difference[:, 0] == pytest.approx([0.0, 0.2266349, -0.2708531], abs=1e-7)


def test_contrasts_handle_replicate_stacks_and_zero_reference():
    stack = np.array([[[0.0, 0.2], [0.1, 0.4]], [[0.1, 0.2], [0.3, 0.1]]])
    ratio, difference = contrasts(stack, 0)
    assert ratio.shape == stack.shape
    assert np.isnan(ratio[0, 1, 0])
    assert ratio[1, 1, 0] == pytest.approx(3.0)
    assert difference[0, 1, 1] == pytest.approx(0.2)
    with pytest.raises(InferenceError):
        contrasts(stack, 2)


def test_competing_failures_stay_in_the_risk_set():
    trajectories = SimulationResult("x", p=np.zeros((2, 3)), q=np.ones((2, 3)))
    times, events = _realize_events(trajectories, np.random.default_rng(0))
    assert times.tolist() == [0, 1, 2, 0, 1, 2]
    assert events.sum() == 0


def test_realized_events_end_follow_up():
    trajectories = SimulationResult("x", p=np.ones((2, 3)), q=np.zeros((2, 3)))
    times, events = _realize_events(trajectories, np.random.default_rng(0))
    assert times.tolist() == [0, 0]
    assert events.tolist() == [1.0, 1.0]


def test_hazard_ratio_recovers_the_odds_ratio_of_constant_hazards():
    size = (20000, 3)
    first = SimulationResult("a", p=np.full(size, 0.1), q=np.zeros(size))
    second = SimulationResult("b", p=np.full(size, 0.2), q=np.zeros(size))
    value = hazard_ratio(first, second, np.random.default_rng(4))
    assert value == pytest.approx((0.2 / 0.8) / (0.1 / 0.9), rel=0.08)


def test_hazard_ratio_without_events_is_missing():
    size = (100, 2)
    quiet = SimulationResult("a", p=np.zeros(size), q=np.zeros(size))
    busy = SimulationResult("b", p=np.full(size, 0.5), q=np.zeros(size))
    assert np.isnan(hazard_ratio(quiet, busy, np.random.default_rng(0)))
    with pytest.raises(InferenceError):
        hazard_ratio(SimulationResult("eof", mu=np.zeros(3)), busy, np.random.default_rng(0))


def test_bootstrap_shapes_and_intervals(survival_records):
    result = bootstrap(survival_records, mean_outcome_run, B=20, seed=9)
    assert result.replicates.shape == (20, 2, 2)
    assert result.effective == 20
    assert result.failed == []
    np.testing.assert_allclose(result.ratios[:, 0], 1.0)
    assert result.hazard_ratios.tolist() == list(map(float, range(1, 21)))
    intervals = bootstrap_intervals(result)
    assert set(intervals) == {"estimate", "ratio", "difference", "hazard_ratio"}
    assert intervals["hazard_ratio"] == (1.0, 20.0)


def test_failed_replicates_are_excluded(survival_records):
    result = bootstrap(survival_records, flaky_run, B=6, seed=9)
    assert result.effective == 5
    assert result.requested == 6
    assert result.failed == [{"replicate": 2, "module": "model_fitting", "message": "design is singular"}]


def test_all_replicates_failing_is_an_error(survival_records):
    with pytest.raises(InferenceError, match="all 3 bootstrap replicates failed"):
        bootstrap(survival_records, failing_run, B=3, seed=9)
    with pytest.raises(InferenceError):
        bootstrap(survival_records, mean_outcome_run, B=0, seed=9)


def test_bootstrap_is_independent_of_worker_count(survival_records):
    serial = bootstrap(survival_records, mean_outcome_run, B=6, seed=21, workers=1)
    parallel = bootstrap(survival_records, mean_outcome_run, B=6, seed=21, workers=3)
    np.testing.assert_array_equal(serial.replicates, parallel.replicates)


def test_risk_difference_interval_covers_zero_without_a_treatment_effect():
    covered = 0
    for seed in range(10):
        frame = simulate_cohort(n=400, seed=100 + seed, effect=0.0, feedback=0.0)
        data = panel_from_frame(frame, cohort_schema())
        result = bootstrap(data, null_pipeline, B=30, seed=seed)
        lower, upper = bootstrap_intervals(result)["difference"]
        covered += int(lower[1, -1] <= 0.0 <= upper[1, -1])
    assert covered >= 8
