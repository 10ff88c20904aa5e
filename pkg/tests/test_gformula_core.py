from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
from scipy.special import expit

from gformula.config import settings
from gformula.data.conventions import NATURAL_COURSE_LABEL, P_HAT, Q_HAT, SIM_ID
from gformula.models.covariate import CovariateSpec, HistorySpec, OutcomeRestriction, VisitLink
from gformula.models.intervention import Custom, GracePeriod, InterventionRule, InterventionSpec, Static, Threshold
from gformula.models.panel import PanelSchema
from gformula.models.run import RunConfig
from gformula.services.conditions import parse_condition
from gformula.services.formula_dsl import parse_formula
from gformula.services.covariate_engine import CovariateFitError
from gformula.services.gformula_core import (
    EnumerationError,
    RiskHorizonError,
    SimulationError,
    enumerate_gformula,
    estimates,
    fit_all,
    mean_estimate,
    risk_curve,
    risk_estimate,
    simulate,
    simulate_interventions,
    stream,
)
from gformula.services.intervention_engine import natural_course_spec
from gformula.services.np_estimators import aalen_johansen_risk, product_limit_risk
from gformula.services.panel_data import panel_from_frame
from tests import plugins
from tests.conftest import cohort_schema, simulate_cohort

NATURAL = natural_course_spec(["A"])
ALWAYS = InterventionSpec("always", (InterventionRule("A", Static((1.0, 1.0, 1.0))),), "always treat")
NEVER = InterventionSpec("never", (InterventionRule("A", Static((0.0, 0.0, 0.0))),), "never treat")


def trajectory_risks(result):
    """Per-trajectory cumulative risk at the last horizon"""
    survive = (1.0 - result.p) * (1.0 - result.q)
    before = np.hstack([np.ones((result.p.shape[0], 1)), np.cumprod(survive, axis=1)[:, :-1]])
    return np.sum(result.p * (1.0 - result.q) * before, axis=1)


@pytest.fixture
def suite(cohort, cohort_specs, cohort_ymodel, cohort_histories):
    return fit_all(cohort, cohort_specs, cohort_ymodel, RunConfig(), histories=cohort_histories)


def test_risk_curve_accumulates_hazards():
    p = np.full((4, 2), 0.5)
    assert risk_curve(p, np.zeros((4, 2))) == pytest.approx([0.5, 0.75])
    q = np.full((4, 2), 0.2)
    assert risk_curve(p, q) == pytest.approx([0.4, 0.4 + 0.4 * 0.4])


def test_risk_estimate_checks_the_horizon(suite):
    result = simulate(suite, NATURAL, RunConfig(nsimul=200))
    assert risk_estimate(result, 2) == pytest.approx(estimates(result)[2])
    with pytest.raises(RiskHorizonError):
        risk_estimate(result, 3)
    with pytest.raises(RiskHorizonError):
        mean_estimate(result)


def test_streams_depend_only_on_their_key():
    assert stream(5, 0, 1, 2).random() == stream(5, 0, 1, 2).random()
    assert stream(5, 0, 1, 2).random() != stream(5, 0, 1, 3).random()


def test_time_points_beyond_follow_up(cohort, cohort_specs, cohort_ymodel):
    with pytest.raises(SimulationError, match="exceeds the follow-up"):
        fit_all(cohort, cohort_specs, cohort_ymodel, RunConfig(time_points=4))


def test_models_may_not_look_ahead_in_the_drawing_order(cohort, cohort_ymodel):
    specs = [
        CovariateSpec("L", "binary", parse_formula("L ~ A + W")),
        CovariateSpec("A", "binary", parse_formula("A ~ L + lag1_A")),
    ]
    with pytest.raises(CovariateFitError, match="'L' references 'A' at the same time"):
        fit_all(cohort, specs, cohort_ymodel, RunConfig())


def test_referenced_lags_are_added_automatically(cohort, cohort_specs, cohort_ymodel):
    suite = fit_all(cohort, cohort_specs, cohort_ymodel, RunConfig())
    assert {"lag1_A"} <= set(suite.observed.columns)
    assert suite.models["L"].column_names == ["(Intercept)", "lag1_A", "W"]


def test_closed_form_with_constant_hazards(competing_cohort):
    run = RunConfig(nsimul=50)
    suite = fit_all(
        competing_cohort, [], parse_formula("Y ~ 1"), run, compevent_model=parse_formula("D ~ 1")
    )
    p = float(expit(suite.outcome_model.coefficients[0]))
    q = float(expit(suite.compevent_model.coefficients[0]))
    expected = np.cumsum([p * (1 - p) ** k * (1 - q) ** (k + 1) for k in range(3)])
    np.testing.assert_allclose(enumerate_gformula(suite, NATURAL, run), expected, rtol=0, atol=1e-12)
    np.testing.assert_allclose(estimates(simulate(suite, NATURAL, run)), expected, rtol=0, atol=1e-12)


def test_enumeration_agrees_with_monte_carlo(suite):
    run = RunConfig(nsimul=40000, chunk_size=20000)
    for intervention in (NATURAL, ALWAYS):
        exact = enumerate_gformula(suite, intervention, run)
        result = simulate(suite, intervention, run)
        risks = trajectory_risks(result)
        standard_error = risks.std(ddof=1) / np.sqrt(len(risks))
        assert abs(risks.mean() - exact[-1]) < 3 * standard_error
        assert np.all(np.diff(exact) >= 0)


def test_enumeration_keeps_one_branch_for_statically_set_treatment(suite, monkeypatch):
    run = RunConfig()
    unlimited = enumerate_gformula(suite, ALWAYS, run)
    monkeypatch.setattr(settings, "max_enumeration_paths", 5000)
    np.testing.assert_allclose(enumerate_gformula(suite, ALWAYS, run), unlimited, rtol=0, atol=1e-12)
    with pytest.raises(EnumerationError, match="exceed the limit of 5000"):
        enumerate_gformula(suite, NATURAL, run)


def test_parametric_natural_course_tracks_the_product_limit(cohort_specs, cohort_ymodel, cohort_histories):
    data = panel_from_frame(simulate_cohort(n=3000, seed=17), cohort_schema())
    suite = fit_all(data, cohort_specs, cohort_ymodel, RunConfig(), histories=cohort_histories)
    result = simulate(suite, NATURAL, RunConfig(nsimul=30000, chunk_size=30000))
    assert estimates(result)[-1] == pytest.approx(product_limit_risk(data, 2), abs=0.025)


def test_unbounded_threshold_equals_natural_course(suite):
    run = RunConfig(nsimul=500, chunk_size=128)
    unbounded = InterventionSpec("threshold", (InterventionRule("A", Threshold()),))
    natural = simulate(suite, NATURAL, run)
    thresholded = simulate(suite, unbounded, run)
    np.testing.assert_array_equal(natural.p, thresholded.p)
    np.testing.assert_array_equal(estimates(natural), estimates(thresholded))
    assert natural.covariate_means.keys() == thresholded.covariate_means.keys()
    for name, values in natural.covariate_means.items():
        np.testing.assert_array_equal(values, thresholded.covariate_means[name])


def test_zeroed_treatment_coefficients_give_equal_risks(suite):
    for model in suite.models.values():
        for position, name in enumerate(model.column_names):
            if name in ("A", "lag1_A"):
                model.coefficients[position] = 0.0
    run = RunConfig(nsimul=2000, seed=21)
    always, never = (estimates(simulate(suite, spec, run)) for spec in (ALWAYS, NEVER))
    assert len(always) == suite.time_points
    np.testing.assert_allclose(always, never, rtol=0, atol=1e-12)


def test_results_do_not_depend_on_worker_count(suite):
    run = RunConfig(nsimul=600, chunk_size=256, keep_sim_data=True)
    serial = simulate_interventions(suite, [NATURAL, ALWAYS, NEVER], run, workers=1)
    parallel = simulate_interventions(suite, [NATURAL, ALWAYS, NEVER], run, workers=3)
    for first, second in zip(serial, parallel):
        np.testing.assert_array_equal(first.p, second.p)
        pd.testing.assert_frame_equal(first.table, second.table)


def test_static_interventions_order_the_risks(suite):
    run = RunConfig(nsimul=5000)
    always, never = (estimates(simulate(suite, spec, run))[-1] for spec in (ALWAYS, NEVER))
    assert always < never


def test_simulated_table_columns(suite):
    result = simulate(suite, ALWAYS, RunConfig(nsimul=100, keep_sim_data=True))
    table = result.table
    for column in (SIM_ID, "time", "L", "A", "natural_A", "lag1_A", "lag1_L", P_HAT, Q_HAT):
        assert column in table.columns
    assert len(table) == 300
    assert table[SIM_ID].tolist()[:3] == [1, 1, 1]
    assert np.all(table["A"] == 1.0)
    assert set(table["natural_A"]) <= {0.0, 1.0}
    assert np.all(table[Q_HAT] == 0.0)


def test_grace_period_never_treats_before_the_condition(suite):
    rule = GracePeriod(parse_condition("L >= 1"), grace=1)
    spec = InterventionSpec("grace", (InterventionRule("A", rule),))
    table = simulate(suite, spec, RunConfig(nsimul=2000, keep_sim_data=True)).table
    met = table.groupby(SIM_ID)["L"].cummax()
    assert np.all(table.loc[met == 0, "A"] == 0.0)
    assert set(table["A"]) <= {0.0, 1.0}


def test_custom_intervention_plugin(suite):
    spec = InterventionSpec("low", (InterventionRule("A", Custom(plugins.treat_if_low, {"cutoff": 1.0})),))
    table = simulate(suite, spec, RunConfig(nsimul=500, keep_sim_data=True)).table
    assert np.all(table.loc[table["L"] < 1.0, "A"] == 1.0)
    np.testing.assert_array_equal(
        table.loc[table["L"] >= 1.0, "A"].to_numpy(), table.loc[table["L"] >= 1.0, "natural_A"].to_numpy()
    )


def test_rule_times_limit_the_intervention(suite):
    spec = InterventionSpec("late", (InterventionRule("A", Static((1.0, 1.0, 1.0)), frozenset({2})),))
    table = simulate(suite, spec, RunConfig(nsimul=300, keep_sim_data=True)).table
    early = table["time"] < 2
    np.testing.assert_array_equal(table.loc[early, "A"].to_numpy(), table.loc[early, "natural_A"].to_numpy())
    assert np.all(table.loc[~early, "A"] == 1.0)


def test_outcome_restrictions_replace_the_hazard(cohort, cohort_specs):
    restriction = OutcomeRestriction(parse_condition("L == 0"), 0.0)
    suite = fit_all(cohort, cohort_specs, parse_formula("Y ~ A + W"), RunConfig(), yrestrictions=(restriction,))
    assert suite.outcome_model.n_obs == int((cohort.table["Y"].notna() & (cohort.table["L"] == 0)).sum())
    table = simulate(suite, NATURAL, RunConfig(nsimul=400, keep_sim_data=True)).table
    assert np.all(table.loc[table["L"] == 1.0, P_HAT] == 0.0)


def test_competing_events_enter_the_risk(competing_cohort, cohort_specs, cohort_ymodel):
    run = RunConfig(nsimul=20000, chunk_size=20000)
    suite = fit_all(competing_cohort, cohort_specs, cohort_ymodel, run, compevent_model=parse_formula("D ~ L"))
    result = simulate(suite, NATURAL, run)
    assert np.all(result.q > 0)
    assert estimates(result)[-1] == pytest.approx(aalen_johansen_risk(competing_cohort, 2), abs=0.04)

    censored = fit_all(
        competing_cohort,
        cohort_specs,
        cohort_ymodel,
        replace(run, competing_as_censoring=True),
        compevent_model=parse_formula("D ~ L"),
    )
    assert censored.compevent_model is None
    assert np.all(simulate(censored, NATURAL, run).q == 0)


def _eof_data(continuous):
    rng = np.random.default_rng(8)
    records = []
    for i in range(600):
        L = float(rng.random() < 0.5)
        for k in range(2):
            A = float(rng.random() < 0.3 + 0.4 * L)
            final = k == 1
            y = (1.0 + L - 0.5 * A + rng.normal()) if continuous else float(rng.random() < 0.2 + 0.3 * L)
            records.append({"id": i, "time": k, "L": L, "A": A, "Y": y if final else np.nan})
            L = float(rng.random() < 0.3 + 0.4 * A)
    schema = PanelSchema(
        id="id",
        time="time",
        outcome="Y",
        covariates=("L", "A"),
        outcome_kind="continuous" if continuous else "binary",
        survival=False,
    )
    return panel_from_frame(pd.DataFrame(records), schema)


@pytest.mark.parametrize("kind", ["continuous_eof", "binary_eof"])
def test_end_of_follow_up_outcomes(kind):
    data = _eof_data(kind == "continuous_eof")
    specs = [
        CovariateSpec("L", "binary", parse_formula("L ~ lag1_A")),
        CovariateSpec("A", "binary", parse_formula("A ~ L")),
    ]
    run = RunConfig(outcome_kind=kind, nsimul=30000, chunk_size=30000, keep_sim_data=True)
    suite = fit_all(data, specs, parse_formula("Y ~ L + A"), run)
    never = InterventionSpec("never", (InterventionRule("A", Static((0.0, 0.0))),))
    for intervention in (natural_course_spec(["A"]), never):
        result = simulate(suite, intervention, run)
        exact = enumerate_gformula(suite, intervention, run)
        assert exact.shape == (1,)
        standard_error = result.mu.std(ddof=1) / np.sqrt(len(result.mu))
        assert abs(mean_estimate(result) - exact[0]) < 3 * standard_error
    assert result.table.loc[result.table["time"] == 0, "mu_hat"].isna().all()
    with pytest.raises(SimulationError, match="end-of-follow-up"):
        fit_all(data, specs, parse_formula("Y ~ L + A"), replace(run, time_points=1))


def _visit_data():
    rng = np.random.default_rng(4)
    records = []
    for i in range(500):
        x, b = rng.normal(), 0.0
        for k in range(5):
            v = 1.0 if k == 0 else float(rng.random() < 0.5)
            if v:
                x = 0.6 * x + rng.normal()
            b = 1.0 if b == 1.0 or rng.random() < 0.15 else 0.0
            y = float(rng.random() < 0.05)
            records.append({"id": i, "time": k, "V": v, "X": x, "B": b, "Y": y})
            if y:
                break
    schema = PanelSchema(id="id", time="time", outcome="Y", covariates=("V", "X", "B"))
    return panel_from_frame(pd.DataFrame(records), schema)


def test_structural_invariants_of_simulated_trajectories():
    data = _visit_data()
    specs = [
        CovariateSpec("V", "binary", parse_formula("V ~ lag1_X")),
        CovariateSpec("X", "normal", parse_formula("X ~ lag1_X"), visit=VisitLink("V", 2)),
        CovariateSpec("B", "absorbing", parse_formula("B ~ X")),
    ]
    run = RunConfig(nsimul=20000, chunk_size=20000, keep_sim_data=True)
    suite = fit_all(data, specs, parse_formula("Y ~ X + B"), run, histories=[HistorySpec("lagged", ("X",))])
    result = simulate(suite, natural_course_spec(), run)
    table = result.table
    by_path = table.groupby(SIM_ID, sort=False)

    assert np.all(np.diff(estimates(result)) >= 0)
    assert np.all(by_path["B"].diff().fillna(0) >= 0)

    missed = table["V"] == 0
    runs = missed.astype(int).groupby([table[SIM_ID], (~missed).groupby(table[SIM_ID]).cumsum()]).cumsum()
    assert runs.max() <= 2

    previous = by_path["X"].shift(1)
    carried = missed & previous.notna()
    np.testing.assert_array_equal(table.loc[carried, "X"].to_numpy(), previous[carried].to_numpy())


def test_random_forest_custom_covariate_runs_end_to_end(cohort, cohort_ymodel):
    specs = [
        CovariateSpec("L", "binary", parse_formula("L ~ lag1_A + W")),
        CovariateSpec(
            "A",
            "custom",
            fit_plugin=plugins.forest_fit,
            predict_plugin=plugins.forest_predict,
            parameters={"features": ["L", "lag1_A", "W"]},
        ),
    ]
    suite = fit_all(cohort, specs, cohort_ymodel, RunConfig(), histories=[HistorySpec("lagged", ("A",))])
    result = simulate(suite, NATURAL, RunConfig(nsimul=1000))
    risk = estimates(result)
    assert np.all((risk >= 0) & (risk <= 1))
    assert set(np.unique(simulate(suite, NATURAL, RunConfig(nsimul=50, keep_sim_data=True)).table["A"])) <= {0.0, 1.0}


def test_enumeration_refuses_continuous_covariates():
    data = _visit_data()
    specs = [CovariateSpec("X", "normal", parse_formula("X ~ lag1_X"))]
    suite = fit_all(data, specs, parse_formula("Y ~ X"), RunConfig())
    with pytest.raises(EnumerationError, match="cannot be enumerated"):
        enumerate_gformula(suite, natural_course_spec(), RunConfig())


def test_natural_course_label():
    assert NATURAL.label == NATURAL_COURSE_LABEL
