import numpy as np
import pandas as pd
import pytest

from gformula.data.conventions import NATURAL_COURSE_LABEL
from gformula.models.analysis import InterventionConfig
from gformula.models.covariate import CovariateSpec, FittedCovariate
from gformula.models.intervention import (
    Custom,
    GracePeriod,
    GraceTracker,
    NaturalCourse,
    Static,
    Threshold,
)
from gformula.services.conditions import parse_condition
from gformula.services.intervention_engine import (
    InterventionError,
    apply_rule,
    build_intervention,
    check_support,
    grace_period_state_update,
    intervention_list,
    natural_course_spec,
)
from tests import plugins


def test_static_and_natural_course():
    natural = np.array([0.0, 1.0, 1.0])
    assert apply_rule(Static((1.0, 0.0)), natural, None, 1).tolist() == [0.0, 0.0, 0.0]
    assert apply_rule(NaturalCourse(), natural, None, 0).tolist() == [0.0, 1.0, 1.0]
    with pytest.raises(InterventionError, match="no value at k=2"):
        apply_rule(Static((1.0, 0.0)), natural, None, 2)


def test_threshold_clips_and_unbounded_is_identity():
    natural = np.array([-3.0, 0.5, 7.0])
    assert apply_rule(Threshold(0.0, 1.0), natural, None, 0).tolist() == [0.0, 0.5, 1.0]
    assert apply_rule(Threshold(lower=2.0), natural, None, 0).tolist() == [2.0, 2.0, 7.0]
    np.testing.assert_array_equal(apply_rule(Threshold(), natural, None, 0), natural)


def _grace_trace(condition_values, natural_values, grace):
    """Assigned values of one trajectory through k = 0..len-1"""
    rule = GracePeriod(parse_condition("L >= 1"), grace)
    tracker = GraceTracker.empty(1)
    assigned = []
    for k, (condition, natural) in enumerate(zip(condition_values, natural_values)):
        rows = pd.DataFrame({"L": [condition]})
        assigned.append(apply_rule(rule, np.array([natural]), tracker, k, rows=rows, variable="A")[0])
    return assigned


def test_grace_period_natural_initiation_inside_the_window():
    assigned = _grace_trace([0, 1, 0, 0, 0], [0.0, 0.0, 1.0, 0.0, 0.0], grace=2)
    assert assigned == [0.0, 0.0, 1.0, 1.0, 1.0]


def test_grace_period_forced_initiation_at_the_window_end():
    assigned = _grace_trace([1, 0, 0, 0], [0.0, 0.0, 0.0, 0.0], grace=2)
    assert assigned == [0.0, 0.0, 1.0, 1.0]


def test_grace_period_never_treats_before_the_condition():
    assert _grace_trace([0, 0, 0], [1.0, 1.0, 1.0], grace=1) == [0.0, 0.0, 0.0]


def test_grace_state_keeps_the_first_time_the_condition_held():
    tracker = GraceTracker.empty(3)
    grace_period_state_update(tracker, np.array([False, True, False]), 0)
    grace_period_state_update(tracker, np.array([True, True, False]), 1)
    grace_period_state_update(tracker, np.array([False, False, False]), 2)
    assert tracker.met.tolist() == [True, True, False]
    assert tracker.first.tolist() == [1, 0, -1]
    assert not tracker.initiated.any()


def test_custom_rule_updates_rows_in_place():
    rows = pd.DataFrame({"L": [0.0, 2.0], "A": [0.0, 0.0]})
    rule = Custom(plugins.treat_if_low, {"cutoff": 1.0})
    assigned = apply_rule(rule, np.array([0.0, 0.0]), None, 0, rows=rows, history=rows.iloc[:0], variable="A")
    assert assigned.tolist() == [1.0, 0.0]
    assert rows["A"].tolist() == [0.0, 0.0]
    with pytest.raises(InterventionError, match="in place"):
        apply_rule(Custom(plugins.not_in_place), np.array([0.0]), None, 0, rows=rows.iloc[:1], variable="A")


def test_check_support_rejects_out_of_support_values():
    bundle = FittedCovariate(spec=CovariateSpec("A", "binary"), order_index=0)
    check_support(bundle, np.array([0.0, 1.0]), "ok")
    with pytest.raises(InterventionError, match="outside the support of 'A'"):
        check_support(bundle, np.array([0.0, 2.0]), "bad")
    categorical = FittedCovariate(spec=CovariateSpec("C", "categorical"), order_index=0, levels=("a", "b"))
    with pytest.raises(InterventionError):
        check_support(categorical, np.array(["z"], dtype=object), "bad")


def test_build_intervention_expands_constant_static_values():
    config = InterventionConfig.model_validate(
        {"label": "always", "rules": [{"variable": "A", "rule": "static", "values": 1}]}
    )
    spec = build_intervention(config, 3)
    assert spec.rules[0].rule == Static((1.0, 1.0, 1.0))
    assert spec.description == "always"

    wrong = InterventionConfig.model_validate(
        {"label": "short", "rules": [{"variable": "A", "rule": "static", "values": [1, 0]}]}
    )
    with pytest.raises(InterventionError, match="expected 3"):
        build_intervention(wrong, 3)


def test_rule_times_limit_where_a_rule_applies():
    config = InterventionConfig.model_validate(
        {"label": "late", "rules": [{"variable": "A", "rule": "threshold", "lower": 1, "times": [2]}]}
    )
    rule = build_intervention(config, 3).rules[0]
    assert rule.rule == Threshold(1.0, np.inf)
    assert [rule.applies_at(k) for k in range(3)] == [False, False, True]


def test_natural_course_is_always_first():
    never = {"label": "never", "rules": [{"variable": "A", "rule": "static", "values": 0}]}
    configs = [InterventionConfig.model_validate(never)]
    specs = intervention_list(configs, ["A"], 2)
    assert [spec.label for spec in specs] == [NATURAL_COURSE_LABEL, "never"]
    assert specs[0].is_natural_course
    assert natural_course_spec(["A"]).variables == ("A",)
