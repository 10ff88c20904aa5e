import logging
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd

from gformula.data.conventions import NATURAL_COURSE_LABEL
from gformula.errors import GFormulaError
from gformula.models.analysis import InterventionConfig
from gformula.models.covariate import FittedCovariate
from gformula.models.intervention import (
    Custom,
    GracePeriod,
    GraceTracker,
    InterventionRule,
    InterventionSpec,
    NaturalCourse,
    Rule,
    Static,
    Threshold,
)
from gformula.services import conditions
from gformula.services.panel_data import level_key
from gformula.services.plugins import load_plugin

logger = logging.getLogger(__name__)


class InterventionError(GFormulaError):
    module = "intervention_engine"


def natural_course_spec(treatments: Sequence[str] = ()) -> InterventionSpec:
    """Assigns every treatment its own simulated value; always intervention 0"""
    rules = tuple(InterventionRule(variable=name, rule=NaturalCourse()) for name in treatments)
    return InterventionSpec(label=NATURAL_COURSE_LABEL, rules=rules, description=NATURAL_COURSE_LABEL)


def grace_period_state_update(tracker: GraceTracker, condition: np.ndarray, k: int) -> GraceTracker:
    newly = condition & ~tracker.met
    tracker.first[newly] = k
    tracker.met |= condition
    return tracker


def _grace_assign(rule: GracePeriod, natural: np.ndarray, tracker: GraceTracker, k: int) -> np.ndarray:
    assigned = np.zeros(len(natural), dtype=float)
    window = tracker.met & (k < tracker.first + rule.grace)
    assigned[window] = natural[window]
    forced = tracker.initiated | (tracker.met & (k >= tracker.first + rule.grace))
    assigned[forced] = rule.treat_value
    tracker.initiated |= assigned == rule.treat_value
    return assigned


def check_support(bundle: Optional[FittedCovariate], values: np.ndarray, label: str) -> None:
    if bundle is None:
        return
    covtype = bundle.spec.covtype
    if covtype in ("binary", "absorbing"):
        bad = ~np.isin(values.astype(float), (0.0, 1.0))
    elif covtype in ("categorical", "categorical_time"):
        bad = ~np.isin(np.array([level_key(value) for value in values], dtype=object), bundle.levels)
    else:
        bad = ~np.isfinite(values.astype(float))
    if bad.any():
        raise InterventionError(
            f"intervention '{label}' assigned {values[bad][0]!r} outside the support of '{bundle.name}'"
        )


def apply_rule(
    rule: Rule,
    natural: np.ndarray,
    tracker: Optional[GraceTracker],
    k: int,
    rows: Optional[pd.DataFrame] = None,
    history: Optional[pd.DataFrame] = None,
    variable: str = "",
    time_name: str = "time",
) -> np.ndarray:
    """Assigned treatment values for the rows at k given their natural values"""
    natural = np.asarray(natural)
    if isinstance(rule, NaturalCourse):
        return natural.copy()
    if isinstance(rule, Static):
        if k >= len(rule.values):
            raise InterventionError(f"static rule for '{variable}' has no value at k={k}")
        return np.full(len(natural), rule.values[k], dtype=natural.dtype if natural.dtype == object else float)
    if isinstance(rule, Threshold):
        return np.clip(natural.astype(float), rule.lower, rule.upper)
    if isinstance(rule, GracePeriod):
        grace_period_state_update(tracker, conditions.evaluate(rule.condition, rows), k)
        return _grace_assign(rule, natural.astype(float), tracker, k)
    if isinstance(rule, Custom):
        working = rows.copy()
        working[variable] = natural
        result = rule.plugin(
            rows=working,
            history=history,
            variable=variable,
            parameters=rule.parameters,
            time_name=time_name,
            k=k,
        )
        if result is not None:
            raise InterventionError(f"custom intervention for '{variable}' must update rows in place")
        return working[variable].to_numpy()
    raise InterventionError(f"unknown rule {rule!r}")


def _build_rule(config, time_points: int) -> Rule:
    if config.rule == "natural_course":
        return NaturalCourse()
    if config.rule == "static":
        values = config.values if isinstance(config.values, list) else [config.values] * time_points
        if len(values) != time_points:
            raise InterventionError(
                f"static rule for '{config.variable}' has {len(values)} values, expected {time_points}"
            )
        return Static(tuple(values))
    if config.rule == "threshold":
        lower = -np.inf if config.lower is None else config.lower
        upper = np.inf if config.upper is None else config.upper
        return Threshold(lower, upper)
    if config.rule == "grace_period":
        return GracePeriod(conditions.parse_condition(config.condition), config.grace, config.treat_value)
    plugin = load_plugin(config.plugin)
    return Custom(plugin=plugin, parameters=dict(config.parameters))


def build_intervention(config: InterventionConfig, time_points: int) -> InterventionSpec:
    rules = []
    for rule_config in config.rules:
        times = frozenset(rule_config.times) if rule_config.times is not None else None
        rules.append(InterventionRule(rule_config.variable, _build_rule(rule_config, time_points), times))
    return InterventionSpec(label=config.label, rules=tuple(rules), description=config.description or config.label)


def intervention_list(configs: Iterable[InterventionConfig], treatments: Sequence[str], time_points: int):
    """Natural course first, then the configured strategies in order"""
    specs = [natural_course_spec(treatments)]
    for config in configs:
        specs.append(build_intervention(config, time_points))
    logger.info(f"Prepared {len(specs)} interventions (natural course included)")
    return specs
