import logging
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import norm, truncnorm

from gformula.errors import GFormulaError
from gformula.models.covariate import CovariateSpec, FittedCovariate, ObservedRanges
from gformula.services import conditions
from gformula.services.model_fitting import ModelFitError, fit_formula, predict_frame
from gformula.services.plugins import PluginContractError

logger = logging.getLogger(__name__)

_CUSTOM_COVTYPES: Dict[str, Tuple[Callable, Callable]] = {}
_PROBABILITY_SLACK = 1e-12

Branches = List[Tuple[np.ndarray, np.ndarray]]


class CovariateFitError(GFormulaError):
    module = "covariate_engine"


class SimulationError(GFormulaError):
    module = "covariate_engine"


def register_custom_covtype(fit_plugin: Callable, predict_plugin: Callable, name: Optional[str] = None) -> str:
    """Register a (fit, predict) pair; returns the plugin id"""
    plugin_id = name or f"{fit_plugin.__module__}.{fit_plugin.__name__}"
    _CUSTOM_COVTYPES[plugin_id] = (fit_plugin, predict_plugin)
    logger.debug(f"Registered custom covtype '{plugin_id}'")
    return plugin_id


def custom_covtype(plugin_id: str) -> Tuple[Callable, Callable]:
    if plugin_id not in _CUSTOM_COVTYPES:
        raise PluginContractError(f"unknown custom covtype '{plugin_id}'")
    return _CUSTOM_COVTYPES[plugin_id]


def categorical_time_values(k: int, thresholds: Sequence[float]) -> str:
    """Category of time k: number of thresholds strictly below k"""
    return str(int(np.sum(np.asarray(thresholds, dtype=float) < k)))


def categorical_time_levels(thresholds: Sequence[float]) -> Tuple[str, ...]:
    return tuple(sorted(str(i) for i in range(len(thresholds) + 1)))


def missed_counts(table: pd.DataFrame, visit_name: str, id_name: str) -> pd.Series:
    """Consecutive missed visits through k-1 for every row of an observed table"""
    missed = table[visit_name] == 0
    ids = table[id_name]
    resets = (~missed).groupby(ids, sort=False).cumsum()
    run = missed.astype(int).groupby([ids, resets], sort=False).cumsum()
    return run.groupby(ids, sort=False).shift(1).fillna(0).astype(int)


def consecutive_missed(table: pd.DataFrame, visit_name: str, subject_id, k: int, id_name: str, time_name: str) -> int:
    """Consecutive times t = k-1, k-2, ... with visit 0, stopping at the first 1"""
    history = table[(table[id_name] == subject_id) & (table[time_name] < k)].sort_values(time_name)
    count = 0
    for value in history[visit_name].to_numpy()[::-1]:
        if value != 0:
            break
        count += 1
    return count


def _previous_values(table: pd.DataFrame, name: str, id_name: str) -> pd.Series:
    return table.groupby(id_name, sort=False)[name].shift(1)


def _observed_ranges(values: pd.Series) -> ObservedRanges:
    numeric = values.dropna().to_numpy(dtype=float)
    nonzero = numeric[numeric != 0]
    return ObservedRanges(
        min=float(numeric.min()),
        max=float(numeric.max()),
        nonzero_min=float(nonzero.min()) if len(nonzero) else None,
        nonzero_max=float(nonzero.max()) if len(nonzero) else None,
    )


def fitting_rows(
    spec: CovariateSpec,
    table: pd.DataFrame,
    id_name: str,
    time_name: str,
    max_missed: Optional[int] = None,
) -> pd.DataFrame:
    """Records a covariate model is fit on: k > 0 with restriction, visit and absorbing filters"""
    keep = table[time_name] > 0
    if spec.restriction is not None:
        keep &= conditions.evaluate(spec.restriction.condition, table)
    if spec.visit is not None:
        keep &= table[spec.visit.visit_indicator] == 1
    if max_missed is not None:
        keep &= missed_counts(table, spec.name, id_name) < max_missed
    if spec.covtype == "absorbing":
        keep &= _previous_values(table, spec.name, id_name) == 0
    return table[keep]


def fit_covariate(
    spec: CovariateSpec,
    table: pd.DataFrame,
    order_index: int,
    level_map: Mapping[str, Tuple[str, ...]],
    id_name: str,
    time_name: str,
    max_missed: Optional[int] = None,
) -> FittedCovariate:
    """Fit the model(s) of one covariate on an observed table that already carries its histories"""
    bundle = FittedCovariate(spec=spec, order_index=order_index, max_missed=max_missed)
    if spec.covtype == "categorical_time":
        bundle.levels = categorical_time_levels(spec.thresholds)
        return bundle
    if spec.name not in table.columns:
        raise CovariateFitError(f"covariate '{spec.name}' absent from the data")

    if spec.covtype == "categorical":
        bundle.levels = tuple(level_map[spec.name])
    else:
        bundle.ranges = _observed_ranges(table[spec.name])

    if spec.covtype == "custom":
        result = spec.fit_plugin(spec.parameters, spec.name, table, order_index)
        bundle.custom_fit = result
        logger.info(f"Fitted custom covariate {spec.name}")
        return bundle

    rows = fitting_rows(spec, table, id_name, time_name, max_missed)
    if rows.empty:
        raise CovariateFitError(f"covariate '{spec.name}': no records left to fit after restrictions")

    if bundle.ranges is not None and bundle.ranges.min == bundle.ranges.max:
        bundle.constant = bundle.ranges.min
        logger.info(f"Covariate {spec.name} is constant ({bundle.constant:g}); no model fit")
        return bundle

    label = spec.name
    try:
        if spec.covtype in ("binary", "absorbing"):
            bundle.model = fit_formula(spec.formula, rows, level_map, "binomial", spec.link or "logit", label=label)
        elif spec.covtype == "normal":
            bundle.model = fit_formula(spec.formula, rows, level_map, "gaussian", spec.link or "identity", label=label)
        elif spec.covtype == "bounded_normal":
            low, high = bundle.ranges.min, bundle.ranges.max
            bundle.standardization = (low, high)
            scaled = (rows[spec.name].to_numpy(dtype=float) - low) / (high - low)
            bundle.model = fit_formula(
                spec.formula, rows, level_map, "gaussian", spec.link or "identity", label=label, response=scaled
            )
        elif spec.covtype == "zero_inflated_normal":
            values = rows[spec.name].to_numpy(dtype=float)
            bundle.zero_model = fit_formula(
                spec.formula,
                rows,
                level_map,
                "binomial",
                "logit",
                label=f"{label} (zero)",
                response=(values != 0).astype(float),
            )
            positive = rows[values > 0]
            link = spec.link or "identity"
            bundle.model = fit_formula(spec.formula, positive, level_map, "gaussian", link, label=label)
        elif spec.covtype == "truncated_normal":
            bundle.model = fit_formula(
                spec.formula, rows, level_map, "truncated-normal", truncation=spec.truncation, label=label
            )
        elif spec.covtype == "categorical":
            bundle.model = fit_formula(spec.formula, rows, level_map, "multinomial", label=label)
        else:
            raise CovariateFitError(f"unknown covtype '{spec.covtype}' for '{spec.name}'")
    except ModelFitError as e:
        raise CovariateFitError(str(e)) from e
    logger.info(f"Fitted covariate {spec.name} ({spec.covtype}) on {len(rows)} records")
    return bundle


def _checked_probability(bundle: FittedCovariate, values: np.ndarray, what: str) -> np.ndarray:
    if np.any(np.isnan(values)) or np.any(values < -_PROBABILITY_SLACK) or np.any(values > 1 + _PROBABILITY_SLACK):
        diagnostics = bundle.model.diagnostics.to_dict() if bundle.model is not None else {}
        raise SimulationError(f"{what} of '{bundle.name}' outside [0, 1]; diagnostics: {diagnostics}")
    return np.clip(values, 0.0, 1.0)


def _clamp(values: np.ndarray, low: Optional[float], high: Optional[float]) -> np.ndarray:
    if low is None or high is None:
        return values
    return np.clip(values, low, high)


def _draw(bundle: FittedCovariate, rows: pd.DataFrame, uniforms: np.ndarray, previous) -> np.ndarray:
    spec = bundle.spec
    u = uniforms[0]
    if bundle.constant is not None:
        return np.full(len(rows), bundle.constant, dtype=float)
    if spec.covtype in ("binary", "absorbing"):
        p = _checked_probability(bundle, predict_frame(bundle.model, rows), "probability")
        return (u < p).astype(float)
    if spec.covtype == "normal":
        mean = predict_frame(bundle.model, rows)
        values = mean + bundle.model.sigma * norm.ppf(u)
        return _clamp(values, bundle.ranges.min, bundle.ranges.max)
    if spec.covtype == "bounded_normal":
        mean = predict_frame(bundle.model, rows)
        scaled = np.clip(mean + bundle.model.sigma * norm.ppf(u), 0.0, 1.0)
        low, high = bundle.standardization
        return low + scaled * (high - low)
    if spec.covtype == "zero_inflated_normal":
        p = _checked_probability(bundle, predict_frame(bundle.zero_model, rows), "non-zero probability")
        magnitude = predict_frame(bundle.model, rows) + bundle.model.sigma * norm.ppf(uniforms[1])
        magnitude = _clamp(magnitude, bundle.ranges.nonzero_min, bundle.ranges.nonzero_max)
        return np.where(u < p, magnitude, 0.0)
    if spec.covtype == "truncated_normal":
        mean = predict_frame(bundle.model, rows)
        sigma = bundle.model.sigma
        point, direction = spec.truncation
        if direction == "left":
            low, high = (point - mean) / sigma, np.inf
        else:
            low, high = -np.inf, (point - mean) / sigma
        values = truncnorm.ppf(u, low, high, loc=mean, scale=sigma)
        return _clamp(values, bundle.ranges.min, bundle.ranges.max)
    if spec.covtype == "categorical":
        probabilities = predict_frame(bundle.model, rows)
        cumulative = np.cumsum(probabilities, axis=1)
        index = np.minimum((u[:, None] > cumulative).sum(axis=1), len(bundle.levels) - 1)
        return np.asarray(bundle.levels, dtype=object)[index]
    raise SimulationError(f"cannot draw covtype '{spec.covtype}' for '{spec.name}'")


def _custom_values(bundle, rows, rng, k, observed, time_name) -> np.ndarray:
    spec = bundle.spec
    values = spec.predict_plugin(
        obs_data=observed,
        rows=rows,
        fit=bundle.custom_fit,
        time_name=time_name,
        k=k,
        condition=spec.restriction.condition if spec.restriction else None,
        name=spec.name,
        parameters=spec.parameters,
        rng=rng,
    )
    values = np.asarray(values)
    if values.shape != (len(rows),):
        raise PluginContractError(f"custom covariate '{spec.name}' returned {values.size} values for {len(rows)} rows")
    return values


def forced_values(
    bundle: FittedCovariate,
    rows: pd.DataFrame,
    k: int,
    previous: Optional[np.ndarray],
    missed: Optional[np.ndarray],
) -> Tuple[np.ndarray, np.ndarray]:
    """Rows whose value is fixed without a draw, and that value; applied in order, later rules win"""
    n = len(rows)
    spec = bundle.spec
    forced = np.zeros(n, dtype=bool)
    values = np.empty(n, dtype=object if not spec.is_numeric else float)
    if spec.covtype == "categorical_time":
        forced[:] = True
        values[:] = categorical_time_values(k, spec.thresholds)
        return forced, values
    if spec.covtype == "absorbing" and previous is not None:
        hit = previous == 1
        forced |= hit
        values[hit] = 1.0
    if spec.restriction is not None:
        failed = ~conditions.evaluate(spec.restriction.condition, rows)
        if spec.restriction.otherwise == "carry_forward":
            values[failed] = previous[failed]
        else:
            values[failed] = spec.restriction.value
        forced |= failed
    if spec.visit is not None:
        skipped = rows[spec.visit.visit_indicator].to_numpy(dtype=float) == 0
        values[skipped] = previous[skipped]
        forced |= skipped
    if bundle.max_missed is not None and missed is not None:
        due = missed >= bundle.max_missed
        values[due] = 1.0
        forced |= due
    return forced, values


def simulate_covariate(
    bundle: FittedCovariate,
    rows: pd.DataFrame,
    rng: np.random.Generator,
    k: int,
    previous: Optional[np.ndarray] = None,
    missed: Optional[np.ndarray] = None,
    observed: Optional[pd.DataFrame] = None,
    time_name: str = "time",
) -> np.ndarray:
    """Draw the covariate for every row at k (k >= 1)

    Consumes one uniform per row (two for zero-inflated normal) whatever the outcome.
    """
    n = len(rows)
    count = 2 if bundle.spec.covtype == "zero_inflated_normal" else 1
    uniforms = rng.random((count, n))
    if bundle.spec.covtype == "custom":
        child = np.random.default_rng(rng.integers(0, 2**63 - 1))
        values = _custom_values(bundle, rows, child, k, observed, time_name)
    elif bundle.spec.covtype == "categorical_time":
        values = np.empty(n, dtype=object)
    else:
        values = _draw(bundle, rows, uniforms, previous)
    forced, fixed = forced_values(bundle, rows, k, previous, missed)
    if forced.any():
        values = values.astype(fixed.dtype) if values.dtype != fixed.dtype else values.copy()
        values[forced] = fixed[forced]
    return values


def covariate_branches(
    bundle: FittedCovariate,
    rows: pd.DataFrame,
    k: int,
    previous: Optional[np.ndarray] = None,
    missed: Optional[np.ndarray] = None,
) -> Branches:
    """Exact conditional law as (value, probability) branches per row; discrete covtypes only"""
    spec = bundle.spec
    n = len(rows)
    if spec.covtype in ("binary", "absorbing"):
        if bundle.constant is not None:
            branches = [(np.full(n, bundle.constant), np.ones(n))]
        else:
            p = _checked_probability(bundle, predict_frame(bundle.model, rows), "probability")
            branches = [(np.zeros(n), 1.0 - p), (np.ones(n), p)]
    elif spec.covtype == "categorical":
        probabilities = predict_frame(bundle.model, rows)
        branches = [
            (np.full(n, level, dtype=object), probabilities[:, i]) for i, level in enumerate(bundle.levels)
        ]
    elif spec.covtype == "categorical_time":
        return [(np.full(n, categorical_time_values(k, spec.thresholds), dtype=object), np.ones(n))]
    else:
        raise SimulationError(f"covariate '{spec.name}' ({spec.covtype}) has no discrete law")

    forced, fixed = forced_values(bundle, rows, k, previous, missed)
    if forced.any():
        matched = np.zeros(n, dtype=bool)
        for values, _ in branches:
            matched |= forced & (values == fixed)
        branches = [
            (values, np.where(forced, (values == fixed).astype(float), probability)) for values, probability in branches
        ]
        # forced values outside the branch set get a branch of their own
        unmatched = forced & ~matched
        if unmatched.any():
            branches.append((np.where(unmatched, fixed, branches[0][0]), unmatched.astype(float)))
    return branches
