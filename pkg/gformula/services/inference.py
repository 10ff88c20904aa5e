import logging
import math
from typing import Any, Callable, Dict, Optional, Tuple

import numpy as np

from gformula.errors import GFormulaError
from gformula.models.formula import DesignMatrix
from gformula.models.panel import PanelDataset
from gformula.models.result import BootstrapResult
from gformula.models.run import SimulationResult
from gformula.services.gformula_core import PURPOSE_BOOTSTRAP, run_parallel, stream
from gformula.services.model_fitting import fit_binomial
from gformula.services.panel_data import resample_subjects

logger = logging.getLogger(__name__)

CI_LEVEL = 0.95

# Called with (resampled data, replicate index) and returns (estimates shaped (I, T), hazard ratio or None)
ReplicateRun = Callable[[PanelDataset, int], Tuple[np.ndarray, Optional[float]]]


class InferenceError(GFormulaError):
    module = "inference"


def nearest_rank(values: np.ndarray, quantile: float) -> np.ndarray:
    """Order statistic ceil(quantile * B) along the first axis; NaN where any replicate is NaN"""
    values = np.asarray(values, dtype=float)
    count = values.shape[0]
    rank = max(math.ceil(round(quantile * count, 9)), 1)
    ordered = np.sort(values, axis=0)[rank - 1]
    return np.where(np.isnan(values).any(axis=0), np.nan, ordered)


def percentile_interval(values: np.ndarray, level: float = CI_LEVEL) -> Tuple[np.ndarray, np.ndarray]:
    tail = (1.0 - level) / 2.0
    return nearest_rank(values, tail), nearest_rank(values, 1.0 - tail)


def contrasts(estimates: np.ndarray, reference: int) -> Tuple[np.ndarray, np.ndarray]:
    """Ratio and difference against the reference intervention (axis -2); ratio is NaN where the reference is 0"""
    estimates = np.asarray(estimates, dtype=float)
    if not 0 <= reference < estimates.shape[-2]:
        raise InferenceError(f"reference index {reference} outside 0..{estimates.shape[-2] - 1}")
    base = np.take(estimates, [reference], axis=-2)
    difference = estimates - base
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(base == 0, np.nan, estimates / np.where(base == 0, 1.0, base))
    return ratio, difference


def _realize_events(trajectories: SimulationResult, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """One event-time realization per trajectory: (k, event) records in the risk set, competing failures kept"""
    p, q = trajectories.p, trajectories.q
    s, T = p.shape
    competing = rng.random((s, T)) < q
    event = ~competing & (rng.random((s, T)) < p)
    failed = competing | event
    first = np.where(failed.any(axis=1), failed.argmax(axis=1), T)
    first_is_event = np.zeros(s, dtype=bool)
    has_failure = first < T
    first_is_event[has_failure] = event[has_failure, first[has_failure]]

    steps = np.arange(T)
    last = np.where(first_is_event, first, T - 1)
    at_risk = steps[None, :] <= last[:, None]
    outcome = (steps[None, :] == first[:, None]) & first_is_event[:, None]
    return np.broadcast_to(steps, (s, T))[at_risk], outcome[at_risk].astype(float)


def hazard_ratio(
    first: SimulationResult, second: SimulationResult, rng: np.random.Generator
) -> float:
    """exp(group) from a pooled logistic model event ~ group + time factor over realized event times"""
    if first.p is None or second.p is None:
        raise InferenceError("hazard ratios need survival trajectories")
    times_a, events_a = _realize_events(first, rng)
    times_b, events_b = _realize_events(second, rng)
    if events_a.sum() == 0 or events_b.sum() == 0:
        logger.warning("Hazard ratio undefined: no simulated events in one arm")
        return float("nan")

    times = np.concatenate([times_a, times_b])
    events = np.concatenate([events_a, events_b])
    group = np.concatenate([np.zeros(len(times_a)), np.ones(len(times_b))])
    with_events = np.unique(times[events == 1])
    keep = np.isin(times, with_events)
    times, events, group = times[keep], events[keep], group[keep]

    columns = [np.ones(len(times)), group] + [(times == k).astype(float) for k in with_events[1:]]
    names = ["(Intercept)", "group"] + [f"k={k}" for k in with_events[1:]]
    model = fit_binomial(DesignMatrix(names, np.column_stack(columns), events))
    value = float(np.exp(model.coefficients[1]))
    logger.debug(f"Hazard ratio {value:.4f} over {len(events)} person-intervals")
    return value


def _replicate(task) -> Tuple[str, Any]:
    run, data, seed, b = task
    resampled = resample_subjects(data, stream(seed, b, PURPOSE_BOOTSTRAP))
    try:
        return "ok", run(resampled, b + 1)
    except GFormulaError as error:
        return "failed", {"replicate": b, "module": error.module, "message": str(error)}


def bootstrap(
    data: PanelDataset,
    run: ReplicateRun,
    B: int,
    seed: int,
    reference: int = 0,
    workers: int = 1,
) -> BootstrapResult:
    """Repeat the whole fit-simulate-estimate pipeline on B subject-level resamples"""
    if B < 1:
        raise InferenceError(f"number of bootstrap samples must be at least 1, got {B}")
    outcomes = run_parallel(_replicate, [(run, data, seed, b) for b in range(B)], workers)

    estimates, hazard_ratios, failed = [], [], []
    for status, payload in outcomes:
        if status == "ok":
            estimates.append(payload[0])
            hazard_ratios.append(np.nan if payload[1] is None else payload[1])
        else:
            logger.warning(
                f"Bootstrap replicate {payload['replicate']} failed: {payload['module']}: {payload['message']}"
            )
            failed.append(payload)
    if not estimates:
        first_failure = failed[0]
        raise InferenceError(
            f"all {B} bootstrap replicates failed; first: {first_failure['module']}: {first_failure['message']}"
        )

    replicates = np.stack(estimates)
    ratios, differences = contrasts(replicates, reference)
    logger.info(f"Bootstrap finished: {len(estimates)} of {B} replicates usable")
    return BootstrapResult(
        replicates=replicates,
        ratios=ratios,
        differences=differences,
        requested=B,
        failed=failed,
        hazard_ratios=np.array(hazard_ratios),
    )


def bootstrap_intervals(result: BootstrapResult) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
    """Percentile intervals keyed by quantity: estimate, ratio, difference and hazard_ratio"""
    intervals = {
        "estimate": percentile_interval(result.replicates),
        "ratio": percentile_interval(result.ratios),
        "difference": percentile_interval(result.differences),
    }
    if result.hazard_ratios is not None and not np.isnan(result.hazard_ratios).all():
        finite = result.hazard_ratios[~np.isnan(result.hazard_ratios)]
        intervals["hazard_ratio"] = percentile_interval(finite)
    return intervals

