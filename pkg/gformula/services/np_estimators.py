import logging
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from gformula.models.panel import PanelDataset
from gformula.services.panel_data import RiskSetBoundsError, risk_set, zero_coded_censored

logger = logging.getLogger(__name__)


def _horizons(data: PanelDataset, t: Optional[int]) -> int:
    t = data.max_time if t is None else t
    if t < 0 or t > data.max_time:
        raise RiskSetBoundsError(f"horizon t={t} outside 0..{data.max_time}")
    return t + 1


def product_limit_curve(
    data: PanelDataset, t: Optional[int] = None, include_zero_coded_censored: bool = True
) -> np.ndarray:
    """1 - product-limit survival at every k = 0..t; NaN once a risk set is empty"""
    curve = np.full(_horizons(data, t), np.nan)
    survival = 1.0
    for k in range(len(curve)):
        rows = risk_set(data, k, include_zero_coded_censored)
        if rows.empty:
            logger.warning(f"Empty risk set at k={k}; nonparametric risk missing from there on")
            break
        events = int((rows[data.outcome_name] == 1).sum())
        survival *= 1.0 - events / len(rows)
        curve[k] = 1.0 - survival
    return curve


def product_limit_risk(data: PanelDataset, t: int, include_zero_coded_censored: bool = True) -> float:
    return float(product_limit_curve(data, t, include_zero_coded_censored)[t])


def aalen_johansen_curves(
    data: PanelDataset, t: Optional[int] = None, include_zero_coded_censored: bool = True
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cumulative incidence of the event, of the competing event, and all-cause survival at k = 0..t"""
    size = _horizons(data, t)
    event_cif = np.full(size, np.nan)
    competing_cif = np.full(size, np.nan)
    survival_curve = np.full(size, np.nan)
    table = data.table
    outcome = table[data.outcome_name]
    competing = table[data.compevent_name] == 1 if data.compevent_name else pd.Series(False, index=table.index)
    at_risk = outcome.notna() | competing
    if not include_zero_coded_censored:
        at_risk &= ~zero_coded_censored(data)

    survival = 1.0
    event_total = competing_total = 0.0
    for k in range(size):
        rows = at_risk & (table[data.time_name] == k)
        n = int(rows.sum())
        if n == 0:
            logger.warning(f"Empty risk set at k={k}; cumulative incidence missing from there on")
            break
        d = int((rows & (outcome == 1)).sum())
        c = int((rows & competing).sum())
        event_total += d / n * survival
        competing_total += c / n * survival
        survival *= 1.0 - (d + c) / n
        event_cif[k], competing_cif[k], survival_curve[k] = event_total, competing_total, survival
    return event_cif, competing_cif, survival_curve


def aalen_johansen_risk(data: PanelDataset, t: int, include_zero_coded_censored: bool = True) -> float:
    return float(aalen_johansen_curves(data, t, include_zero_coded_censored)[0][t])


def empirical_eof_mean(data: PanelDataset) -> float:
    """Mean outcome among records at k = K with a non-missing outcome"""
    final = data.table[data.table[data.time_name] == data.max_time][data.outcome_name].dropna()
    if final.empty:
        logger.warning("No completers with an observed outcome; nonparametric mean missing")
        return float("nan")
    return float(final.mean())


def observed_covariate_means(
    data: PanelDataset,
    names: Sequence[str],
    level_map: Mapping[str, Sequence[str]],
    time_points: int,
    survival: bool = True,
    table: Optional[pd.DataFrame] = None,
) -> Dict[str, np.ndarray]:
    """Per-k covariate means over the risk set (categorical levels as proportions)"""
    table = data.table if table is None else table
    means: Dict[str, np.ndarray] = {}
    for k in range(time_points):
        rows = table[table[data.time_name] == k]
        if survival:
            rows = rows[rows[data.outcome_name].notna()]
        for name in names:
            if name in level_map:
                for level in level_map[name]:
                    key = f"{name}={level}"
                    means.setdefault(key, np.full(time_points, np.nan))[k] = (
                        float((rows[name] == level).mean()) if len(rows) else np.nan
                    )
            else:
                means.setdefault(name, np.full(time_points, np.nan))[k] = (
                    float(rows[name].astype(float).mean()) if len(rows) else np.nan
                )
    return means


def nonparametric_curve(
    data: PanelDataset,
    outcome_kind: str,
    time_points: int,
    competing_as_censoring: bool = False,
    include_zero_coded_censored: bool = True,
) -> np.ndarray:
    """Natural-course benchmark matching the parametric estimates' shape"""
    if outcome_kind != "survival":
        return np.array([empirical_eof_mean(data)])
    t = time_points - 1
    if data.compevent_name and not competing_as_censoring:
        return aalen_johansen_curves(data, t, include_zero_coded_censored)[0]
    if data.compevent_name:
        table = data.table.copy()
        table.loc[table[data.compevent_name] == 1, data.outcome_name] = np.nan
        data = data.with_table(table)
    return product_limit_curve(data, t, include_zero_coded_censored)
