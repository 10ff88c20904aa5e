import logging
import re
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from gformula.data.conventions import CUMAVG_PREFIX, LAG_CUMAVG_PREFIX, LAG_PREFIX, RESERVED_HISTORY_PREFIXES
from gformula.errors import GFormulaError
from gformula.models.covariate import HistorySpec
from gformula.models.formula import ModelFormula

logger = logging.getLogger(__name__)

_LAG_NAME = re.compile(rf"^{LAG_PREFIX}(\d+)_(.+)$")
_LAG_CUMAVG_NAME = re.compile(rf"^{LAG_CUMAVG_PREFIX}(\d+)_(.+)$")

_CUSTOM_HISTORIES: Dict[str, Tuple[Callable, str]] = {}


class HistoryError(GFormulaError):
    module = "history_fns"


def lag_name(variable: str, i: int) -> str:
    return f"{LAG_PREFIX}{i}_{variable}"


def cumavg_name(variable: str) -> str:
    return f"{CUMAVG_PREFIX}_{variable}"


def lag_cumavg_name(variable: str, i: int) -> str:
    return f"{LAG_CUMAVG_PREFIX}{i}_{variable}"


def history_columns(spec: HistorySpec) -> List[str]:
    columns = []
    for variable in spec.variables:
        if spec.kind == "lagged":
            columns.extend(lag_name(variable, i) for i in range(1, spec.max_lag + 1))
        elif spec.kind == "cumavg":
            columns.append(cumavg_name(variable))
        elif spec.kind == "lagavg":
            columns.extend(lag_cumavg_name(variable, i) for i in range(1, spec.max_lag + 1))
    return columns


def required_lags(formulas: Iterable[ModelFormula]) -> Dict[Tuple[str, str], int]:
    """Largest lag index per (kind, variable) referenced by any formula"""
    needed: Dict[Tuple[str, str], int] = {}
    for formula in formulas:
        for name in formula.variables:
            for kind, pattern in (("lagged", _LAG_NAME), ("lagavg", _LAG_CUMAVG_NAME)):
                match = pattern.match(name)
                if match:
                    key = (kind, match.group(2))
                    needed[key] = max(needed.get(key, 0), int(match.group(1)))
    return needed


def parse_history_column(column: str) -> Optional[Tuple[str, str]]:
    """(kind, raw variable) behind a built-in history column name"""
    for kind, pattern in (("lagavg", _LAG_CUMAVG_NAME), ("lagged", _LAG_NAME)):
        match = pattern.match(column)
        if match:
            return kind, match.group(2)
    if column.startswith(f"{CUMAVG_PREFIX}_"):
        return "cumavg", column[len(CUMAVG_PREFIX) + 1 :]
    return None


def register_custom_history(plugin: Callable, prefix: Optional[str] = None) -> str:
    """Register an in-place history plugin; returns its id"""
    prefix = prefix or getattr(plugin, "prefix", None) or plugin.__name__
    if any(prefix.startswith(reserved) for reserved in RESERVED_HISTORY_PREFIXES):
        raise HistoryError(f"custom history prefix '{prefix}' collides with a reserved prefix")
    _CUSTOM_HISTORIES[prefix] = (plugin, prefix)
    logger.debug(f"Registered custom history '{prefix}'")
    return prefix


def custom_history(plugin_id: str) -> Callable:
    if plugin_id not in _CUSTOM_HISTORIES:
        raise HistoryError(f"unknown custom history '{plugin_id}'")
    return _CUSTOM_HISTORIES[plugin_id][0]


def _previous(table: pd.DataFrame, column: str, ids: pd.Series, k: int, id_name: str, time_name: str) -> np.ndarray:
    rows = table.loc[table[time_name] == k, [id_name, column]]
    return ids.map(pd.Series(rows[column].to_numpy(), index=rows[id_name].to_numpy())).to_numpy()


def _ensure_column(table: pd.DataFrame, column: str, categorical: bool) -> None:
    if column not in table.columns:
        empty = None if categorical else np.nan
        table[column] = pd.Series(empty, index=table.index, dtype=object if categorical else float)


def apply_history(
    table: pd.DataFrame,
    spec: HistorySpec,
    k: int,
    id_name: str,
    time_name: str,
    level_map: Optional[Mapping[str, Sequence[str]]] = None,
    phase: str = "all",
) -> None:
    """Update history columns of the rows at time k in place

    `phase="lagged"` refreshes only columns that depend on times before k,
    `phase="current"` only those that read the value at k.
    """
    level_map = level_map or {}
    mask = table[time_name] == k
    ids = table.loc[mask, id_name]
    for variable in spec.variables:
        if variable not in table.columns:
            raise HistoryError(f"history variable '{variable}' absent from the table")
        categorical = variable in level_map
        if spec.kind == "custom":
            if phase != "lagged":
                _run_custom(table, spec, [variable], k, id_name, time_name)
            continue
        if categorical and spec.kind != "lagged":
            raise HistoryError(f"{spec.kind} history of categorical '{variable}' is undefined")
        pre_baseline = level_map[variable][0] if categorical else 0.0

        if spec.kind == "lagged" and phase != "current":
            for i in range(1, spec.max_lag + 1):
                column = lag_name(variable, i)
                _ensure_column(table, column, categorical)
                values = np.full(len(ids), pre_baseline, dtype=object if categorical else float)
                if k >= i:
                    values = _previous(table, variable, ids, k - i, id_name, time_name)
                table.loc[mask, column] = values

        if spec.kind in ("cumavg", "lagavg") and phase != "lagged":
            column = cumavg_name(variable)
            _ensure_column(table, column, False)
            current = table.loc[mask, variable].to_numpy(dtype=float)
            if k == 0:
                table.loc[mask, column] = current
            else:
                before = _previous(table, column, ids, k - 1, id_name, time_name).astype(float)
                table.loc[mask, column] = (before * k + current) / (k + 1)

        if spec.kind == "lagavg" and phase != "current":
            for i in range(1, spec.max_lag + 1):
                column = lag_cumavg_name(variable, i)
                _ensure_column(table, column, False)
                values = np.zeros(len(ids))
                if k >= i:
                    values = _previous(table, cumavg_name(variable), ids, k - i, id_name, time_name).astype(float)
                table.loc[mask, column] = values


def _run_custom(table: pd.DataFrame, spec: HistorySpec, variables: List[str], k: int, id_name: str, time_name: str):
    before = set(table.columns)
    result = spec.plugin(table, variables, time_name, k, id_name)
    if result is not None:
        raise HistoryError(f"custom history {getattr(spec.plugin, '__name__', spec.plugin)} must update in place")
    reserved = [
        column
        for column in set(table.columns) - before
        if any(column.startswith(prefix) for prefix in RESERVED_HISTORY_PREFIXES)
    ]
    if reserved:
        raise HistoryError(f"custom history wrote reserved column(s): {', '.join(sorted(reserved))}")


class HistoryEngine:
    """Keeps history columns current while values at k are finalized one variable at a time"""

    def __init__(
        self,
        specs: Sequence[HistorySpec],
        id_name: str,
        time_name: str,
        level_map: Optional[Mapping[str, Sequence[str]]] = None,
    ):
        self.specs = list(specs)
        self.id_name = id_name
        self.time_name = time_name
        self.level_map = dict(level_map or {})

    @property
    def variables(self) -> List[str]:
        names = []
        for spec in self.specs:
            names.extend(name for name in spec.variables if name not in names)
        return names

    @property
    def columns(self) -> List[str]:
        names = []
        for spec in self.specs:
            names.extend(history_columns(spec))
        return names

    def before_step(self, table: pd.DataFrame, k: int) -> None:
        for spec in self.specs:
            if spec.kind in ("lagged", "lagavg"):
                apply_history(table, spec, k, self.id_name, self.time_name, self.level_map, phase="lagged")

    def after_value(self, table: pd.DataFrame, variable: str, k: int) -> None:
        for spec in self.specs:
            if variable in spec.variables and spec.kind != "lagged":
                single = HistorySpec(spec.kind, (variable,), spec.max_lag, spec.plugin)
                apply_history(table, single, k, self.id_name, self.time_name, self.level_map, phase="current")

    def materialize(self, table: pd.DataFrame, max_time: int) -> pd.DataFrame:
        """Compute every history column on an observed table, k = 0..max_time"""
        table = table.copy()
        for k in range(max_time + 1):
            self.before_step(table, k)
            for variable in self.variables:
                self.after_value(table, variable, k)
        logger.debug(f"Materialized {len(self.columns)} history columns")
        return table
