"""Closed comparison grammar used by restrictions and grace-period rules: `variable op constant`"""

import operator
import re
from typing import Union

import numpy as np
import pandas as pd

from gformula.errors import GFormulaError
from gformula.models.covariate import Comparison
from gformula.services.panel_data import level_key

_CONDITION = re.compile(
    r"^\s*(?P<variable>[A-Za-z_.][A-Za-z0-9_.]*)\s*(?P<operator>==|!=|<=|>=|<|>)\s*(?P<value>.+?)\s*$"
)

OPERATORS = {
    "==": operator.eq,
    "!=": operator.ne,
    "<": operator.lt,
    "<=": operator.le,
    ">": operator.gt,
    ">=": operator.ge,
}


class ConditionError(GFormulaError):
    module = "covariate_engine"


def parse_condition(text: str) -> Comparison:
    match = _CONDITION.match(text)
    if match is None:
        raise ConditionError(f"condition '{text}' is not of the form 'variable op constant'")
    raw = match.group("value")
    value: Union[float, str]
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "'\"":
        value = raw[1:-1]
    else:
        try:
            value = float(raw)
        except ValueError:
            value = raw
    return Comparison(match.group("variable"), match.group("operator"), value)


def evaluate(condition: Comparison, rows: pd.DataFrame) -> np.ndarray:
    """Boolean mask over rows; missing cells never satisfy a condition"""
    if condition.variable not in rows.columns:
        raise ConditionError(f"condition '{condition}' references unknown column '{condition.variable}'")
    column = rows[condition.variable]
    compare = OPERATORS[condition.operator]
    if pd.api.types.is_numeric_dtype(column):
        if isinstance(condition.value, str):
            raise ConditionError(f"condition '{condition}' compares numeric column with text")
        values = column.to_numpy(dtype=float)
        with np.errstate(invalid="ignore"):
            return compare(values, float(condition.value)) & ~np.isnan(values)
    if condition.operator not in ("==", "!="):
        raise ConditionError(f"condition '{condition}' orders a categorical column")
    keys = column.map(lambda cell: None if pd.isna(cell) else level_key(cell)).to_numpy(dtype=object)
    return np.array([key is not None and compare(key, level_key(condition.value)) for key in keys], dtype=bool)
