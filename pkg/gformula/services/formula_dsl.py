import logging
import re
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np
import pandas as pd

from gformula.errors import GFormulaError
from gformula.models.formula import DesignMatrix, FactorExpand, ModelFormula, Power, SplineBasis, Term, VariableRef
from gformula.services.panel_data import level_key

logger = logging.getLogger(__name__)

INTERCEPT = "(Intercept)"
FUNCTIONS = ("pow", "factor", "rcs")

_TOKEN = re.compile(
    r"\s*(?:(?P<number>-?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<ident>[A-Za-z_.][A-Za-z0-9_.]*)|(?P<op>[~+(),]))"
)


class FormulaParseError(GFormulaError):
    module = "formula_dsl"

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


class FormulaNameError(GFormulaError):
    module = "formula_dsl"


class FormulaTypeError(GFormulaError):
    module = "formula_dsl"


class FormulaArgumentError(GFormulaError):
    module = "formula_dsl"


def _tokenize(text: str) -> List[Tuple[str, str, int]]:
    tokens = []
    position = 0
    while position < len(text):
        if text[position:].strip() == "":
            break
        match = _TOKEN.match(text, position)
        if match is None or match.end() == position:
            stripped = len(text[position:]) - len(text[position:].lstrip())
            raise FormulaParseError(f"unexpected character '{text[position + stripped]}'", position + stripped)
        kind = match.lastgroup
        start = match.start(kind)
        tokens.append((kind, match.group(kind), start))
        position = match.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.index = 0

    def peek(self) -> Tuple[str, str, int]:
        return self.tokens[self.index]

    def take(self, kind: str, value: Optional[str] = None) -> Tuple[str, str, int]:
        token = self.peek()
        if token[0] != kind or (value is not None and token[1] != value):
            expected = value or kind
            found = token[1] or "end of formula"
            raise FormulaParseError(f"expected '{expected}', found '{found}'", token[2])
        self.index += 1
        return token

    def formula(self) -> ModelFormula:
        response = self.take("ident")[1]
        self.take("op", "~")
        if self.peek()[0] == "end":
            raise FormulaParseError("empty right-hand side", self.peek()[2])
        terms: List[Term] = []
        while True:
            term = self.term()
            if term is not None and term not in terms:
                terms.append(term)
            if self.peek()[0] == "end":
                break
            self.take("op", "+")
        return ModelFormula(response=response, terms=tuple(terms))

    def term(self) -> Optional[Term]:
        kind, value, position = self.peek()
        if kind == "number":
            if value != "1":
                raise FormulaParseError(f"unexpected constant '{value}'", position)
            self.index += 1
            return None
        name = self.take("ident")[1]
        if self.peek()[1] != "(":
            return VariableRef(name)
        if name not in FUNCTIONS:
            logger.warning(f"Unsupported formula transform '{name}' in '{self.text}'")
            raise FormulaParseError(f"unknown function '{name}'", position)
        self.take("op", "(")
        variable = self.take("ident")[1]
        if name == "factor":
            self.take("op", ")")
            return FactorExpand(variable)
        arguments = []
        while self.peek()[1] == ",":
            self.take("op", ",")
            arguments.append(self.take("number"))
        self.take("op", ")")
        if name == "pow":
            return self._power(variable, arguments, position)
        return self._spline(variable, arguments, position)

    @staticmethod
    def _power(variable: str, arguments: list, position: int) -> Term:
        if len(arguments) != 1:
            raise FormulaParseError("pow takes exactly one exponent", position)
        _, text, where = arguments[0]
        if not re.fullmatch(r"\d+", text) or int(text) < 1:
            raise FormulaParseError(f"malformed exponent '{text}'", where)
        exponent = int(text)
        return VariableRef(variable) if exponent == 1 else Power(variable, exponent)

    @staticmethod
    def _spline(variable: str, arguments: list, position: int) -> Term:
        knots = tuple(float(text) for _, text, _ in arguments)
        try:
            _check_knots(knots)
        except FormulaArgumentError as e:
            raise FormulaParseError(str(e), position) from e
        return SplineBasis(variable, knots)


def parse_formula(text: str) -> ModelFormula:
    """Parse `response ~ term + term ...`"""
    return _Parser(text).formula()


def format_formula(formula: ModelFormula) -> str:
    """Canonical text; parse_formula(format_formula(f)) == f"""
    parts = []
    for term in formula.terms:
        if isinstance(term, VariableRef):
            parts.append(term.name)
        elif isinstance(term, Power):
            parts.append(f"pow({term.name}, {term.exponent})")
        elif isinstance(term, FactorExpand):
            parts.append(f"factor({term.name})")
        else:
            knots = ", ".join(repr(float(knot)) for knot in term.knots)
            parts.append(f"rcs({term.name}, {knots})")
    return f"{formula.response} ~ {' + '.join(parts) or '1'}"


def _check_knots(knots) -> None:
    if len(knots) < 3:
        raise FormulaArgumentError(f"rcs needs at least 3 knots, got {len(knots)}")
    if not np.all(np.diff(np.asarray(knots, dtype=float)) > 0):
        raise FormulaArgumentError(f"rcs knots must be strictly increasing: {list(knots)}")


def rcs_basis(x, knots) -> np.ndarray:
    """Restricted cubic spline basis (truncated-power form, normalized by (k_m - k_1)^2)

    Scalar input gives a vector of length m - 2; array input gives an (n, m - 2) matrix.
    """
    _check_knots(knots)
    t = np.asarray(knots, dtype=float)
    values = np.asarray(x, dtype=float)
    column = np.atleast_1d(values)[:, None]
    m = len(t)
    scale = (t[-1] - t[0]) ** 2
    span = t[-1] - t[-2]

    def cube(shift):
        return np.clip(column - shift, 0.0, None) ** 3

    head = t[: m - 2][None, :]
    basis = (
        cube(head)
        - cube(t[-2]) * (t[-1] - head) / span
        + cube(t[-1]) * (t[-2] - head) / span
    ) / scale
    return basis[0] if values.ndim == 0 else basis


def collect_levels(
    formula: ModelFormula, records: pd.DataFrame, level_map: Mapping[str, Tuple[str, ...]]
) -> Dict[str, Tuple[str, ...]]:
    """Level registry for every factor term; numeric factors take their observed values"""
    levels = dict(level_map)
    for term in formula.terms:
        if isinstance(term, FactorExpand) and term.name not in levels:
            if term.name not in records.columns:
                raise FormulaNameError(_unknown(term.name, records))
            observed = records[term.name].dropna().map(level_key).unique()
            levels[term.name] = tuple(sorted(observed))
    return levels


def _unknown(name: str, records: pd.DataFrame) -> str:
    return f"unknown column '{name}'; available: {', '.join(map(str, records.columns))}"


def _numeric(records: pd.DataFrame, name: str, level_map: Mapping) -> np.ndarray:
    if name not in records.columns:
        raise FormulaNameError(_unknown(name, records))
    if name in level_map or not pd.api.types.is_numeric_dtype(records[name]):
        raise FormulaTypeError(f"categorical column '{name}' used as numeric; wrap it in factor()")
    return records[name].to_numpy(dtype=float)


def term_columns(term: Term, level_map: Mapping[str, Tuple[str, ...]]) -> List[str]:
    if isinstance(term, VariableRef):
        return [term.name]
    if isinstance(term, Power):
        return [f"pow({term.name},{term.exponent})"]
    if isinstance(term, FactorExpand):
        return [f"{term.name}={level}" for level in level_map[term.name][1:]]
    return [f"{term.name}.rcs{i + 1}" for i in range(len(term.knots) - 2)]


def build_design(
    formula: ModelFormula,
    records: pd.DataFrame,
    level_map: Mapping[str, Tuple[str, ...]],
    with_response: bool = True,
) -> DesignMatrix:
    """Expand the formula against the records; rows stay in record order"""
    n = len(records)
    names = [INTERCEPT]
    blocks = [np.ones((n, 1))]
    for term in formula.terms:
        if isinstance(term, FactorExpand):
            if term.name not in records.columns:
                raise FormulaNameError(_unknown(term.name, records))
            if term.name not in level_map:
                raise FormulaTypeError(f"no level registry for factor '{term.name}'")
            levels = level_map[term.name]
            keys = records[term.name].map(level_key).to_numpy(dtype=object)
            unseen = sorted(set(keys) - set(levels))
            if unseen:
                raise FormulaTypeError(f"level '{unseen[0]}' of '{term.name}' not among {list(levels)}")
            indicators = [(keys == level).astype(float) for level in levels[1:]]
            blocks.append(np.column_stack(indicators) if indicators else np.zeros((n, 0)))
        elif isinstance(term, VariableRef):
            blocks.append(_numeric(records, term.name, level_map)[:, None])
        elif isinstance(term, Power):
            blocks.append((_numeric(records, term.name, level_map) ** term.exponent)[:, None])
        else:
            blocks.append(rcs_basis(_numeric(records, term.name, level_map), term.knots).reshape(n, -1))
        names.extend(term_columns(term, level_map))

    if with_response:
        if formula.response not in records.columns:
            raise FormulaNameError(_unknown(formula.response, records))
        column = records[formula.response]
        if pd.api.types.is_numeric_dtype(column):
            response = column.to_numpy(dtype=float)
        else:
            response = column.to_numpy(dtype=object)
    else:
        response = np.full(n, np.nan)
    return DesignMatrix(column_names=names, values=np.hstack(blocks), response=response)
