from dataclasses import dataclass
from typing import List, Tuple, Union

import numpy as np


@dataclass(frozen=True)
class VariableRef:
    name: str


@dataclass(frozen=True)
class Power:
    name: str
    exponent: int


@dataclass(frozen=True)
class FactorExpand:
    name: str


@dataclass(frozen=True)
class SplineBasis:
    name: str
    knots: Tuple[float, ...]


Term = Union[VariableRef, Power, FactorExpand, SplineBasis]


@dataclass(frozen=True)
class ModelFormula:
    """Response plus ordered terms; the intercept is implicit"""

    response: str
    terms: Tuple[Term, ...] = ()

    @property
    def variables(self) -> List[str]:
        names = []
        for term in self.terms:
            if term.name not in names:
                names.append(term.name)
        return names


@dataclass
class DesignMatrix:
    column_names: List[str]
    values: np.ndarray
    response: np.ndarray

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_columns(self) -> int:
        return self.values.shape[1]
