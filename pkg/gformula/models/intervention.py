from dataclasses import dataclass, field
from typing import Any, Callable, Dict, FrozenSet, Optional, Tuple, Union

import numpy as np

from gformula.models.covariate import Comparison


@dataclass(frozen=True)
class Static:
    values: Tuple[Any, ...]


@dataclass(frozen=True)
class Threshold:
    lower: float = float("-inf")
    upper: float = float("inf")


@dataclass(frozen=True)
class NaturalCourse:
    pass


@dataclass(frozen=True)
class GracePeriod:
    condition: Comparison
    grace: int
    treat_value: float = 1.0


@dataclass(frozen=True)
class Custom:
    plugin: Callable
    parameters: Dict[str, Any] = field(default_factory=dict, hash=False, compare=False)


Rule = Union[Static, Threshold, NaturalCourse, GracePeriod, Custom]


@dataclass(frozen=True)
class InterventionRule:
    variable: str
    rule: Rule
    times: Optional[FrozenSet[int]] = None

    def applies_at(self, k: int) -> bool:
        return self.times is None or k in self.times


@dataclass(frozen=True)
class InterventionSpec:
    label: str
    rules: Tuple[InterventionRule, ...] = ()
    description: str = ""

    @property
    def variables(self) -> Tuple[str, ...]:
        return tuple(rule.variable for rule in self.rules)

    @property
    def is_natural_course(self) -> bool:
        return all(isinstance(rule.rule, NaturalCourse) for rule in self.rules)


@dataclass
class GraceTracker:
    """Per-trajectory grace-period state, one slot per simulated trajectory"""

    met: np.ndarray
    first: np.ndarray
    initiated: np.ndarray

    @classmethod
    def empty(cls, size: int) -> "GraceTracker":
        return cls(
            met=np.zeros(size, dtype=bool),
            first=np.full(size, -1, dtype=int),
            initiated=np.zeros(size, dtype=bool),
        )
