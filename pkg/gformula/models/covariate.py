from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Literal, Optional, Tuple, Union

from gformula.models.fitted import FittedModel
from gformula.models.formula import ModelFormula

CovType = Literal[
    "binary",
    "normal",
    "categorical",
    "bounded_normal",
    "zero_inflated_normal",
    "truncated_normal",
    "absorbing",
    "categorical_time",
    "custom",
]

Operator = Literal["==", "!=", "<", "<=", ">", ">="]


@dataclass(frozen=True)
class Comparison:
    variable: str
    operator: Operator
    value: Union[float, str]

    def __str__(self) -> str:
        return f"{self.variable} {self.operator} {self.value}"


@dataclass(frozen=True)
class Restriction:
    """When `condition` is false the value is not drawn"""

    condition: Comparison
    otherwise: Literal["constant", "carry_forward"] = "constant"
    value: Optional[Union[float, str]] = None


@dataclass(frozen=True)
class HistorySpec:
    kind: Literal["lagged", "cumavg", "lagavg", "custom"]
    variables: Tuple[str, ...]
    max_lag: int = 1
    plugin: Optional[Callable] = None


@dataclass(frozen=True)
class OutcomeRestriction:
    condition: Comparison
    value: float


@dataclass(frozen=True)
class VisitLink:
    visit_indicator: str
    max_missed: int


@dataclass(frozen=True)
class ObservedRanges:
    min: float
    max: float
    nonzero_min: Optional[float] = None
    nonzero_max: Optional[float] = None


@dataclass(frozen=True)
class CovariateSpec:
    name: str
    covtype: CovType
    formula: Optional[ModelFormula] = None
    link: Optional[str] = None
    truncation: Optional[Tuple[float, str]] = None
    restriction: Optional[Restriction] = None
    visit: Optional[VisitLink] = None
    thresholds: Tuple[float, ...] = ()
    fit_plugin: Optional[Callable] = field(default=None, compare=False)
    predict_plugin: Optional[Callable] = field(default=None, compare=False)
    parameters: Dict[str, Any] = field(default_factory=dict, hash=False, compare=False)

    @property
    def is_numeric(self) -> bool:
        return self.covtype not in ("categorical", "categorical_time")


@dataclass
class FittedCovariate:
    """Fitted bundle for one covariate in the simulation order"""

    spec: CovariateSpec
    order_index: int
    ranges: Optional[ObservedRanges] = None
    model: Optional[FittedModel] = None
    zero_model: Optional[FittedModel] = None
    standardization: Optional[Tuple[float, float]] = None
    constant: Optional[Any] = None
    custom_fit: Any = None
    levels: Tuple[str, ...] = ()
    max_missed: Optional[int] = None  # set when this covariate is a visit indicator

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def models(self) -> Dict[str, FittedModel]:
        found = {}
        if self.zero_model is not None:
            found[f"{self.name} (zero)"] = self.zero_model
        if self.model is not None:
            found[self.name] = self.model
        return found
