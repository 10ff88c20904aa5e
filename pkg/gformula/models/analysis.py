from typing import Any, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, Field, field_validator, model_validator


class DataSection(BaseModel):
    path: str
    id: str
    time: str
    outcome: str
    compevent: Optional[str] = None
    outcome_type: Literal["binary", "continuous"] = "binary"
    column_types: Dict[str, Literal["binary", "continuous", "categorical"]] = Field(default_factory=dict)
    delimiter: str = ","
    na_token: str = "NA"


class TruncationConfig(BaseModel):
    point: float
    direction: Literal["left", "right"]


class RestrictionConfig(BaseModel):
    condition: str
    otherwise: Literal["constant", "carry_forward"] = "constant"
    value: Optional[Union[float, str]] = None

    @model_validator(mode="after")
    def check_value(self):
        if self.otherwise == "constant" and self.value is None:
            raise ValueError("a constant restriction needs a value")
        return self


class VisitConfig(BaseModel):
    indicator: str
    max_missed: int = Field(ge=1)


class CovariateConfig(BaseModel):
    name: str
    type: Literal[
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
    formula: Optional[str] = None
    link: Optional[Literal["logit", "probit", "identity", "log"]] = None
    truncation: Optional[TruncationConfig] = None
    restriction: Optional[RestrictionConfig] = None
    visit: Optional[VisitConfig] = None
    thresholds: List[float] = Field(default_factory=list)
    fit_plugin: Optional[str] = None
    predict_plugin: Optional[str] = None
    parameters: Dict[str, Any] = Field(default_factory=dict)

    @model_validator(mode="after")
    def check_type_fields(self):
        if self.type == "categorical_time":
            if self.formula is not None:
                raise ValueError("categorical_time covariates take no formula")
            if not self.thresholds:
                raise ValueError("categorical_time covariates need thresholds")
        elif self.formula is None and self.type != "custom":
            raise ValueError(f"covariate '{self.name}' of type {self.type} needs a formula")
        if (self.type == "truncated_normal") != (self.truncation is not None):
            raise ValueError("truncation is required for truncated_normal and only allowed there")
        if self.type == "custom" and not (self.fit_plugin and self.predict_plugin):
            raise ValueError("custom covariates need fit_plugin and predict_plugin")
        return self


class HistoryConfig(BaseModel):
    kind: Literal["lagged", "cumavg", "lagavg", "custom"]
    variables: List[str]
    plugin: Optional[str] = None

    @model_validator(mode="after")
    def check_plugin(self):
        if (self.kind == "custom") != (self.plugin is not None):
            raise ValueError("a plugin is required for custom histories and only allowed there")
        return self


class OutcomeRestrictionConfig(BaseModel):
    condition: str
    value: float


class RuleConfig(BaseModel):
    variable: str
    rule: Literal["static", "threshold", "natural_course", "grace_period", "custom"]
    values: Optional[Union[float, List[float]]] = None
    lower: Optional[float] = None
    upper: Optional[float] = None
    condition: Optional[str] = None
    grace: Optional[int] = Field(None, ge=1)
    treat_value: float = 1.0
    plugin: Optional[str] = None
    parameters: Dict[str, Any] = Field(default_factory=dict)
    times: Optional[List[int]] = None

    @model_validator(mode="after")
    def check_rule_fields(self):
        if self.rule == "static" and self.values is None:
            raise ValueError("static rules need values")
        if self.rule == "threshold":
            if self.lower is None and self.upper is None:
                raise ValueError("threshold rules need lower and/or upper")
            if self.lower is not None and self.upper is not None and self.lower > self.upper:
                raise ValueError("threshold lower must not exceed upper")
        if self.rule == "grace_period" and (self.condition is None or self.grace is None):
            raise ValueError("grace_period rules need condition and grace")
        if self.rule == "custom" and self.plugin is None:
            raise ValueError("custom rules need a plugin")
        return self


class InterventionConfig(BaseModel):
    label: str
    description: Optional[str] = None
    rules: List[RuleConfig] = Field(min_length=1)


class PrintOptions(BaseModel):
    rmses: bool = False
    coefficients: bool = False
    stderrs: bool = False
    all_times: bool = False


class AnalysisConfig(BaseModel):
    """Full analysis description read from the YAML/JSON config file"""

    data: DataSection
    outcome_kind: Literal["survival", "binary_eof", "continuous_eof"] = "survival"
    time_points: Optional[int] = Field(None, ge=1)
    covariates: List[CovariateConfig] = Field(default_factory=list)
    baseline: List[str] = Field(default_factory=list)
    histories: List[HistoryConfig] = Field(default_factory=list)
    ymodel: str
    compevent_model: Optional[str] = None
    compevent_cens: bool = False
    include_zero_coded_censored: bool = True
    yrestrictions: List[OutcomeRestrictionConfig] = Field(default_factory=list)
    compevent_restrictions: List[OutcomeRestrictionConfig] = Field(default_factory=list)
    interventions: List[InterventionConfig] = Field(default_factory=list)
    reference: int = Field(0, ge=0)
    nsimul: Optional[int] = Field(None, ge=1)
    nsamples: int = Field(0, ge=0)
    seed: int = 1234
    workers: Optional[int] = Field(None, ge=1)
    chunk_size: Optional[int] = Field(None, ge=1)
    sim_data: bool = False
    hazard_ratio: Optional[Tuple[int, int]] = None
    plot_data: bool = True
    exact: bool = False
    output: PrintOptions = Field(default_factory=PrintOptions)

    @field_validator("covariates")
    @classmethod
    def unique_names(cls, value: List[CovariateConfig]) -> List[CovariateConfig]:
        names = [cov.name for cov in value]
        duplicates = sorted({name for name in names if names.count(name) > 1})
        if duplicates:
            raise ValueError(f"duplicate covariate names: {', '.join(duplicates)}")
        return value

    @property
    def is_survival(self) -> bool:
        return self.outcome_kind == "survival"
