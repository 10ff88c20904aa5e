from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np

from gformula.models.formula import ModelFormula

Family = Literal["binomial", "gaussian", "multinomial", "truncated-normal"]
Link = Literal["logit", "probit", "identity", "log"]


@dataclass
class ModelDiagnostics:
    converged: bool = True
    iterations: int = 0
    log_likelihood: float = float("nan")
    rmse: float = float("nan")
    message: str = ""

    def to_dict(self) -> Dict:
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "log_likelihood": self.log_likelihood,
            "rmse": self.rmse,
            "message": self.message,
        }


@dataclass
class FittedModel:
    """Result of one maximum-likelihood fit"""

    family: Family
    link: Link
    coefficients: np.ndarray
    stderrs: np.ndarray
    column_names: List[str]
    n_obs: int
    observed_range: Tuple[float, float]
    diagnostics: ModelDiagnostics = field(default_factory=ModelDiagnostics)
    residual_mse: Optional[float] = None
    truncation: Optional[Tuple[float, str]] = None
    levels: Tuple[str, ...] = ()
    label: str = ""
    formula: Optional[ModelFormula] = None
    level_map: Dict[str, Tuple[str, ...]] = field(default_factory=dict)

    @property
    def sigma(self) -> Optional[float]:
        if self.residual_mse is None:
            return None
        return float(np.sqrt(self.residual_mse))

    def coefficient_table(self) -> Dict[str, float]:
        if self.family == "multinomial":
            return {
                f"{level}:{name}": float(self.coefficients[i, j])
                for i, level in enumerate(self.levels[1:])
                for j, name in enumerate(self.column_names)
            }
        return {name: float(value) for name, value in zip(self.column_names, self.coefficients)}

    def stderr_table(self) -> Dict[str, float]:
        if self.family == "multinomial":
            return {
                f"{level}:{name}": float(self.stderrs[i, j])
                for i, level in enumerate(self.levels[1:])
                for j, name in enumerate(self.column_names)
            }
        return {name: float(value) for name, value in zip(self.column_names, self.stderrs)}
