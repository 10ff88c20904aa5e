from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np


@dataclass
class InterventionEstimate:
    label: str
    description: str
    estimates: np.ndarray  # one value per horizon k
    ratio: np.ndarray
    difference: np.ndarray


@dataclass
class BootstrapResult:
    """Replicate arrays are shaped (B_effective, n_interventions, n_horizons)"""

    replicates: np.ndarray
    ratios: np.ndarray
    differences: np.ndarray
    requested: int
    failed: List[Dict[str, Any]] = field(default_factory=list)
    hazard_ratios: Optional[np.ndarray] = None

    @property
    def effective(self) -> int:
        return int(self.replicates.shape[0])

    def _spread(self, values: np.ndarray) -> np.ndarray:
        if self.effective < 2:
            return np.full(values.shape[1:], np.nan)
        return np.std(values, axis=0, ddof=1)

    @property
    def se(self) -> np.ndarray:
        return self._spread(self.replicates)

    @property
    def ratio_se(self) -> np.ndarray:
        return self._spread(self.ratios)

    @property
    def difference_se(self) -> np.ndarray:
        return self._spread(self.differences)


@dataclass
class HazardRatioResult:
    pair: tuple
    value: float
    lower: Optional[float] = None
    upper: Optional[float] = None


@dataclass
class GFormulaResult:
    outcome_kind: str
    horizons: List[int]
    interventions: List[InterventionEstimate]
    reference: int
    nonparametric: np.ndarray
    n_subjects: int
    nsimul: int
    models: Dict[str, Any] = field(default_factory=dict)
    bootstrap: Optional[BootstrapResult] = None
    ci_lower: Dict[str, np.ndarray] = field(default_factory=dict)
    ci_upper: Dict[str, np.ndarray] = field(default_factory=dict)
    hazard_ratio: Optional[HazardRatioResult] = None
    plot_data: Any = None
    metadata: Dict[str, Any] = field(default_factory=dict)
    sim_data: Dict[str, Any] = field(default_factory=dict)  # label -> simulated long table

    @property
    def is_survival(self) -> bool:
        return self.outcome_kind == "survival"

    def estimate_table(self) -> np.ndarray:
        return np.vstack([item.estimates for item in self.interventions])
