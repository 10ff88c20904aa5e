from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
import pandas as pd

from gformula.models.covariate import FittedCovariate, HistorySpec, OutcomeRestriction
from gformula.models.fitted import FittedModel

OutcomeKind = Literal["survival", "binary_eof", "continuous_eof"]


@dataclass(frozen=True)
class RunConfig:
    outcome_kind: OutcomeKind = "survival"
    time_points: Optional[int] = None
    nsimul: Optional[int] = None
    seed: int = 1234
    reference: int = 0
    hazard_ratio: Optional[Tuple[int, int]] = None
    competing_as_censoring: bool = False
    include_zero_coded_censored: bool = True
    keep_sim_data: bool = False
    chunk_size: int = 4096
    workers: int = 1

    @property
    def is_survival(self) -> bool:
        return self.outcome_kind == "survival"


@dataclass
class FittedSuite:
    """Fitted models and observed tables, shared read-only by simulation workers"""

    covariates: List[FittedCovariate]
    outcome_model: FittedModel
    histories: List[HistorySpec]
    level_map: Dict[str, Tuple[str, ...]]
    observed: pd.DataFrame
    baseline: pd.DataFrame
    id_name: str
    time_name: str
    outcome_kind: OutcomeKind
    time_points: int
    compevent_model: Optional[FittedModel] = None
    yrestrictions: Tuple[OutcomeRestriction, ...] = ()
    compevent_restrictions: Tuple[OutcomeRestriction, ...] = ()

    @property
    def n_subjects(self) -> int:
        return len(self.baseline)

    @property
    def models(self) -> Dict[str, FittedModel]:
        found: Dict[str, FittedModel] = {}
        for bundle in self.covariates:
            found.update(bundle.models)
        found[self.outcome_model.label] = self.outcome_model
        if self.compevent_model is not None:
            found[self.compevent_model.label] = self.compevent_model
        return found


@dataclass
class SimulationResult:
    """Per-trajectory hazards (s x time_points) or eof means (s,) for one intervention"""

    label: str
    p: Optional[np.ndarray] = None
    q: Optional[np.ndarray] = None
    mu: Optional[np.ndarray] = None
    covariate_means: Dict[str, np.ndarray] = field(default_factory=dict)
    table: Optional[pd.DataFrame] = None

    @property
    def size(self) -> int:
        return len(self.mu) if self.p is None else self.p.shape[0]
