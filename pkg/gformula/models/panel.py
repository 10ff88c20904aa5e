from dataclasses import dataclass, field
from typing import Any, Dict, List, Literal, Optional, Tuple

import pandas as pd

ColumnKind = Literal["binary", "continuous", "categorical", "time"]


@dataclass(frozen=True)
class ColumnType:
    kind: ColumnKind
    levels: Tuple[str, ...] = ()

    @property
    def is_categorical(self) -> bool:
        return self.kind == "categorical"


@dataclass(frozen=True)
class SubjectHistory:
    id: str
    records: pd.DataFrame

    @property
    def last_time(self) -> int:
        return int(self.records.iloc[-1, 1])

    def __len__(self) -> int:
        return len(self.records)


@dataclass(frozen=True)
class PanelSchema:
    """Column roles of the input file"""

    id: str
    time: str
    outcome: str
    covariates: Tuple[str, ...] = ()
    baseline: Tuple[str, ...] = ()
    compevent: Optional[str] = None
    outcome_kind: Literal["binary", "continuous"] = "binary"
    survival: bool = True
    column_types: Dict[str, ColumnKind] = field(default_factory=dict)
    delimiter: str = ","
    na_token: str = "NA"


@dataclass(frozen=True)
class PanelDataset:
    """Validated long-format records sorted by (id, time); treat `table` as read-only"""

    table: pd.DataFrame
    id_name: str
    time_name: str
    outcome_name: str
    covariate_names: Tuple[str, ...]
    baseline_names: Tuple[str, ...]
    column_types: Dict[str, ColumnType]
    compevent_name: Optional[str] = None
    max_time: int = 0

    @property
    def n_subjects(self) -> int:
        return int(self.table[self.id_name].nunique())

    @property
    def subject_ids(self) -> List[str]:
        return list(pd.unique(self.table[self.id_name]))

    @property
    def subjects(self) -> List[SubjectHistory]:
        columns = [self.id_name, self.time_name] + [
            c for c in self.table.columns if c not in (self.id_name, self.time_name)
        ]
        return [
            SubjectHistory(id=subject_id, records=group[columns].reset_index(drop=True))
            for subject_id, group in self.table.groupby(self.id_name, sort=False)
        ]

    @property
    def level_map(self) -> Dict[str, Tuple[str, ...]]:
        return {name: ctype.levels for name, ctype in self.column_types.items() if ctype.is_categorical}

    def baseline_rows(self) -> pd.DataFrame:
        return self.table[self.table[self.time_name] == 0].reset_index(drop=True)

    def with_table(self, table: pd.DataFrame, **changes: Any) -> "PanelDataset":
        values = {
            "table": table,
            "id_name": self.id_name,
            "time_name": self.time_name,
            "outcome_name": self.outcome_name,
            "covariate_names": self.covariate_names,
            "baseline_names": self.baseline_names,
            "column_types": self.column_types,
            "compevent_name": self.compevent_name,
            "max_time": self.max_time,
        }
        values.update(changes)
        return PanelDataset(**values)
