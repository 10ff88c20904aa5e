import io
import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from gformula.data.conventions import MISSING_TOKENS
from gformula.errors import GFormulaError
from gformula.models.panel import ColumnType, PanelDataset, PanelSchema

logger = logging.getLogger(__name__)

Source = Union[str, Path, bytes, io.IOBase]


class PanelStructureError(GFormulaError):
    module = "panel_data"


class PanelValidationError(GFormulaError):
    module = "panel_data"


class RiskSetBoundsError(GFormulaError):
    module = "panel_data"


class PanelArgumentError(GFormulaError):
    module = "panel_data"


def level_key(value) -> str:
    """String form used for categorical levels; integral floats drop the decimal part"""
    if isinstance(value, str):
        return value
    if isinstance(value, (float, np.floating)) and float(value).is_integer():
        return str(int(value))
    return str(value)


def load_panel(source: Source, schema: PanelSchema) -> PanelDataset:
    """Read delimited text and validate it into a PanelDataset"""
    if isinstance(source, bytes):
        source = io.BytesIO(source)
    try:
        frame = pd.read_csv(
            source,
            sep=schema.delimiter,
            dtype=str,
            keep_default_na=False,
            encoding="utf-8",
        )
    except (OSError, ValueError) as e:
        raise PanelStructureError(f"cannot read input data: {e}") from e
    logger.info(f"Read {len(frame)} records with {len(frame.columns)} columns")
    return panel_from_frame(frame, schema)


def panel_from_frame(frame: pd.DataFrame, schema: PanelSchema) -> PanelDataset:
    """Validate an in-memory table; string cells equal to a missing token become NaN"""
    required = [schema.id, schema.time, schema.outcome, *schema.covariates, *schema.baseline]
    if schema.compevent:
        required.append(schema.compevent)
    missing = [name for name in dict.fromkeys(required) if name not in frame.columns]
    if missing:
        raise PanelValidationError(
            f"missing columns: {', '.join(missing)}; available: {', '.join(map(str, frame.columns))}"
        )

    tokens = set(MISSING_TOKENS) | {schema.na_token}
    table = frame.copy()
    for column in table.columns:
        if not pd.api.types.is_numeric_dtype(table[column]):
            table[column] = (
                table[column]
                .astype(object)
                .map(lambda cell: np.nan if isinstance(cell, str) and cell.strip() in tokens else cell)
            )

    if table[schema.id].isna().any():
        raise PanelStructureError(f"id column '{schema.id}' has missing values")
    table[schema.id] = table[schema.id].map(level_key).astype(object)
    table[schema.time] = _parse_time(table[schema.time], schema.time)

    column_types: Dict[str, ColumnType] = {schema.time: ColumnType("time")}
    for column in table.columns:
        if column in (schema.id, schema.time):
            continue
        declared = schema.column_types.get(column)
        if column == schema.outcome:
            declared = schema.outcome_kind
        elif column == schema.compevent:
            declared = "binary"
        table[column], column_types[column] = _convert_column(table[column], column, declared)

    table = table.sort_values([schema.id, schema.time], kind="mergesort").reset_index(drop=True)

    data = PanelDataset(
        table=table,
        id_name=schema.id,
        time_name=schema.time,
        outcome_name=schema.outcome,
        covariate_names=tuple(schema.covariates),
        baseline_names=tuple(schema.baseline),
        column_types=column_types,
        compevent_name=schema.compevent,
        max_time=int(table[schema.time].max()) if len(table) else 0,
    )
    validate_panel(data, survival=schema.survival)
    logger.info(f"Loaded {data.n_subjects} subjects, K={data.max_time}")
    return data


def _parse_time(column: pd.Series, name: str) -> pd.Series:
    if column.isna().any():
        raise PanelStructureError(f"time column '{name}' has missing values")
    numeric = pd.to_numeric(column, errors="coerce")
    if numeric.isna().any() or not np.all(np.mod(numeric, 1) == 0):
        raise PanelStructureError(f"time column '{name}' must hold integer indices")
    return numeric.astype(int)


def _convert_column(column: pd.Series, name: str, declared: Optional[str]) -> Tuple[pd.Series, ColumnType]:
    if declared == "categorical":
        converted = column.map(lambda cell: cell if pd.isna(cell) else level_key(cell))
        levels = tuple(sorted(converted.dropna().unique()))
        return converted.astype(object), ColumnType("categorical", levels)

    numeric = pd.to_numeric(column, errors="coerce")
    not_numeric = numeric.isna() & column.notna()
    if not_numeric.any():
        if declared in ("binary", "continuous"):
            bad = column[not_numeric].iloc[0]
            raise PanelValidationError(f"column '{name}' has non-numeric value '{bad}'")
        converted = column.map(lambda cell: cell if pd.isna(cell) else level_key(cell))
        return converted.astype(object), ColumnType("categorical", tuple(sorted(converted.dropna().unique())))

    numeric = numeric.astype(float)
    if declared is None:
        observed = set(numeric.dropna().unique())
        declared = "binary" if observed and observed <= {0.0, 1.0} else "continuous"
    if declared == "binary":
        bad = numeric.dropna()[~numeric.dropna().isin([0.0, 1.0])]
        if len(bad):
            raise PanelValidationError(f"binary column '{name}' has value {bad.iloc[0]:g} outside {{0, 1}}")
    return numeric, ColumnType(declared)


def validate_panel(data: PanelDataset, survival: bool = True) -> None:
    """Check the record-structure contract; raises on the first violation"""
    table = data.table
    ids = table[data.id_name]
    times = table[data.time_name]

    position = ids.groupby(ids, sort=False).cumcount()
    mismatch = times.to_numpy() != position.to_numpy()
    if mismatch.any():
        row = int(np.argmax(mismatch))
        subject = ids.iloc[row]
        expected = int(position.iloc[row])
        if expected == 0:
            raise PanelStructureError(f"subject {subject}: time does not start at 0 (first k={times.iloc[row]})")
        if times.iloc[row] == times.iloc[row - 1]:
            raise PanelStructureError(f"subject {subject}: duplicate record at k={expected - 1}")
        raise PanelStructureError(f"subject {subject}: time gap at k={expected}")

    is_last = ~ids.duplicated(keep="last")

    for name in (*data.covariate_names, *data.baseline_names):
        if table[name].isna().any():
            subject = ids[table[name].isna()].iloc[0]
            raise PanelValidationError(f"subject {subject}: covariate '{name}' is missing")

    for name in data.baseline_names:
        varying = table.groupby(data.id_name, sort=False)[name].nunique(dropna=False) > 1
        if varying.any():
            raise PanelValidationError(
                f"subject {varying[varying].index[0]}: baseline covariate '{name}' varies within subject"
            )

    outcome = table[data.outcome_name]
    if data.compevent_name:
        compevent = table[data.compevent_name]
        if compevent.isna().any():
            raise PanelValidationError(f"subject {ids[compevent.isna()].iloc[0]}: competing event indicator is missing")
        flagged = compevent == 1
        bad = flagged & outcome.notna()
        if bad.any():
            row = bad.idxmax()
            raise PanelValidationError(
                f"subject {ids[row]}: competing event at k={times[row]} requires a missing outcome"
            )
        bad = flagged & ~is_last
        if bad.any():
            row = bad.idxmax()
            raise PanelValidationError(f"subject {ids[row]}: competing event at k={times[row]} is not the last record")

    if survival and data.column_types[data.outcome_name].kind == "binary":
        bad = (outcome == 1) & ~is_last
        if bad.any():
            row = bad.idxmax()
            raise PanelValidationError(f"subject {ids[row]}: event at k={times[row]} is not the last record")


def risk_set(data: PanelDataset, k: int, include_zero_coded_censored: bool = True) -> pd.DataFrame:
    """Records at k eligible for hazard estimation"""
    if k < 0 or k > data.max_time:
        raise RiskSetBoundsError(f"k={k} outside 0..{data.max_time}")
    table = data.table
    at_k = table[data.time_name] == k
    eligible = at_k & table[data.outcome_name].notna()
    if not include_zero_coded_censored:
        eligible &= ~zero_coded_censored(data)
    return table[eligible]


def zero_coded_censored(data: PanelDataset) -> pd.Series:
    """Last records coded 0 before K that are not competing events"""
    table = data.table
    is_last = ~table[data.id_name].duplicated(keep="last")
    flagged = is_last & (table[data.outcome_name] == 0) & (table[data.time_name] < data.max_time)
    if data.compevent_name:
        flagged &= table[data.compevent_name] != 1
    return flagged


def resample_baseline(
    data: PanelDataset, s: int, rng: np.random.Generator, resample: bool = True
) -> List[Tuple[int, str]]:
    """Draw s ids with replacement; new ids run 1..s"""
    if s < 1:
        raise PanelArgumentError(f"number of draws must be at least 1, got {s}")
    originals = data.subject_ids
    if not resample and s == len(originals):
        return [(v + 1, subject) for v, subject in enumerate(originals)]
    return [(v + 1, originals[index]) for v, index in enumerate(resample_indices(len(originals), s, rng))]


def resample_indices(n: int, s: int, rng: np.random.Generator) -> np.ndarray:
    """Positions of s draws with replacement out of n"""
    if s < 1:
        raise PanelArgumentError(f"number of draws must be at least 1, got {s}")
    return rng.integers(0, n, size=s)


def resample_subjects(data: PanelDataset, rng: np.random.Generator) -> PanelDataset:
    """n-out-of-n subject bootstrap; every draw keeps all its records under a new id"""
    pairs = resample_baseline(data, data.n_subjects, rng)
    groups = {subject: group for subject, group in data.table.groupby(data.id_name, sort=False)}
    pieces = []
    for new_id, subject in pairs:
        piece = groups[subject].copy()
        piece[data.id_name] = str(new_id)
        pieces.append(piece)
    table = pd.concat(pieces, ignore_index=True)
    return data.with_table(table)


def serialize_panel(data: PanelDataset, delimiter: str = ",", na_token: str = "NA") -> str:
    """Write the dataset back to delimited text"""
    columns = [data.id_name, data.time_name] + [
        column for column in data.table.columns if column not in (data.id_name, data.time_name)
    ]
    return data.table[columns].to_csv(sep=delimiter, index=False, na_rep=na_token)


def schema_of(data: PanelDataset, survival: bool = True) -> PanelSchema:
    """Schema that reloads `serialize_panel` output into an identical dataset"""
    declared = {
        name: ctype.kind
        for name, ctype in data.column_types.items()
        if ctype.kind != "time" and name not in (data.outcome_name, data.compevent_name)
    }
    return PanelSchema(
        id=data.id_name,
        time=data.time_name,
        outcome=data.outcome_name,
        covariates=data.covariate_names,
        baseline=data.baseline_names,
        compevent=data.compevent_name,
        outcome_kind=data.column_types[data.outcome_name].kind,
        survival=survival,
        column_types=declared,
    )
