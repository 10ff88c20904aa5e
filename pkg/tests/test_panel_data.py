import numpy as np
import pandas as pd
import pytest

from gformula.models.panel import PanelSchema
from gformula.services.panel_data import (
    PanelArgumentError,
    PanelStructureError,
    PanelValidationError,
    RiskSetBoundsError,
    level_key,
    load_panel,
    panel_from_frame,
    resample_baseline,
    resample_subjects,
    risk_set,
    schema_of,
    serialize_panel,
    zero_coded_censored,
)

SCHEMA = PanelSchema(id="id", time="time", outcome="Y", covariates=("L",), baseline=("W",))


def test_load_panel_reads_text_and_missing_tokens():
    text = b"id,time,W,L,Y\n1,0,1,0.5,0\n1,1,1,0.7,NA\n2,0,0,1.5,1\n"
    data = load_panel(text, SCHEMA)
    assert data.n_subjects == 2
    assert data.max_time == 1
    assert np.isnan(data.table.loc[1, "Y"])
    assert data.column_types["L"].kind == "continuous"
    assert data.column_types["W"].kind == "binary"


def test_time_gap_is_reported():
    frame = pd.DataFrame({"id": [1, 1], "time": [0, 2], "W": [0, 0], "L": [1, 1], "Y": [0.0, 0.0]})
    with pytest.raises(PanelStructureError, match="subject 1: time gap at k=1"):
        panel_from_frame(frame, SCHEMA)


def test_duplicate_and_late_start_are_reported():
    duplicate = pd.DataFrame({"id": [1, 1], "time": [0, 0], "W": [0, 0], "L": [1, 1], "Y": [0.0, 0.0]})
    with pytest.raises(PanelStructureError, match="duplicate record"):
        panel_from_frame(duplicate, SCHEMA)
    late = pd.DataFrame({"id": [1], "time": [1], "W": [0], "L": [1], "Y": [0.0]})
    with pytest.raises(PanelStructureError, match="does not start at 0"):
        panel_from_frame(late, SCHEMA)


def test_missing_column_lists_available():
    frame = pd.DataFrame({"id": [1], "time": [0], "W": [0], "Y": [0.0]})
    with pytest.raises(PanelValidationError, match="missing columns: L"):
        panel_from_frame(frame, SCHEMA)


def test_varying_baseline_and_missing_covariate():
    varying = pd.DataFrame({"id": [1, 1], "time": [0, 1], "W": [0, 1], "L": [1, 1], "Y": [0.0, 0.0]})
    with pytest.raises(PanelValidationError, match="baseline covariate 'W' varies"):
        panel_from_frame(varying, SCHEMA)
    missing = pd.DataFrame({"id": [1], "time": [0], "W": [0], "L": [np.nan], "Y": [0.0]})
    with pytest.raises(PanelValidationError, match="covariate 'L' is missing"):
        panel_from_frame(missing, SCHEMA)


def test_event_must_end_follow_up():
    frame = pd.DataFrame({"id": [1, 1], "time": [0, 1], "W": [0, 0], "L": [1, 1], "Y": [1.0, 0.0]})
    with pytest.raises(PanelValidationError, match="event at k=0 is not the last record"):
        panel_from_frame(frame, SCHEMA)


def test_competing_event_requires_missing_outcome():
    schema = PanelSchema(id="id", time="time", outcome="Y", compevent="D")
    frame = pd.DataFrame({"id": [1], "time": [0], "Y": [0.0], "D": [1.0]})
    with pytest.raises(PanelValidationError, match="requires a missing outcome"):
        panel_from_frame(frame, schema)


def test_non_binary_value_in_binary_column():
    frame = pd.DataFrame({"id": [1], "time": [0], "W": [2], "L": [1], "Y": [0.0]})
    schema = PanelSchema(
        id="id", time="time", outcome="Y", covariates=("L",), baseline=("W",), column_types={"W": "binary"}
    )
    with pytest.raises(PanelValidationError, match="outside"):
        panel_from_frame(frame, schema)


def test_risk_set_counts(survival_records):
    assert len(risk_set(survival_records, 0)) == 4
    assert len(risk_set(survival_records, 1)) == 3
    with pytest.raises(RiskSetBoundsError):
        risk_set(survival_records, 2)


def test_zero_coded_censored_records_can_be_dropped():
    frame = pd.DataFrame({"id": [1, 2, 2], "time": [0, 0, 1], "Y": [0.0, 0.0, 0.0]})
    data = panel_from_frame(frame, PanelSchema(id="id", time="time", outcome="Y"))
    assert zero_coded_censored(data).tolist() == [True, False, False]
    assert len(risk_set(data, 0)) == 2
    assert len(risk_set(data, 0, include_zero_coded_censored=False)) == 1


def test_risk_set_never_exceeds_subjects_with_records(cohort):
    for k in range(cohort.max_time + 1):
        reaching = (cohort.table.groupby("id")["time"].max() >= k).sum()
        assert len(risk_set(cohort, k)) <= reaching


def test_resample_baseline_is_a_function_of_the_seed(cohort):
    first = resample_baseline(cohort, 50, np.random.default_rng(3))
    second = resample_baseline(cohort, 50, np.random.default_rng(3))
    assert first == second
    assert [v for v, _ in first] == list(range(1, 51))
    with pytest.raises(PanelArgumentError):
        resample_baseline(cohort, 0, np.random.default_rng(3))


def test_resample_baseline_without_resampling_keeps_order(survival_records):
    pairs = resample_baseline(survival_records, 4, np.random.default_rng(0), resample=False)
    assert pairs == [(1, "1"), (2, "2"), (3, "3"), (4, "4")]


def test_resample_subjects_keeps_whole_histories(cohort):
    resampled = resample_subjects(cohort, np.random.default_rng(5))
    assert resampled.n_subjects == cohort.n_subjects
    sizes = resampled.table.groupby("id").size()
    assert set(sizes) <= set(cohort.table.groupby("id").size())


def test_serialize_then_load_is_identical(cohort):
    text = serialize_panel(cohort)
    reloaded = load_panel(text.encode("utf-8"), schema_of(cohort))
    pd.testing.assert_frame_equal(reloaded.table[cohort.table.columns], cohort.table, check_dtype=False)
    assert reloaded.column_types == cohort.column_types


def test_categorical_levels_are_sorted_strings():
    frame = pd.DataFrame({"id": [1, 2, 3], "time": [0, 0, 0], "C": ["b", "a", "c"], "Y": [0.0, 1.0, 0.0]})
    schema = PanelSchema(id="id", time="time", outcome="Y", covariates=("C",), column_types={"C": "categorical"})
    data = panel_from_frame(frame, schema)
    assert data.level_map == {"C": ("a", "b", "c")}
    assert level_key(2.0) == "2"
    assert level_key(2.5) == "2.5"
