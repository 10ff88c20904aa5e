import numpy as np
import pandas as pd
import pytest
from scipy.special import expit

from gformula.models.covariate import CovariateSpec, HistorySpec
from gformula.models.panel import PanelSchema
from gformula.services.formula_dsl import parse_formula
from gformula.services.panel_data import panel_from_frame


def simulate_cohort(n=1000, K=2, seed=7, compevent=False, censor=0.0, effect=-0.8, feedback=1.0):
    """Long-format cohort: baseline W, confounder L, treatment A, event Y (and competing event D)"""
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n):
        W = float(rng.random() < 0.5)
        A_prev = 0.0
        for k in range(K + 1):
            if k == 0:
                L = float(rng.random() < 0.4)
                A = float(rng.random() < expit(-0.3 + 0.8 * L))
            else:
                L = float(rng.random() < expit(-0.5 + feedback * A_prev + 0.5 * W))
                A = float(rng.random() < expit(-0.3 + 0.8 * L + 1.5 * A_prev))
            record = {"id": i, "time": k, "W": W, "L": L, "A": A}
            if compevent:
                record["D"] = 0.0
                if rng.random() < 0.05:
                    record.update(D=1.0, Y=np.nan)
                    rows.append(record)
                    break
            y = rng.random() < expit(-2.0 + 0.7 * L + effect * A)
            if not y and censor and k < K and rng.random() < censor:
                record["Y"] = np.nan
                rows.append(record)
                break
            record["Y"] = float(y)
            rows.append(record)
            if y:
                break
            A_prev = A
    return pd.DataFrame(rows)


def cohort_schema(compevent=False):
    return PanelSchema(
        id="id",
        time="time",
        outcome="Y",
        covariates=("L", "A"),
        baseline=("W",),
        compevent="D" if compevent else None,
    )


@pytest.fixture
def cohort_frame():
    return simulate_cohort()


@pytest.fixture
def cohort(cohort_frame):
    return panel_from_frame(cohort_frame, cohort_schema())


@pytest.fixture
def competing_cohort():
    return panel_from_frame(simulate_cohort(n=800, compevent=True, seed=11), cohort_schema(compevent=True))


@pytest.fixture
def cohort_specs():
    return [
        CovariateSpec("L", "binary", parse_formula("L ~ lag1_A + W")),
        CovariateSpec("A", "binary", parse_formula("A ~ L + lag1_A")),
    ]


@pytest.fixture
def cohort_histories():
    return [HistorySpec("lagged", ("A", "L"))]


@pytest.fixture
def cohort_ymodel():
    return parse_formula("Y ~ L + A + W")


@pytest.fixture
def survival_records():
    """Four subjects, hazards 1/4 at k=0 and 1/3 at k=1"""
    frame = pd.DataFrame(
        {
            "id": [1, 2, 2, 3, 3, 4, 4],
            "time": [0, 0, 1, 0, 1, 0, 1],
            "Y": [1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
        }
    )
    return panel_from_frame(frame, PanelSchema(id="id", time="time", outcome="Y"))


@pytest.fixture
def competing_records():
    """Event at k=0, competing event at k=1, a survivor and a censored subject"""
    frame = pd.DataFrame(
        {
            "id": [1, 2, 2, 3, 3, 4, 4],
            "time": [0, 0, 1, 0, 1, 0, 1],
            "Y": [1.0, 0.0, np.nan, 0.0, 0.0, 0.0, np.nan],
            "D": [0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
        }
    )
    return panel_from_frame(frame, PanelSchema(id="id", time="time", outcome="Y", compevent="D"))
