import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from gformula.data.conventions import CONVENTION_NOTES
from gformula.models.analysis import PrintOptions
from gformula.models.result import GFormulaResult

logger = logging.getLogger(__name__)

RESULTS_TEXT = "results.txt"
RESULTS_JSON = "results.json"
PLOT_DATA = "natural_course_plotdata.csv"


def _labels(result: GFormulaResult) -> Dict[str, str]:
    if result.is_survival:
        return {"np": "NP risk", "gform": "g-form risk", "value": "Risk", "ratio": "Risk ratio",
                "ratio_short": "RR", "difference": "Risk difference", "difference_short": "RD"}
    return {"np": "NP mean", "gform": "g-form mean", "value": "Mean", "ratio": "Mean ratio",
            "ratio_short": "MR", "difference": "Mean difference", "difference_short": "MD"}


def _clean(value: Any) -> Any:
    """JSON-safe copy: arrays become lists, NaN becomes null"""
    if isinstance(value, dict):
        return {str(key): _clean(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(item) for item in value]
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, (np.floating, float)):
        return None if math.isnan(value) else float(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


class ResultFormatter:
    @staticmethod
    def results_frame(result: GFormulaResult, all_times: bool = True) -> pd.DataFrame:
        """One row per (k, intervention) with every number the text table shows"""
        labels = _labels(result)
        rows: List[Dict[str, Any]] = []
        positions = range(len(result.horizons)) if all_times else [len(result.horizons) - 1]
        boot = result.bootstrap
        for position in positions:
            for index, item in enumerate(result.interventions):
                row = {
                    "k": result.horizons[position],
                    "Interv.": index,
                    labels["np"]: result.nonparametric[position] if index == 0 else np.nan,
                    labels["gform"]: item.estimates[position],
                }
                if boot is not None:
                    row[f"{labels['value']} SE"] = boot.se[index, position]
                    row[f"{labels['value']} lower 95% CI"] = result.ci_lower["estimate"][index, position]
                    row[f"{labels['value']} upper 95% CI"] = result.ci_upper["estimate"][index, position]
                row[labels["ratio"]] = item.ratio[position]
                if boot is not None:
                    row[f"{labels['ratio_short']} SE"] = boot.ratio_se[index, position]
                    row[f"{labels['ratio_short']} lower 95% CI"] = result.ci_lower["ratio"][index, position]
                    row[f"{labels['ratio_short']} upper 95% CI"] = result.ci_upper["ratio"][index, position]
                row[labels["difference"]] = item.difference[position]
                if boot is not None:
                    row[f"{labels['difference_short']} SE"] = boot.difference_se[index, position]
                    row[f"{labels['difference_short']} lower 95% CI"] = result.ci_lower["difference"][index, position]
                    row[f"{labels['difference_short']} upper 95% CI"] = result.ci_upper["difference"][index, position]
                rows.append(row)
        return pd.DataFrame(rows)

    @staticmethod
    def format_results(result: GFormulaResult, options: Optional[PrintOptions] = None) -> str:
        """Human-readable report; numbers are rendered from the same arrays as the JSON document"""
        options = options or PrintOptions()
        reference = result.interventions[result.reference]
        reference_name = "natural course" if result.reference == 0 else reference.label
        reference_text = f"{reference_name} ({result.reference})"
        lines = ["PREDICTED RISK UNDER MULTIPLE INTERVENTIONS", "", "Intervention \t Description"]
        for index, item in enumerate(result.interventions):
            lines.append(f"{index:<15d}{item.description}")
        bootstrap_count = result.bootstrap.effective if result.bootstrap is not None else 0
        lines += [
            "",
            f"Sample size = {result.n_subjects}, Monte Carlo sample size = {result.nsimul}",
            f"Number of bootstrap samples = {bootstrap_count}",
            f"Reference intervention = {reference_text}",
            "",
        ]
        frame = ResultFormatter.results_frame(result, all_times=options.all_times)
        formatters = {column: ResultFormatter._number for column in frame.columns if column not in ("k", "Interv.")}
        lines.append(frame.to_string(index=False, formatters=formatters))

        if result.hazard_ratio is not None:
            hr = result.hazard_ratio
            text = f"Hazard ratio ({hr.pair[0]} vs {hr.pair[1]}) = {ResultFormatter._number(hr.value)}"
            if hr.lower is not None:
                text += f", 95% CI [{ResultFormatter._number(hr.lower)}, {ResultFormatter._number(hr.upper)}]"
            lines += ["", text]
        if options.rmses:
            lines += ["", " RMSE Values"]
            for label, model in result.models.items():
                lines.append(f"{label}: {ResultFormatter._number(model.diagnostics.rmse)}")
        if options.coefficients:
            lines += ["", " Coefficients"]
            lines += ResultFormatter._model_tables(result, "coefficient_table")
        if options.stderrs:
            lines += ["", " Standard Errors"]
            lines += ResultFormatter._model_tables(result, "stderr_table")
        return "\n".join(lines) + "\n"

    @staticmethod
    def _model_tables(result: GFormulaResult, method: str) -> List[str]:
        lines = []
        for label, model in result.models.items():
            lines.append(f"${label}")
            for column, value in getattr(model, method)().items():
                lines.append(f"  {column:<30s} {ResultFormatter._number(value)}")
        return lines

    @staticmethod
    def _number(value: Any) -> str:
        if value is None or (isinstance(value, float) and math.isnan(value)):
            return "NA"
        return f"{float(value):.7f}"

    @staticmethod
    def to_document(result: GFormulaResult) -> Dict[str, Any]:
        """Machine-readable result with every horizon at full precision"""
        boot = result.bootstrap
        interventions = []
        for index, item in enumerate(result.interventions):
            entry = {
                "index": index,
                "label": item.label,
                "description": item.description,
                "estimates": item.estimates,
                "ratio": item.ratio,
                "difference": item.difference,
            }
            if boot is not None:
                entry["bootstrap"] = {
                    "se": boot.se[index],
                    "ratio_se": boot.ratio_se[index],
                    "difference_se": boot.difference_se[index],
                    **{f"{name}_lower": result.ci_lower[name][index] for name in ("estimate", "ratio", "difference")},
                    **{f"{name}_upper": result.ci_upper[name][index] for name in ("estimate", "ratio", "difference")},
                }
            interventions.append(entry)

        models = {}
        for label, model in result.models.items():
            models[label] = {
                "family": model.family,
                "link": model.link,
                "coefficients": model.coefficient_table(),
                "stderrs": model.stderr_table(),
                "rmse": model.diagnostics.rmse,
                "residual_mse": model.residual_mse,
                "n_obs": model.n_obs,
                "diagnostics": model.diagnostics.to_dict(),
            }

        document = {
            "outcome_kind": result.outcome_kind,
            "horizons": result.horizons,
            "reference": result.reference,
            "n_subjects": result.n_subjects,
            "nsimul": result.nsimul,
            "nonparametric": result.nonparametric,
            "interventions": interventions,
            "models": models,
            "metadata": {
                **result.metadata,
                "bootstrap_requested": boot.requested if boot is not None else 0,
                "bootstrap_effective": boot.effective if boot is not None else 0,
                "bootstrap_failed": boot.failed if boot is not None else [],
                "conventions": CONVENTION_NOTES,
            },
        }
        if result.hazard_ratio is not None:
            hr = result.hazard_ratio
            document["hazard_ratio"] = {"pair": list(hr.pair), "value": hr.value, "lower": hr.lower, "upper": hr.upper}
        return _clean(document)

    @staticmethod
    def to_json(result: GFormulaResult) -> str:
        return json.dumps(ResultFormatter.to_document(result), indent=2, sort_keys=True, allow_nan=False)


def plot_data_frame(
    horizons: List[int],
    nonparametric_risk: Optional[np.ndarray],
    parametric_risk: Optional[np.ndarray],
    observed_means: Dict[str, np.ndarray],
    simulated_means: Dict[str, np.ndarray],
) -> pd.DataFrame:
    """Tidy (k, quantity, nonparametric, parametric) rows for the natural course"""
    rows = []
    if parametric_risk is not None:
        for position, k in enumerate(horizons):
            rows.append(
                {
                    "k": k,
                    "quantity": "risk",
                    "nonparametric": nonparametric_risk[position],
                    "parametric": parametric_risk[position],
                }
            )
    for name in simulated_means:
        observed = observed_means.get(name, np.full(len(horizons), np.nan))
        for position, k in enumerate(horizons):
            rows.append(
                {
                    "k": k,
                    "quantity": name,
                    "nonparametric": observed[position],
                    "parametric": simulated_means[name][position],
                }
            )
    return pd.DataFrame(rows, columns=["k", "quantity", "nonparametric", "parametric"])


def write_artifacts(
    result: GFormulaResult,
    output_dir: Path,
    options: Optional[PrintOptions] = None,
    sim_tables: Optional[Dict[str, pd.DataFrame]] = None,
) -> Dict[str, Path]:
    """Write text, JSON, plot data and optional simulated data; returns the written paths by kind"""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    written = {}

    path = output_dir / RESULTS_TEXT
    path.write_text(ResultFormatter.format_results(result, options), encoding="utf-8")
    written["text"] = path

    path = output_dir / RESULTS_JSON
    path.write_text(ResultFormatter.to_json(result), encoding="utf-8")
    written["json"] = path

    if result.plot_data is not None:
        path = output_dir / PLOT_DATA
        result.plot_data.to_csv(path, index=False, na_rep="NA", float_format="%.17g")
        written["plot_data"] = path

    for index, (label, table) in enumerate((sim_tables or {}).items()):
        path = output_dir / f"simdata.{index}.csv"
        table.to_csv(path, index=False, na_rep="NA", float_format="%.17g")
        written[f"simdata:{label}"] = path

    logger.info(f"Wrote {len(written)} artifacts to {output_dir}")
    return written
