import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Set, Tuple, Union

import pandas as pd
import yaml
from pydantic import ValidationError

from gformula.config import settings
from gformula.errors import GFormulaError
from gformula.models.analysis import AnalysisConfig
from gformula.services import conditions
from gformula.services.formula_dsl import parse_formula
from gformula.services.history import parse_history_column
from gformula.services.plugins import load_plugin

logger = logging.getLogger(__name__)

DISCRETE_TYPES = ("binary", "absorbing", "categorical", "categorical_time")


class ConfigError(GFormulaError):
    module = "cli_config"


@dataclass(frozen=True)
class Finding:
    level: Literal["error", "warning"]
    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.level}: {self.path}: {self.message}"


def has_errors(findings: Sequence[Finding]) -> bool:
    return any(finding.level == "error" for finding in findings)


def read_config_file(path: Union[str, Path]) -> dict:
    """YAML key tree (JSON accepted by extension)"""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (ValueError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot parse config {path}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must hold a mapping at top level")
    return raw


def load_config(path: Union[str, Path]) -> Tuple[Optional[AnalysisConfig], List[Finding]]:
    """Parse and schema-check a config file; schema errors come back as findings with dotted paths"""
    raw = read_config_file(path)
    try:
        config = AnalysisConfig.model_validate(raw)
    except ValidationError as e:
        findings = [
            Finding("error", ".".join(str(part) for part in error["loc"]) or "<root>", error["msg"])
            for error in e.errors()
        ]
        return None, findings
    return config, []


def data_path(config: AnalysisConfig, base_dir: Union[str, Path] = ".") -> Path:
    path = Path(config.data.path)
    return path if path.is_absolute() else Path(base_dir) / path


def read_header(config: AnalysisConfig, base_dir: Union[str, Path] = ".") -> Optional[List[str]]:
    try:
        return list(pd.read_csv(data_path(config, base_dir), sep=config.data.delimiter, nrows=0).columns)
    except (OSError, ValueError) as e:
        logger.debug(f"Data header unavailable for validation: {e}")
        return None


class _Names:
    """What a formula or condition may reference"""

    def __init__(self, config: AnalysisConfig, columns: Optional[Sequence[str]]):
        self.columns = set(columns) if columns is not None else None
        self.plain: Set[str] = {config.data.time, *config.baseline, *(cov.name for cov in config.covariates)}
        self.drawing_order = [cov.name for cov in config.covariates]
        self.lagged = {name for h in config.histories if h.kind == "lagged" for name in h.variables}
        self.averaged = {name for h in config.histories if h.kind in ("cumavg", "lagavg") for name in h.variables}
        self.lag_averaged = {name for h in config.histories if h.kind == "lagavg" for name in h.variables}
        self.custom_prefixes: List[str] = []

    def problem(self, name: str) -> Optional[str]:
        parsed = parse_history_column(name)
        if parsed is not None:
            kind, source = parsed
            declared = {"lagged": self.lagged, "cumavg": self.averaged, "lagavg": self.lag_averaged}[kind]
            if source not in declared:
                wanted = "cumavg or lagavg" if kind == "cumavg" else kind
                return f"'{name}' needs a {wanted} history for {source}"
            return None
        if name in self.plain:
            return None
        if any(name.startswith(f"{prefix}_") for prefix in self.custom_prefixes):
            return None
        if self.columns is not None and name not in self.columns:
            return f"unknown variable '{name}'"
        return None

    def not_yet_drawn(self, name: str, index: int) -> Optional[str]:
        """Same-k covariates must come before covariate `index` in the drawing order"""
        if name not in self.drawing_order:
            return None
        position = self.drawing_order.index(name)
        if position < index:
            return None
        owner = self.drawing_order[index]
        if position == index:
            return f"'{name}' at the same time is not available when '{owner}' is drawn"
        return f"'{name}' is drawn after '{owner}'; use a history of it instead"


def validate(config: AnalysisConfig, columns: Optional[Sequence[str]] = None) -> List[Finding]:
    """Cross-reference checks on a schema-valid config; `columns` is the data header when readable"""
    findings: List[Finding] = []

    def error(path: str, message: str) -> None:
        findings.append(Finding("error", path, message))

    def warning(path: str, message: str) -> None:
        findings.append(Finding("warning", path, message))

    names = _Names(config, columns)
    covariates = {cov.name: index for index, cov in enumerate(config.covariates)}
    types = {cov.name: cov.type for cov in config.covariates}

    if columns is not None:
        required = [config.data.id, config.data.time, config.data.outcome, *config.baseline]
        if config.data.compevent:
            required.append(config.data.compevent)
        required += [cov.name for cov in config.covariates if cov.type != "categorical_time"]
        for name in dict.fromkeys(required):
            if name not in columns:
                error("data", f"column '{name}' not found in {config.data.path}")

    for index, history in enumerate(config.histories):
        path = f"histories.{index}"
        for name in history.variables:
            if name not in names.plain and (columns is None or name not in columns):
                error(f"{path}.variables", f"history variable '{name}' is not a covariate or column")
            if history.kind in ("cumavg", "lagavg") and types.get(name) in ("categorical", "categorical_time"):
                error(f"{path}.variables", f"{history.kind} history of categorical '{name}' is undefined")
        if history.kind == "custom":
            try:
                plugin = load_plugin(history.plugin)
                names.custom_prefixes.append(getattr(plugin, "prefix", None) or plugin.__name__)
            except GFormulaError as e:
                error(f"{path}.plugin", str(e))

    formulas = []
    for index, cov in enumerate(config.covariates):
        if cov.formula is not None:
            formulas.append((f"covariates.{index}.formula", cov.formula, cov.name, index))
    formulas.append(("ymodel", config.ymodel, config.data.outcome, None))
    if config.compevent_model is not None:
        formulas.append(("compevent_model", config.compevent_model, config.data.compevent, None))
    for path, text, response, drawn_at in formulas:
        try:
            formula = parse_formula(text)
        except GFormulaError as e:
            error(path, str(e))
            continue
        if response is not None and formula.response != response:
            error(path, f"response '{formula.response}' should be '{response}'")
        for name in formula.variables:
            problem = names.problem(name)
            if problem is None and drawn_at is not None:
                problem = names.not_yet_drawn(name, drawn_at)
            if problem:
                error(path, problem)

    conditions_to_check = []
    for index, cov in enumerate(config.covariates):
        path = f"covariates.{index}"
        if cov.restriction is not None:
            conditions_to_check.append((f"{path}.restriction.condition", cov.restriction.condition, index))
        if cov.visit is not None:
            indicator = cov.visit.indicator
            if indicator not in covariates:
                error(f"{path}.visit.indicator", f"visit indicator '{indicator}' is not a declared covariate")
            elif covariates[indicator] >= index:
                error(f"{path}.visit.indicator", f"visit indicator '{indicator}' must precede '{cov.name}'")
            elif types[indicator] != "binary":
                error(f"{path}.visit.indicator", f"visit indicator '{indicator}' must be binary")
        for field_name in ("fit_plugin", "predict_plugin"):
            reference = getattr(cov, field_name)
            if reference is not None:
                try:
                    load_plugin(reference)
                except GFormulaError as e:
                    error(f"{path}.{field_name}", str(e))
        if config.exact and cov.type not in DISCRETE_TYPES:
            error(f"{path}.type", f"exact enumeration cannot handle {cov.type} covariates")
    for group in ("yrestrictions", "compevent_restrictions"):
        for index, restriction in enumerate(getattr(config, group)):
            conditions_to_check.append((f"{group}.{index}.condition", restriction.condition, None))

    for index, intervention in enumerate(config.interventions):
        for rule_index, rule in enumerate(intervention.rules):
            path = f"interventions.{index}.rules.{rule_index}"
            if rule.variable not in covariates:
                error(f"{path}.variable", f"intervention variable '{rule.variable}' is not a declared covariate")
            if rule.condition is not None:
                conditions_to_check.append((f"{path}.condition", rule.condition, None))
            if rule.plugin is not None:
                try:
                    load_plugin(rule.plugin)
                except GFormulaError as e:
                    error(f"{path}.plugin", str(e))

    for path, text, drawn_at in conditions_to_check:
        try:
            condition = conditions.parse_condition(text)
        except GFormulaError as e:
            error(path, str(e))
            continue
        problem = names.problem(condition.variable)
        if problem is None and drawn_at is not None:
            problem = names.not_yet_drawn(condition.variable, drawn_at)
        if problem:
            error(path, problem)

    count = len(config.interventions) + 1
    if config.reference >= count:
        error("reference", f"reference {config.reference} outside 0..{count - 1}")
    if config.hazard_ratio is not None:
        if not config.is_survival:
            error("hazard_ratio", "hazard ratios need a survival outcome")
        for value in config.hazard_ratio:
            if not 0 <= value < count:
                error("hazard_ratio", f"intervention {value} outside 0..{count - 1}")

    expected_type = {"survival": "binary", "binary_eof": "binary", "continuous_eof": "continuous"}[config.outcome_kind]
    if config.data.outcome_type != expected_type:
        error("data.outcome_type", f"{config.outcome_kind} outcomes must be {expected_type}")
    if config.compevent_model is not None and config.data.compevent is None:
        error("compevent_model", "a competing-event model needs data.compevent")
    if config.compevent_model is not None and config.compevent_cens:
        warning("compevent_model", "ignored because competing events are treated as censoring")
    if config.data.compevent is not None and config.compevent_model is None and not config.compevent_cens:
        error("compevent_model", "competing events present: give a model or set compevent_cens")
    if config.sim_data and config.nsamples > 0:
        error("sim_data", "simulated data cannot be kept while bootstrapping (nsamples > 0)")
    if config.nsimul is not None and config.nsimul < settings.min_recommended_nsimul:
        warning("nsimul", f"{config.nsimul} trajectories; at least {settings.min_recommended_nsimul} recommended")

    return findings
