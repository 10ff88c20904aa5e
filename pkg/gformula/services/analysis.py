import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from gformula.config import settings
from gformula.models.analysis import AnalysisConfig, CovariateConfig, HistoryConfig
from gformula.models.covariate import CovariateSpec, HistorySpec, OutcomeRestriction, Restriction, VisitLink
from gformula.models.formula import ModelFormula
from gformula.models.intervention import InterventionSpec
from gformula.models.panel import PanelDataset, PanelSchema
from gformula.models.result import GFormulaResult, HazardRatioResult, InterventionEstimate
from gformula.models.run import RunConfig, SimulationResult
from gformula.services import conditions
from gformula.services.config_validator import ConfigError, data_path
from gformula.services.formula_dsl import parse_formula
from gformula.services.gformula_core import (
    PURPOSE_HAZARD_RATIO,
    enumerate_gformula,
    estimates,
    fit_all,
    simulate,
    simulate_interventions,
    stream,
)
from gformula.services.covariate_engine import custom_covtype, register_custom_covtype
from gformula.services.history import custom_history, register_custom_history
from gformula.services.inference import bootstrap, bootstrap_intervals, contrasts, hazard_ratio
from gformula.services.intervention_engine import intervention_list
from gformula.services.np_estimators import nonparametric_curve, observed_covariate_means
from gformula.services.panel_data import load_panel
from gformula.services.plugins import load_plugin
from gformula.services.result_formatter import plot_data_frame

logger = logging.getLogger(__name__)


def covariate_spec(config: CovariateConfig) -> CovariateSpec:
    fit_plugin = predict_plugin = None
    if config.type == "custom":
        plugin_id = register_custom_covtype(load_plugin(config.fit_plugin), load_plugin(config.predict_plugin))
        fit_plugin, predict_plugin = custom_covtype(plugin_id)
    restriction = None
    if config.restriction is not None:
        restriction = Restriction(
            conditions.parse_condition(config.restriction.condition),
            config.restriction.otherwise,
            config.restriction.value,
        )
    return CovariateSpec(
        name=config.name,
        covtype=config.type,
        formula=parse_formula(config.formula) if config.formula else None,
        link=config.link,
        truncation=(config.truncation.point, config.truncation.direction) if config.truncation else None,
        restriction=restriction,
        visit=VisitLink(config.visit.indicator, config.visit.max_missed) if config.visit else None,
        thresholds=tuple(config.thresholds),
        fit_plugin=fit_plugin,
        predict_plugin=predict_plugin,
        parameters=dict(config.parameters),
    )


def history_spec(config: HistoryConfig) -> HistorySpec:
    plugin = None
    if config.kind == "custom":
        plugin = custom_history(register_custom_history(load_plugin(config.plugin)))
    return HistorySpec(config.kind, tuple(config.variables), plugin=plugin)


@dataclass
class AnalysisPlan:
    """Config translated into engine types; interventions need time_points and are built later"""

    schema: PanelSchema
    covariates: List[CovariateSpec]
    histories: List[HistorySpec]
    ymodel: ModelFormula
    compevent_model: Optional[ModelFormula] = None
    yrestrictions: Tuple[OutcomeRestriction, ...] = ()
    compevent_restrictions: Tuple[OutcomeRestriction, ...] = ()

    @classmethod
    def from_config(cls, config: AnalysisConfig) -> "AnalysisPlan":
        column_types = dict(config.data.column_types)
        for cov in config.covariates:
            if cov.type == "categorical":
                column_types[cov.name] = "categorical"
        schema = PanelSchema(
            id=config.data.id,
            time=config.data.time,
            outcome=config.data.outcome,
            covariates=tuple(cov.name for cov in config.covariates if cov.type != "categorical_time"),
            baseline=tuple(config.baseline),
            compevent=config.data.compevent,
            outcome_kind=config.data.outcome_type,
            survival=config.is_survival,
            column_types=column_types,
            delimiter=config.data.delimiter,
            na_token=config.data.na_token,
        )
        return cls(
            schema=schema,
            covariates=[covariate_spec(cov) for cov in config.covariates],
            histories=[history_spec(history) for history in config.histories],
            ymodel=parse_formula(config.ymodel),
            compevent_model=parse_formula(config.compevent_model) if config.compevent_model else None,
            yrestrictions=tuple(
                OutcomeRestriction(conditions.parse_condition(r.condition), r.value) for r in config.yrestrictions
            ),
            compevent_restrictions=tuple(
                OutcomeRestriction(conditions.parse_condition(r.condition), r.value)
                for r in config.compevent_restrictions
            ),
        )


@dataclass
class ReplicateRunner:
    """Fit + simulate + estimate on one dataset; picklable so replicates can run in worker processes"""

    plan: AnalysisPlan
    interventions: List[InterventionSpec]
    run: RunConfig

    def fit(self, data: PanelDataset):
        plan = self.plan
        return fit_all(
            data,
            plan.covariates,
            plan.ymodel,
            self.run,
            compevent_model=plan.compevent_model,
            histories=plan.histories,
            yrestrictions=plan.yrestrictions,
            compevent_restrictions=plan.compevent_restrictions,
        )

    def __call__(self, data: PanelDataset, replicate: int) -> Tuple[np.ndarray, Optional[float]]:
        suite = self.fit(data)
        results = [simulate(suite, intervention, self.run, replicate) for intervention in self.interventions]
        value = None
        if self.run.hazard_ratio is not None:
            first, second = self.run.hazard_ratio
            rng = stream(self.run.seed, replicate, PURPOSE_HAZARD_RATIO)
            value = hazard_ratio(results[first], results[second], rng)
        return np.vstack([estimates(result) for result in results]), value


def estimate(
    data: PanelDataset,
    plan: AnalysisPlan,
    interventions: Sequence[InterventionSpec],
    run: RunConfig,
    nsamples: int = 0,
    exact: bool = False,
    plot_data: bool = True,
) -> GFormulaResult:
    """Point estimates, nonparametric benchmark, contrasts and (optionally) bootstrap intervals"""
    if run.keep_sim_data and nsamples > 0:
        raise ConfigError("simulated data cannot be kept while bootstrapping")
    interventions = list(interventions)
    runner = ReplicateRunner(plan, interventions, run)
    suite = runner.fit(data)
    nsimul = run.nsimul or suite.n_subjects
    if nsimul < settings.min_recommended_nsimul:
        logger.warning(f"Monte Carlo sample size {nsimul} is below the recommended {settings.min_recommended_nsimul}")

    logger.info(f"Simulating {len(interventions)} interventions with {nsimul} trajectories each")
    simulations: List[SimulationResult] = simulate_interventions(suite, interventions, run, 0, run.workers)
    if exact:
        table = np.vstack([enumerate_gformula(suite, intervention, run) for intervention in interventions])
    else:
        table = np.vstack([estimates(result) for result in simulations])
    ratio, difference = contrasts(table, run.reference)

    horizons = list(range(suite.time_points)) if run.is_survival else [data.max_time]
    nonparametric = nonparametric_curve(
        data, run.outcome_kind, suite.time_points, run.competing_as_censoring, run.include_zero_coded_censored
    )

    result = GFormulaResult(
        outcome_kind=run.outcome_kind,
        horizons=horizons,
        interventions=[
            InterventionEstimate(item.label, item.description, table[index], ratio[index], difference[index])
            for index, item in enumerate(interventions)
        ],
        reference=run.reference,
        nonparametric=nonparametric,
        n_subjects=data.n_subjects,
        nsimul=nsimul,
        models=suite.models,
        metadata={
            "seed": run.seed,
            "chunk_size": run.chunk_size,
            "time_points": suite.time_points,
            "competing_as_censoring": run.competing_as_censoring,
            "include_zero_coded_censored": run.include_zero_coded_censored,
            "exact": exact,
            "ci_method": "percentile, nearest rank",
        },
    )

    if run.hazard_ratio is not None:
        first, second = run.hazard_ratio
        value = hazard_ratio(simulations[first], simulations[second], stream(run.seed, 0, PURPOSE_HAZARD_RATIO))
        result.hazard_ratio = HazardRatioResult(pair=(first, second), value=value)

    if nsamples > 0:
        logger.info(f"Bootstrapping {nsamples} replicates")
        replicate_run = replace(run, keep_sim_data=False, workers=1)
        boot = bootstrap(
            data, ReplicateRunner(plan, interventions, replicate_run), nsamples, run.seed, run.reference, run.workers
        )
        intervals = bootstrap_intervals(boot)
        result.bootstrap = boot
        result.ci_lower = {name: bounds[0] for name, bounds in intervals.items() if name != "hazard_ratio"}
        result.ci_upper = {name: bounds[1] for name, bounds in intervals.items() if name != "hazard_ratio"}
        if result.hazard_ratio is not None and "hazard_ratio" in intervals:
            lower, upper = intervals["hazard_ratio"]
            result.hazard_ratio.lower, result.hazard_ratio.upper = float(lower), float(upper)

    if plot_data:
        levels = {bundle.name: bundle.levels for bundle in suite.covariates if not bundle.spec.is_numeric}
        names = [bundle.name for bundle in suite.covariates]
        observed = observed_covariate_means(
            data, names, levels, suite.time_points, survival=run.is_survival, table=suite.observed
        )
        result.plot_data = plot_data_frame(
            list(range(suite.time_points)),
            nonparametric if run.is_survival else None,
            table[0] if run.is_survival else None,
            observed,
            simulations[0].covariate_means,
        )

    if run.keep_sim_data:
        result.sim_data = {item.label: simulation.table for item, simulation in zip(interventions, simulations)}
    return result


@dataclass
class GFormulaAnalysis:
    """A config file's analysis: load the data, build interventions, estimate"""

    config: AnalysisConfig
    base_dir: Path = field(default_factory=Path)
    workers: Optional[int] = None

    def load_data(self) -> PanelDataset:
        plan = AnalysisPlan.from_config(self.config)
        return load_panel(data_path(self.config, self.base_dir), plan.schema)

    def run_config(self, data: PanelDataset) -> RunConfig:
        config = self.config
        return RunConfig(
            outcome_kind=config.outcome_kind,
            time_points=config.time_points or data.max_time + 1,
            nsimul=config.nsimul,
            seed=config.seed,
            reference=config.reference,
            hazard_ratio=tuple(config.hazard_ratio) if config.hazard_ratio else None,
            competing_as_censoring=config.compevent_cens,
            include_zero_coded_censored=config.include_zero_coded_censored,
            keep_sim_data=config.sim_data,
            chunk_size=config.chunk_size or settings.chunk_size,
            workers=self.workers or config.workers or settings.workers,
        )

    def run(self, data: Optional[PanelDataset] = None) -> GFormulaResult:
        plan = AnalysisPlan.from_config(self.config)
        if data is None:
            data = self.load_data()
        run = self.run_config(data)
        treatments = _treatments_of(self.config)
        interventions = intervention_list(self.config.interventions, treatments, run.time_points)
        return estimate(
            data,
            plan,
            interventions,
            run,
            nsamples=self.config.nsamples,
            exact=self.config.exact,
            plot_data=self.config.plot_data,
        )

    @classmethod
    def from_path(
        cls, path: Union[str, Path], config: AnalysisConfig, workers: Optional[int] = None
    ) -> "GFormulaAnalysis":
        return cls(config=config, base_dir=Path(path).parent, workers=workers)


def _treatments_of(config: AnalysisConfig) -> List[str]:
    return list(dict.fromkeys(rule.variable for intervention in config.interventions for rule in intervention.rules))
