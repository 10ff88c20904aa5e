import logging
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from gformula.config import settings
from gformula.data.conventions import MU_HAT, NATURAL_PREFIX, P_HAT, Q_HAT, SIM_ID
from gformula.errors import GFormulaError
from gformula.models.covariate import CovariateSpec, FittedCovariate, HistorySpec, OutcomeRestriction
from gformula.models.formula import ModelFormula
from gformula.models.intervention import Custom, GracePeriod, GraceTracker, InterventionSpec, Static
from gformula.models.panel import PanelDataset
from gformula.models.run import FittedSuite, RunConfig, SimulationResult
from gformula.services import conditions
from gformula.services.covariate_engine import (
    CovariateFitError,
    categorical_time_levels,
    categorical_time_values,
    covariate_branches,
    fit_covariate,
    simulate_covariate,
)
from gformula.services.history import HistoryEngine, history_columns, parse_history_column, required_lags
from gformula.services.intervention_engine import apply_rule, check_support
from gformula.services.model_fitting import fit_formula, predict_frame
from gformula.services.panel_data import resample_indices, zero_coded_censored

logger = logging.getLogger(__name__)

PURPOSE_BASELINE = 0
PURPOSE_SIMULATION = 1
PURPOSE_HAZARD_RATIO = 2
PURPOSE_BOOTSTRAP = 3

DISCRETE_COVTYPES = ("binary", "absorbing", "categorical", "categorical_time")


class SimulationError(GFormulaError):
    module = "gformula_core"


class EnumerationError(GFormulaError):
    module = "gformula_core"


class RiskHorizonError(GFormulaError):
    module = "gformula_core"


def stream(seed: int, *key: int) -> np.random.Generator:
    """Random stream keyed by logical indices only"""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


def run_parallel(func: Callable, tasks: Sequence, workers: int = 1) -> List:
    """Map `func` over tasks in order; inline when a single worker is requested"""
    if workers <= 1 or len(tasks) <= 1:
        return [func(task) for task in tasks]
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as executor:
        return list(executor.map(func, tasks))


def _declared_histories(histories: Sequence[HistorySpec], formulas: Sequence[ModelFormula]) -> List[HistorySpec]:
    needed = required_lags(formulas)
    specs = []
    for spec in histories:
        if spec.kind in ("lagged", "lagavg"):
            deepest = max([needed.get((spec.kind, name), 1) for name in spec.variables] + [spec.max_lag])
            spec = HistorySpec(spec.kind, spec.variables, deepest, spec.plugin)
        specs.append(spec)
    covered = {(spec.kind, name) for spec in specs for name in spec.variables}
    for (kind, name), depth in sorted(needed.items()):
        if (kind, name) not in covered:
            logger.debug(f"Adding {kind} history of {name} (depth {depth}) referenced by a model")
            specs.append(HistorySpec(kind, (name,), depth))
    referenced = {parse_history_column(name) for formula in formulas for name in formula.variables}
    for kind, name in sorted(item for item in referenced if item and item[0] == "cumavg"):
        if ("cumavg", name) not in covered and ("lagavg", name) not in covered:
            specs.append(HistorySpec("cumavg", (name,)))
    return specs


def _restricted(rows: pd.DataFrame, restrictions: Sequence[OutcomeRestriction]) -> pd.DataFrame:
    keep = np.ones(len(rows), dtype=bool)
    for restriction in restrictions:
        keep &= conditions.evaluate(restriction.condition, rows)
    return rows[keep]


def _check_drawing_order(specs: Sequence[CovariateSpec]) -> None:
    """Same-k references must point at covariates drawn earlier"""
    order = [spec.name for spec in specs]
    for index, spec in enumerate(specs):
        referenced = list(spec.formula.variables) if spec.formula is not None else []
        if spec.restriction is not None:
            referenced.append(spec.restriction.condition.variable)
        for name in referenced:
            if name in order[index:]:
                raise CovariateFitError(f"'{spec.name}' references '{name}' at the same time before it is drawn")


def fit_all(
    data: PanelDataset,
    specs: Sequence[CovariateSpec],
    ymodel: ModelFormula,
    config: RunConfig,
    compevent_model: Optional[ModelFormula] = None,
    histories: Sequence[HistorySpec] = (),
    yrestrictions: Sequence[OutcomeRestriction] = (),
    compevent_restrictions: Sequence[OutcomeRestriction] = (),
) -> FittedSuite:
    """Materialize histories and fit the covariate, outcome and competing-event models"""
    time_name, id_name = data.time_name, data.id_name
    K = data.max_time
    time_points = config.time_points or K + 1
    if config.is_survival and time_points > K + 1:
        raise SimulationError(f"time_points={time_points} exceeds the follow-up of {K + 1} intervals")
    if not config.is_survival and time_points != K + 1:
        raise SimulationError(f"end-of-follow-up outcomes need time_points = {K + 1}, got {time_points}")

    _check_drawing_order(specs)
    table = data.table.copy()
    level_map = dict(data.level_map)
    for spec in specs:
        if spec.covtype == "categorical_time":
            table[spec.name] = table[time_name].map(lambda k, t=spec.thresholds: categorical_time_values(k, t))
            level_map[spec.name] = categorical_time_levels(spec.thresholds)

    compevent = data.compevent_name
    if compevent and config.competing_as_censoring:
        table.loc[table[compevent] == 1, data.outcome_name] = np.nan
        compevent_model = None
        logger.info("Competing events treated as censoring")

    formulas = [spec.formula for spec in specs if spec.formula is not None] + [ymodel]
    if compevent_model is not None:
        formulas.append(compevent_model)
    history_specs = _declared_histories(histories, formulas)
    for spec in history_specs:
        if spec.kind == "lagged":
            for name in spec.variables:
                if name in level_map:
                    for column in history_columns(HistorySpec("lagged", (name,), spec.max_lag)):
                        level_map[column] = level_map[name]
    engine = HistoryEngine(history_specs, id_name, time_name, level_map)
    table = engine.materialize(table, K)

    visit_limits = {spec.visit.visit_indicator: spec.visit.max_missed for spec in specs if spec.visit}
    for indicator in visit_limits:
        baseline_visits = table.loc[table[time_name] == 0, indicator]
        if (baseline_visits != 1).any():
            raise CovariateFitError(f"visit indicator '{indicator}' must equal 1 at k=0 for every subject")

    bundles: List[FittedCovariate] = []
    for index, spec in enumerate(specs):
        bundles.append(
            fit_covariate(spec, table, index, level_map, id_name, time_name, max_missed=visit_limits.get(spec.name))
        )

    outcome = data.outcome_name
    if config.is_survival:
        rows = table[table[outcome].notna()]
        if not config.include_zero_coded_censored:
            rows = rows[~zero_coded_censored(data.with_table(table))[rows.index]]
        rows = _restricted(rows, yrestrictions)
        outcome_model = fit_formula(ymodel, rows, level_map, "binomial", "logit", label=outcome)
    else:
        rows = table[(table[time_name] == K) & table[outcome].notna()]
        rows = _restricted(rows, yrestrictions)
        family = "binomial" if config.outcome_kind == "binary_eof" else "gaussian"
        outcome_model = fit_formula(ymodel, rows, level_map, family, label=outcome)
    fitted_compevent = None
    if config.is_survival and compevent and compevent_model is not None:
        rows = table[table[outcome].notna() | (table[compevent] == 1)]
        rows = _restricted(rows, compevent_restrictions)
        fitted_compevent = fit_formula(compevent_model, rows, level_map, "binomial", "logit", label=compevent)
    logger.info(f"Fitted {len(bundles)} covariate models and the outcome model on {outcome_model.n_obs} records")

    return FittedSuite(
        covariates=bundles,
        outcome_model=outcome_model,
        histories=history_specs,
        level_map=level_map,
        observed=table,
        baseline=table[table[time_name] == 0].reset_index(drop=True),
        id_name=id_name,
        time_name=time_name,
        outcome_kind=config.outcome_kind,
        time_points=time_points,
        compevent_model=fitted_compevent,
        yrestrictions=tuple(yrestrictions),
        compevent_restrictions=tuple(compevent_restrictions),
    )


class _Trajectories:
    """Long working table of paths with contiguous per-k blocks, plus per-path rule state"""

    def __init__(self, suite: FittedSuite, intervention: InterventionSpec, base: pd.DataFrame):
        self.suite = suite
        self.intervention = intervention
        self.n = len(base)
        time_name = suite.time_name
        blocks = []
        for k in range(suite.time_points):
            block = base.copy()
            block[time_name] = k
            blocks.append(block)
        self.table = pd.concat(blocks, ignore_index=True)
        self.treatments = list(dict.fromkeys(intervention.variables))
        for name in self.treatments:
            self.table[NATURAL_PREFIX + name] = self.table[name]
        self.trackers: Dict[int, GraceTracker] = {
            index: GraceTracker.empty(self.n)
            for index, rule in enumerate(intervention.rules)
            if isinstance(rule.rule, GracePeriod)
        }
        self.missed = {bundle.name: np.zeros(self.n) for bundle in suite.covariates if bundle.max_missed is not None}
        self.history = HistoryEngine(suite.histories, suite.id_name, time_name, suite.level_map)

    def block(self, k: int) -> slice:
        return slice(k * self.n, (k + 1) * self.n)

    def rows(self, k: int) -> pd.DataFrame:
        return self.table.iloc[self.block(k)]

    def column(self, name: str, k: int) -> np.ndarray:
        return self.table[name].to_numpy()[self.block(k)]

    def write(self, name: str, k: int, values: np.ndarray) -> None:
        self.table.iloc[self.block(k), self.table.columns.get_loc(name)] = values

    def finalize(self, bundle: FittedCovariate, natural: np.ndarray, k: int) -> np.ndarray:
        """Apply the intervention to the natural values of one covariate at k and refresh its histories"""
        name = bundle.name
        if name in self.treatments:
            self.write(NATURAL_PREFIX + name, k, natural)
        assigned = natural
        for index, rule in enumerate(self.intervention.rules):
            if rule.variable != name or not rule.applies_at(k):
                continue
            assigned = apply_rule(
                rule.rule,
                assigned,
                self.trackers.get(index),
                k,
                rows=self.rows(k),
                history=self.table.iloc[: k * self.n],
                variable=name,
                time_name=self.suite.time_name,
            )
            if isinstance(rule.rule, Custom):
                check_support(bundle, assigned, self.intervention.label)
        self.write(name, k, assigned)
        self.history.after_value(self.table, name, k)
        if name in self.missed:
            self.missed[name] = np.where(np.asarray(assigned, dtype=float) == 0, self.missed[name] + 1, 0)
        return assigned

    def select(self, positions: np.ndarray) -> None:
        """Keep (and duplicate) paths by position"""
        index = np.concatenate([k * self.n + positions for k in range(self.suite.time_points)])
        self.table = self.table.iloc[index].reset_index(drop=True)
        self.n = len(positions)
        self.table[self.suite.id_name] = np.tile(np.arange(self.n), self.suite.time_points)
        for tracker in self.trackers.values():
            tracker.met, tracker.first, tracker.initiated = (
                tracker.met[positions],
                tracker.first[positions],
                tracker.initiated[positions],
            )
        self.missed = {name: counts[positions] for name, counts in self.missed.items()}

    def _restrict(self, values: np.ndarray, restrictions, rows: pd.DataFrame) -> np.ndarray:
        replaced = np.zeros(len(rows), dtype=bool)
        for restriction in restrictions:
            failed = ~conditions.evaluate(restriction.condition, rows) & ~replaced
            values[failed] = restriction.value
            replaced |= failed
        return values

    def hazards(self, k: int) -> Tuple[np.ndarray, np.ndarray]:
        rows = self.rows(k)
        p = np.asarray(predict_frame(self.suite.outcome_model, rows), dtype=float)
        p = self._restrict(p, self.suite.yrestrictions, rows)
        if self.suite.compevent_model is None:
            q = np.zeros(self.n)
        else:
            q = predict_frame(self.suite.compevent_model, rows)
            q = self._restrict(np.asarray(q, dtype=float), self.suite.compevent_restrictions, rows)
        if np.any(~np.isfinite(p)) or np.any(~np.isfinite(q)):
            raise SimulationError(f"non-finite hazard at k={k} under '{self.intervention.label}'")
        return p, q

    def eof_mean(self, k: int) -> np.ndarray:
        rows = self.rows(k)
        mu = np.asarray(predict_frame(self.suite.outcome_model, rows), dtype=float)
        mu = self._restrict(mu, self.suite.yrestrictions, rows)
        if np.any(~np.isfinite(mu)):
            raise SimulationError(f"non-finite predicted mean under '{self.intervention.label}'")
        return mu

    def covariate_sums(self, k: int) -> Dict[str, float]:
        sums = {}
        for bundle in self.suite.covariates:
            values = self.column(bundle.name, k)
            if bundle.spec.is_numeric:
                sums[bundle.name] = float(np.sum(values.astype(float)))
            else:
                for level in bundle.levels:
                    sums[f"{bundle.name}={level}"] = float(np.sum(values == level))
        return sums


def simulation_baseline(suite: FittedSuite, nsimul: int, seed: int, replicate: int = 0) -> pd.DataFrame:
    """Baseline rows for s trajectories with ids v = 1..s"""
    n = suite.n_subjects
    if nsimul == n:
        base = suite.baseline.copy()
    else:
        picks = resample_indices(n, nsimul, stream(seed, replicate, PURPOSE_BASELINE))
        base = suite.baseline.iloc[picks].reset_index(drop=True)
    base[suite.id_name] = np.arange(1, nsimul + 1)
    return base


def _simulate_chunk(suite, intervention, base, rng, keep_table):
    traj = _Trajectories(suite, intervention, base)
    T = suite.time_points
    p = np.zeros((traj.n, T))
    q = np.zeros((traj.n, T))
    mu = None
    sums: Dict[str, np.ndarray] = {}
    for k in range(T):
        if k > 0:
            traj.history.before_step(traj.table, k)
        for bundle in suite.covariates:
            if k == 0:
                natural = traj.column(bundle.name, 0)
            else:
                natural = simulate_covariate(
                    bundle,
                    traj.rows(k),
                    rng,
                    k,
                    previous=traj.column(bundle.name, k - 1),
                    missed=traj.missed.get(bundle.name),
                    observed=suite.observed,
                    time_name=suite.time_name,
                )
            traj.finalize(bundle, natural, k)
        for name, value in traj.covariate_sums(k).items():
            sums.setdefault(name, np.zeros(T))[k] = value
        if suite.outcome_kind == "survival":
            p[:, k], q[:, k] = traj.hazards(k)
    if suite.outcome_kind != "survival":
        mu = traj.eof_mean(T - 1)
    table = None
    if keep_table:
        table = traj.table
        if suite.outcome_kind == "survival":
            table[P_HAT] = p.T.ravel()
            table[Q_HAT] = q.T.ravel()
        else:
            table[MU_HAT] = np.where(table[suite.time_name] == T - 1, np.tile(mu, T), np.nan)
    return p, q, mu, sums, table


def simulate(
    suite: FittedSuite,
    intervention: InterventionSpec,
    config: RunConfig,
    replicate: int = 0,
) -> SimulationResult:
    """Simulate trajectories under one intervention; chunks of trajectories use their own streams"""
    nsimul = config.nsimul or suite.n_subjects
    base = simulation_baseline(suite, nsimul, config.seed, replicate)
    chunk_size = config.chunk_size
    parts = []
    for chunk, start in enumerate(range(0, nsimul, chunk_size)):
        rng = stream(config.seed, replicate, PURPOSE_SIMULATION, chunk)
        chunk_base = base.iloc[start : start + chunk_size].reset_index(drop=True)
        parts.append(_simulate_chunk(suite, intervention, chunk_base, rng, config.keep_sim_data))
    survival = suite.outcome_kind == "survival"
    means = {name: sum(part[3][name] for part in parts) / nsimul for name in parts[0][3]}
    result = SimulationResult(
        label=intervention.label,
        p=np.vstack([part[0] for part in parts]) if survival else None,
        q=np.vstack([part[1] for part in parts]) if survival else None,
        mu=None if survival else np.concatenate([part[2] for part in parts]),
        covariate_means=means,
    )
    if config.keep_sim_data:
        table = pd.concat([part[4] for part in parts], ignore_index=True)
        table = table.rename(columns={suite.id_name: SIM_ID}).sort_values([SIM_ID, suite.time_name], kind="mergesort")
        result.table = table.reset_index(drop=True)
    logger.debug(f"Simulated {nsimul} trajectories under '{intervention.label}'")
    return result


def risk_curve(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Mean over trajectories of the cumulative risk at every horizon"""
    survive = (1.0 - p) * (1.0 - q)
    before = np.hstack([np.ones((p.shape[0], 1)), np.cumprod(survive, axis=1)[:, :-1]])
    return np.cumsum(p * (1.0 - q) * before, axis=1).mean(axis=0)


def risk_estimate(trajectories: SimulationResult, t: int) -> float:
    """Mean cumulative risk through horizon t"""
    if trajectories.p is None:
        raise RiskHorizonError("risk estimates need survival trajectories")
    if t < 0 or t >= trajectories.p.shape[1]:
        raise RiskHorizonError(f"horizon t={t} outside 0..{trajectories.p.shape[1] - 1}")
    return float(risk_curve(trajectories.p, trajectories.q)[t])


def mean_estimate(trajectories: SimulationResult) -> float:
    if trajectories.mu is None:
        raise RiskHorizonError("mean estimates need end-of-follow-up trajectories")
    return float(np.mean(trajectories.mu))


def estimates(trajectories: SimulationResult) -> np.ndarray:
    """Risk at every horizon, or the single eof mean as a length-1 array"""
    if trajectories.p is not None:
        return risk_curve(trajectories.p, trajectories.q)
    return np.array([mean_estimate(trajectories)])


def _simulate_task(task) -> SimulationResult:
    suite, intervention, config, replicate = task
    return simulate(suite, intervention, config, replicate)


def simulate_interventions(
    suite: FittedSuite,
    interventions: Sequence[InterventionSpec],
    config: RunConfig,
    replicate: int = 0,
    workers: int = 1,
) -> List[SimulationResult]:
    tasks = [(suite, intervention, config, replicate) for intervention in interventions]
    return run_parallel(_simulate_task, tasks, workers)


def _statically_assigned(intervention: InterventionSpec, name: str, k: int) -> bool:
    applicable = [rule.rule for rule in intervention.rules if rule.variable == name and rule.applies_at(k)]
    return bool(applicable) and isinstance(applicable[-1], Static)


def enumerate_gformula(suite: FittedSuite, intervention: InterventionSpec, config: RunConfig) -> np.ndarray:
    """Exact g-formula over every discrete covariate path; returns the same shape as `estimates`"""
    for bundle in suite.covariates:
        if bundle.spec.covtype not in DISCRETE_COVTYPES and bundle.constant is None:
            raise EnumerationError(f"covariate '{bundle.name}' ({bundle.spec.covtype}) cannot be enumerated")
    limit = settings.max_enumeration_paths
    base = suite.baseline.copy()
    base[suite.id_name] = np.arange(len(base))
    traj = _Trajectories(suite, intervention, base)
    weights = np.full(traj.n, 1.0 / traj.n)
    alive = np.ones(traj.n)
    T = suite.time_points
    contributions = np.zeros(T)
    for k in range(T):
        if k > 0:
            traj.history.before_step(traj.table, k)
        for bundle in suite.covariates:
            if k == 0:
                traj.finalize(bundle, traj.column(bundle.name, 0), k)
                continue
            branches = covariate_branches(
                bundle, traj.rows(k), k, previous=traj.column(bundle.name, k - 1), missed=traj.missed.get(bundle.name)
            )
            if _statically_assigned(intervention, bundle.name, k):
                # the rule overwrites every natural branch with one value
                branches = [(branches[0][0], sum(probability for _, probability in branches))]
            kept = [(np.flatnonzero(probability > 0), values, probability) for values, probability in branches]
            total = sum(len(index) for index, _, _ in kept)
            if total > limit:
                raise EnumerationError(f"{total} paths at k={k} exceed the limit of {limit}")
            positions = np.concatenate([index for index, _, _ in kept])
            natural = np.concatenate([values[index] for index, values, _ in kept])
            factor = np.concatenate([probability[index] for index, _, probability in kept])
            traj.select(positions)
            weights = weights[positions] * factor
            alive = alive[positions]
            traj.finalize(bundle, natural, k)
        if suite.outcome_kind == "survival":
            p, q = traj.hazards(k)
            contributions[k] = np.sum(weights * alive * p * (1.0 - q))
            alive = alive * (1.0 - p) * (1.0 - q)
    logger.debug(f"Enumerated {traj.n} paths under '{intervention.label}'")
    if suite.outcome_kind == "survival":
        return np.cumsum(contributions)
    return np.array([np.sum(weights * traj.eof_mean(T - 1))])
