import logging
import time

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import humanfriendly
import numpy as np
import pandas as pd

from joblib import Parallel, delayed
from sklearn.model_selection import StratifiedKFold
from tqdm import tqdm

from dynpred.config import METHOD_NAMES, run_config_from_dict
from dynpred.core.dataset import landmark_filter
from dynpred.core.errors import CensoringWeightError, ConfigError, DataError
from dynpred.core.evalmetrics import evaluate, ipcw_weights
from dynpred.core.longitudinal import MixedModelFit, fit_marker_models
from dynpred.core.methods import SUPERLEARNER, load_learner, make_learner
from dynpred.core.simgen import make_scenario, simulate_cohort
from dynpred.core.summaries import assemble_design
from dynpred.util import derive_seed

logger = logging.getLogger('ensemble')

MAX_WEIGHT_STEPS = 100000
WEIGHT_TOL = 1e-12
INNER_STREAM = 1


def _stratified_folds(events, n_folds, seed) -> np.ndarray:
    events = np.asarray(events, dtype=int)
    if n_folds > len(events):
        raise ConfigError(f'{n_folds} folds requested for {len(events)} subjects')
    folds = np.zeros(len(events), dtype=int)
    splitter = StratifiedKFold(n_splits=n_folds, shuffle=True, random_state=seed % (2 ** 32))
    for k, (_, test) in enumerate(splitter.split(np.zeros(len(events)), events)):
        folds[test] = k
    for k in range(n_folds):
        if not events[folds != k].any():
            raise DataError(f'Training part of fold {k + 1} has no event; reduce the number of folds')
    return folds


@dataclass(frozen=True)
class FoldPlan:
    """Outer fold of every subject (sorted by id) and inner folds of every outer training set.

    With a single outer fold the plan is apparent: the whole cohort is both
    training and test set.
    """
    ids: Tuple[str, ...]
    outer: np.ndarray
    inner: Tuple[np.ndarray, ...]
    n_outer: int
    n_inner: int
    seed: int

    def train_ids(self, k):
        if self.n_outer == 1:
            return list(self.ids)
        return [i for i, f in zip(self.ids, self.outer) if f != k]

    def test_ids(self, k):
        return [i for i, f in zip(self.ids, self.outer) if f == k]


def make_fold_plan(cohort, n_outer, n_inner, seed) -> FoldPlan:
    order = np.argsort(cohort.ids.astype(str), kind='mergesort')
    ids = tuple(str(i) for i in cohort.ids[order])
    events = cohort.events[order]
    if n_outer == 1:
        outer = np.zeros(len(ids), dtype=int)
    else:
        outer = _stratified_folds(events, n_outer, seed)
    inner = []
    for k in range(n_outer):
        train = np.ones(len(ids), dtype=bool) if n_outer == 1 else outer != k
        inner.append(_stratified_folds(events[train], n_inner, derive_seed(seed, k, INNER_STREAM)))
    return FoldPlan(ids=ids, outer=outer, inner=tuple(inner), n_outer=n_outer, n_inner=n_inner,
                    seed=seed)


@dataclass(frozen=True)
class SuperLearnerWeights:
    methods: Tuple[str, ...]
    omega: np.ndarray
    brier: float = float('nan')

    def as_dict(self):
        return {m: float(w) for m, w in zip(self.methods, self.omega)}

    def to_dict(self):
        return {'methods': list(self.methods), 'omega': self.omega.tolist(), 'brier': self.brier}

    @classmethod
    def from_dict(cls, data):
        return cls(methods=tuple(data['methods']), omega=np.asarray(data['omega'], dtype=float),
                   brier=float(data.get('brier', float('nan'))))


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto {w >= 0, sum w = 1} (sort-based)."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, len(v) + 1)
    positive = u - css / k > 0
    rho = k[positive][-1]
    theta = css[positive][-1] / rho
    return np.maximum(v - theta, 0.0)


def superlearner_weights(predictions, times, events, t_hor, methods: Optional[Sequence[str]] = None
                         ) -> SuperLearnerWeights:
    """Convex weights minimizing the IPCW Brier score of the combined internal-CV predictions.

    Projected gradient with exact line search on the quadratic objective,
    started from uniform weights.
    """
    Z = np.asarray(predictions, dtype=float)
    if Z.ndim != 2 or Z.shape[1] == 0:
        raise ConfigError('Superlearner needs at least one method')
    n, m = Z.shape
    methods = tuple(methods) if methods is not None else tuple(f'm{j}' for j in range(m))
    status, w = ipcw_weights(times, events, t_hor)
    A = (Z * w[:, None]).T @ Z / n
    b = Z.T @ (w * status) / n
    c = float(np.mean(w * status ** 2))

    def objective(omega):
        return float(omega @ A @ omega - 2.0 * b @ omega + c)

    omega = np.full(m, 1.0 / m)
    value = objective(omega)
    lipschitz = 2.0 * float(np.max(np.linalg.eigvalsh(A))) if m > 1 else 0.0
    if lipschitz > 0:
        for _ in range(MAX_WEIGHT_STEPS):
            gradient = 2.0 * (A @ omega - b)
            direction = project_simplex(omega - gradient / lipschitz) - omega
            if not np.any(direction):
                break
            curvature = float(direction @ A @ direction)
            slope = float(gradient @ direction)
            step = 1.0 if curvature <= 0 else min(1.0, -slope / (2.0 * curvature))
            candidate = omega + step * direction
            new_value = objective(candidate)
            if new_value >= value:
                break
            omega, gain, value = candidate, value - new_value, new_value
            if gain < WEIGHT_TOL:
                break
        else:
            logger.warning('Superlearner weights reached the iteration limit')
    omega = np.maximum(omega, 0.0)
    omega = omega / omega.sum()
    return SuperLearnerWeights(methods=methods, omega=omega, brier=objective(omega))


def superlearner_predict(weights: SuperLearnerWeights, predictions) -> np.ndarray:
    """Weighted mean of the per-method predictions (columns in `weights.methods` order)."""
    P = np.asarray(predictions, dtype=float)
    return np.clip(P @ weights.omega, 0.0, 1.0)


def _learner_specs(run_config):
    specs = [m for m in run_config.methods if m.name != SUPERLEARNER]
    if not specs:
        raise ConfigError('At least one learner besides the superlearner is required')
    return specs


def _method_seed(seed, name):
    return derive_seed(seed, METHOD_NAMES.index(name))


def _fit_learner(spec, run_config, design, times, events, seed, n_jobs=1):
    started = time.time()
    learner = make_learner(spec, run_config.folds.tuning)
    learner.fit(design, times, events, seed=_method_seed(seed, spec.name), n_jobs=n_jobs)
    logger.debug(f'{spec.name} trained in {humanfriendly.format_timespan(time.time() - started)}')
    return learner


def _subset_design(design, ids):
    return replace(design, frame=design.frame.loc[list(ids)])


@dataclass
class FittedPipeline:
    """Mixed models, learners and superlearner weights trained on one landmark cohort."""
    run_config: object
    marker_fits: Dict[str, MixedModelFit]
    learners: Dict[str, object]
    weights: Optional[SuperLearnerWeights] = None
    inner_brier: Dict[str, float] = field(default_factory=dict)
    columns: Tuple[str, ...] = ()

    @property
    def methods(self) -> List[str]:
        names = list(self.learners)
        return names + [SUPERLEARNER] if self.weights is not None else names

    def design(self, cohort):
        missing = sorted(set(self.marker_fits) - set(cohort.longitudinal.markers))
        if missing:
            raise DataError(f'New data has no measurement of marker(s) {", ".join(missing)}')
        return assemble_design(cohort, self.marker_fits, self.run_config.marker)

    def predict(self, cohort) -> pd.DataFrame:
        """Predicted P(event within t_hor) per subject (rows) and method (columns)."""
        frame = self.design(cohort).frame
        out = pd.DataFrame(index=frame.index)
        for name, learner in self.learners.items():
            out[name] = learner.predict(frame, self.run_config.t_hor)
        if self.weights is not None:
            out[SUPERLEARNER] = superlearner_predict(self.weights, out[list(self.weights.methods)].to_numpy())
        return out

    def importance(self):
        return {name: learner.importance() for name, learner in self.learners.items()}

    def to_dict(self):
        return {
            'run_config': self.run_config.to_dict(),
            'marker_fits': {m: fit.to_dict() for m, fit in self.marker_fits.items()},
            'learners': {name: learner.to_dict() for name, learner in self.learners.items()},
            'weights': None if self.weights is None else self.weights.to_dict(),
            'inner_brier': self.inner_brier,
            'columns': list(self.columns),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            run_config=run_config_from_dict(data['run_config']),
            marker_fits={m: MixedModelFit.from_dict(f) for m, f in data['marker_fits'].items()},
            learners={name: load_learner(d) for name, d in data['learners'].items()},
            weights=None if data['weights'] is None else SuperLearnerWeights.from_dict(data['weights']),
            inner_brier=dict(data.get('inner_brier') or {}),
            columns=tuple(data.get('columns') or ()))


def _inner_predictions(learners, design, times, events, ids, inner_folds, t_hor):
    """Out-of-inner-fold predictions of every learner refit with frozen hyperparameters."""
    Z = np.zeros((len(ids), len(learners)))
    for j in range(int(inner_folds.max()) + 1):
        train = inner_folds != j
        test = ~train
        train_design = _subset_design(design, ids[train])
        test_frame = design.frame.loc[list(ids[test])]
        for m, learner in enumerate(learners.values()):
            refit = learner.frozen().fit(train_design, times[train], events[train], seed=j)
            Z[test, m] = refit.predict(test_frame, t_hor)
    return Z


def fit_pipeline(cohort, run_config, seed=None, n_jobs=1, marker_fits=None,
                 inner_folds=None) -> FittedPipeline:
    """Fit Step-1 mixed models, every configured learner and the superlearner weights.

    `inner_folds` (aligned with the cohort sorted by id) drives the
    superlearner's internal cross-validation; learners keep the
    hyperparameters tuned on the whole cohort in that loop.
    """
    seed = run_config.seed if seed is None else seed
    specs = _learner_specs(run_config)
    if marker_fits is None:
        marker_fits = fit_marker_models(cohort, run_config.marker, n_jobs)
    design = assemble_design(cohort, marker_fits, run_config.marker)
    ids = design.frame.index.to_numpy(dtype=object)
    survival = cohort.survival.set_index('id').loc[ids]
    times = survival['time'].to_numpy(dtype=float) - cohort.t_lm
    events = survival['event'].to_numpy(dtype=int)
    if not events.any():
        raise DataError('Training cohort has no event within the horizon')

    fitted = Parallel(n_jobs=n_jobs)(
        delayed(_fit_learner)(spec, run_config, design, times, events, seed) for spec in specs)
    learners = {spec.name: learner for spec, learner in zip(specs, fitted)}

    weights, inner_brier = None, {}
    if SUPERLEARNER in run_config.method_names:
        # fold ids follow the subjects sorted by id
        order = np.argsort(ids.astype(str), kind='mergesort')
        if inner_folds is None:
            inner_folds = _stratified_folds(events[order], run_config.folds.inner,
                                            derive_seed(seed, INNER_STREAM))
        aligned = np.empty(len(ids), dtype=int)
        aligned[order] = np.asarray(inner_folds, dtype=int)
        Z = _inner_predictions(learners, design, times, events, ids, aligned, cohort.t_hor)
        weights = superlearner_weights(Z, times, events, cohort.t_hor, methods=list(learners))
        for m, name in enumerate(learners):
            inner_brier[name] = evaluate(Z[:, m], times, events, cohort.t_hor).brier
        inner_brier[SUPERLEARNER] = weights.brier
        logger.info('Superlearner weights: ' +
                    ', '.join(f'{m}={w:.3f}' for m, w in weights.as_dict().items()))
    return FittedPipeline(run_config=run_config, marker_fits=marker_fits, learners=learners,
                          weights=weights, inner_brier=inner_brier, columns=tuple(design.columns))


@dataclass
class CVResult:
    predictions: pd.DataFrame                 # subject, fold, method, prediction
    metrics: Dict[str, object]                # method -> pooled MetricReport
    fold_metrics: List[dict]
    weights: Dict[int, Dict[str, float]]
    seed: int = 0

    def wide(self) -> pd.DataFrame:
        return self.predictions.pivot(index='subject', columns='method', values='prediction')

    def to_dict(self):
        return {
            'seed': self.seed,
            'pooled': {m: r.to_dict() for m, r in self.metrics.items()},
            'folds': self.fold_metrics,
            'weights': {str(k): w for k, w in self.weights.items()},
        }


def _run_outer_fold(cohort, run_config, plan, k, seed, shared_fits):
    started = time.time()
    train = cohort.subset(plan.train_ids(k))
    test = cohort.subset(plan.test_ids(k) if plan.n_outer > 1 else plan.ids)
    pipeline = fit_pipeline(train, run_config, seed=derive_seed(seed, k), n_jobs=1,
                            marker_fits=shared_fits, inner_folds=plan.inner[k])
    predicted = pipeline.predict(test)
    rows = predicted.reset_index().melt(id_vars='id', var_name='method', value_name='prediction')
    rows = rows.rename(columns={'id': 'subject'})
    rows.insert(1, 'fold', k)
    logger.info(f'Outer fold {k + 1}/{plan.n_outer} done in '
                f'{humanfriendly.format_timespan(time.time() - started)}')
    weights = pipeline.weights.as_dict() if pipeline.weights is not None else None
    return k, rows, weights


def _evaluate_safely(predictions, times, events, t_hor, truth, label):
    try:
        return evaluate(predictions, times, events, t_hor, truth)
    except CensoringWeightError as err:
        logger.warning(f'{label}: {err}')
        return None


def run_pipeline_cv(cohort, run_config, plan: Optional[FoldPlan] = None, n_jobs=1, truth=None,
                    seed=None) -> CVResult:
    """Outer cross-validation of the full pipeline; `truth` maps subject id to the true probability."""
    seed = run_config.seed if seed is None else seed
    plan = plan or make_fold_plan(cohort, run_config.folds.outer, run_config.folds.inner, seed)
    shared_fits = None
    if not run_config.refit_longitudinal:
        shared_fits = fit_marker_models(cohort, run_config.marker, n_jobs)

    results = Parallel(n_jobs=n_jobs)(
        delayed(_run_outer_fold)(cohort, run_config, plan, k, seed, shared_fits)
        for k in tqdm(range(plan.n_outer), desc='outer folds', leave=False))
    predictions = pd.concat([rows for _, rows, _ in results], ignore_index=True)
    weights = {k: w for k, _, w in results if w is not None}

    survival = cohort.survival.set_index('id')
    wide = predictions.pivot(index='subject', columns='method', values='prediction')
    methods = [m for m in run_config.method_names if m in wide.columns]
    wide = wide.loc[sorted(wide.index), methods]
    times = survival.loc[wide.index, 'time'].to_numpy(dtype=float) - cohort.t_lm
    events = survival.loc[wide.index, 'event'].to_numpy(dtype=int)
    true_p = None
    if truth is not None:
        absent = [i for i in wide.index if i not in truth]
        if absent:
            raise DataError(f'No true probability for subject "{absent[0]}"')
        true_p = np.asarray([truth[i] for i in wide.index], dtype=float)

    metrics = {}
    for method in methods:
        report = _evaluate_safely(wide[method].to_numpy(), times, events, cohort.t_hor, true_p, method)
        if report is not None:
            metrics[method] = report

    fold_metrics = []
    folds = predictions.drop_duplicates('subject').set_index('subject')['fold'].loc[wide.index].to_numpy()
    for k in range(plan.n_outer):
        rows = folds == k
        for method in methods:
            report = _evaluate_safely(wide[method].to_numpy()[rows], times[rows], events[rows],
                                      cohort.t_hor, None if true_p is None else true_p[rows],
                                      f'fold {k + 1} {method}')
            if report is not None:
                fold_metrics.append({'fold': k, 'method': method, **report.to_dict()})
    return CVResult(predictions=predictions, metrics=metrics, fold_metrics=fold_metrics,
                    weights=weights, seed=seed)


def _mean_sd(values):
    values = np.asarray([v for v in values if v is not None and np.isfinite(v)], dtype=float)
    if not len(values):
        return {'mean': None, 'sd': None}
    return {'mean': float(values.mean()), 'sd': float(values.std(ddof=1)) if len(values) > 1 else 0.0}


def summarize_metrics(reports_per_replicate: List[Dict[str, object]]) -> Dict[str, dict]:
    """Mean and SD across replicates of every metric of every method."""
    methods = []
    for reports in reports_per_replicate:
        methods.extend(m for m in reports if m not in methods)
    out = {}
    for method in methods:
        reports = [r[method] for r in reports_per_replicate if method in r]
        out[method] = {key: _mean_sd([getattr(r, key) for r in reports])
                       for key in ('brier', 'auc', 'msep')}
        out[method]['replicates'] = len(reports)
    return out


def summarize_weights(weights: List[Dict[str, float]]) -> Dict[str, dict]:
    methods = sorted({m for w in weights for m in w})
    return {m: _mean_sd([w.get(m, 0.0) for w in weights]) for m in methods}


def cohort_from_generated(generated, run_config):
    return landmark_filter(generated.survival_table(), generated.longitudinal_table(),
                           run_config.t_lm, run_config.t_hor,
                           require_all_markers=run_config.require_all_markers,
                           markers=[m.name for m in run_config.markers] or None)


@dataclass
class StudyResult:
    rows: List[dict]
    weights: List[Dict[str, float]]
    summary: Dict[str, dict]

    def to_dict(self):
        return {'replicates': self.rows, 'summary': self.summary,
                'weights': {'per_replicate': self.weights,
                            'summary': summarize_weights(self.weights)}}


def run_simulation_study(run_config, replicates=None, n_jobs=1) -> StudyResult:
    """Train on simulated learning cohorts, evaluate on one external cohort with known truth."""
    replicates = replicates or run_config.replicates
    seed = run_config.seed
    sim = run_config.simulation
    scenario = make_scenario(sim, run_config.t_lm, run_config.t_hor, seed=seed)
    validation = simulate_cohort(replace(scenario, n_subjects=sim.n_validation, seed=derive_seed(seed, 0)),
                                 id_prefix='V')
    if not run_config.markers:
        run_config = run_config.replace(markers=validation.marker_config())
    external = cohort_from_generated(validation, run_config)
    truth = validation.truth.set_index('id').loc[external.ids, 'pi0'].to_numpy()
    times, events = external.times, external.events

    rows, weights, reports = [], [], []
    for r in tqdm(range(replicates), desc='replicates'):
        started = time.time()
        learning = simulate_cohort(replace(scenario, seed=derive_seed(seed, r + 1)))
        cohort = cohort_from_generated(learning, run_config)
        pipeline = fit_pipeline(cohort, run_config, seed=derive_seed(seed, r + 1), n_jobs=n_jobs)
        predicted = pipeline.predict(external).loc[external.ids]
        replicate_reports = {}
        for method in pipeline.methods:
            report = evaluate(predicted[method].to_numpy(), times, events, run_config.t_hor, truth)
            replicate_reports[method] = report
            rows.append({'replicate': r, 'method': method, **report.to_dict()})
        reports.append(replicate_reports)
        if pipeline.weights is not None:
            weights.append(pipeline.weights.as_dict())
        logger.info(f'Replicate {r + 1}/{replicates} done in '
                    f'{humanfriendly.format_timespan(time.time() - started)}')
    return StudyResult(rows=rows, weights=weights, summary=summarize_metrics(reports))
