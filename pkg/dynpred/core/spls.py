import logging

from dataclasses import dataclass
from typing import Tuple

import numpy as np
import pandas as pd

from dynpred.core.errors import ConfigError, DataError, NumericalError
from dynpred.core.evalmetrics import nelson_aalen
from dynpred.core.survreg import (CoxFit, RiskSets, as_matrix, fit_cox, fold_assignment,
                                  predict_cox_probability)

logger = logging.getLogger('spls')

ETA_MODES = {
    'none': (0.0,),
    'max': (0.99,),
    'grid': (0.0, 0.2, 0.4, 0.6, 0.8),
}


def deviance_residuals(times, events) -> np.ndarray:
    """sign(M) sqrt(-2[M + d log(d - M)]) with martingale residuals M = d - Lambda_NA(t)."""
    events = np.asarray(events, dtype=float)
    if events.sum() == 0:
        raise DataError('Deviance residuals need at least one event')
    martingale = martingale_residuals(times, events)
    log_term = np.zeros_like(martingale)
    cases = events == 1
    # d - M is the Nelson-Aalen hazard, positive at event times
    log_term[cases] = np.log(events[cases] - martingale[cases])
    inside = np.maximum(-2.0 * (martingale + events * log_term), 0.0)
    return np.sign(martingale) * np.sqrt(inside)


def martingale_residuals(times, events) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=float)
    return events - nelson_aalen(times, events)(times)


@dataclass(frozen=True)
class SplsDirections:
    weights: np.ndarray      # (p, C), unit norm columns
    loadings: np.ndarray     # (p, C)
    scores: np.ndarray       # (n, C), mutually orthogonal

    @property
    def n_components(self):
        return self.weights.shape[1]

    def rotation(self, n_components=None):
        """R with scores = X R for the first `n_components` components."""
        c = self.n_components if n_components is None else n_components
        W = self.weights[:, :c]
        P = self.loadings[:, :c]
        return W @ np.linalg.inv(P.T @ W)


def _soft_threshold(z, threshold):
    return np.sign(z) * np.maximum(np.abs(z) - threshold, 0.0)


def fit_spls(X, y, n_components, eta=0.0) -> SplsDirections:
    """Sparse PLS1 directions with X deflated on each component's scores."""
    if not 0.0 <= eta < 1.0:
        raise ConfigError(f'Sparsity eta={eta} outside [0, 1)')
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    Xk = X.copy()
    weights, loadings, scores = [], [], []
    for c in range(n_components):
        z = Xk.T @ y
        top = np.max(np.abs(z), initial=0.0)
        w = _soft_threshold(z, eta * top)
        norm = np.linalg.norm(w)
        t = Xk @ w / norm if norm > 0 else np.zeros(n)
        tt = t @ t
        if norm == 0 or tt <= 1e-12 * n:
            logger.warning(f'Component {c + 1} has a zero direction, keeping {c} component(s)')
            break
        w = w / norm
        loading = Xk.T @ t / tt
        Xk = Xk - np.outer(t, loading)
        weights.append(w)
        loadings.append(loading)
        scores.append(t)
    if not weights:
        raise NumericalError('sPLS extracted no component')
    return SplsDirections(weights=np.column_stack(weights), loadings=np.column_stack(loadings),
                          scores=np.column_stack(scores))


def _component_names(c):
    return tuple(f'comp{k + 1}' for k in range(c))


@dataclass(frozen=True)
class SplsDrFit:
    columns: Tuple[str, ...]
    means: np.ndarray
    sds: np.ndarray
    weights: np.ndarray
    rotation: np.ndarray
    eta: float
    cox: CoxFit

    @property
    def n_components(self):
        return self.rotation.shape[1]

    @property
    def selected_columns(self):
        """Columns with a non-zero weight in at least one component."""
        used = np.any(self.weights != 0, axis=1)
        return tuple(c for c, u in zip(self.columns, used) if u)

    def scores(self, rows) -> np.ndarray:
        X, _ = as_matrix(rows, self.columns) if isinstance(rows, pd.DataFrame) else (rows, None)
        X = np.asarray(X, dtype=float).reshape(-1, len(self.columns))
        return ((X - self.means) / self.sds) @ self.rotation

    def predict(self, rows, t_hor) -> np.ndarray:
        return predict_cox_probability(self.cox, self.scores(rows), t_hor)

    def to_dict(self):
        return {'columns': list(self.columns), 'means': self.means.tolist(),
                'sds': self.sds.tolist(), 'weights': self.weights.tolist(),
                'rotation': self.rotation.tolist(), 'eta': self.eta, 'cox': self.cox.to_dict()}

    @classmethod
    def from_dict(cls, data):
        p = len(data['columns'])
        return cls(columns=tuple(data['columns']), means=np.asarray(data['means'], dtype=float),
                   sds=np.asarray(data['sds'], dtype=float),
                   weights=np.asarray(data['weights'], dtype=float).reshape(p, -1),
                   rotation=np.asarray(data['rotation'], dtype=float).reshape(p, -1),
                   eta=float(data['eta']), cox=CoxFit.from_dict(data['cox']))


def _fit_directions(X, times, events, n_components, eta):
    means = X.mean(axis=0)
    sds = X.std(axis=0)
    sds = np.where(sds > 0, sds, 1.0)
    directions = fit_spls((X - means) / sds, deviance_residuals(times, events), n_components, eta)
    return means, sds, directions


def _fold_deviances(X, times, events, folds, fold, max_components, eta):
    """CV deviance of the inner Cox model for C = 1..max_components on one held-out fold."""
    train = folds != fold
    out = np.full(max_components, np.inf)
    try:
        means, sds, directions = _fit_directions(X[train], times[train], events[train],
                                                 max_components, eta)
    except (NumericalError, DataError) as err:
        logger.debug(f'Fold {fold} eta={eta}: {err}')
        return out
    n_events = max(int(events[~train].sum()), 1)
    Xs = (X - means) / sds
    risk_all = RiskSets(times, events)
    risk_train = RiskSets(times[train], events[train])
    for c in range(1, directions.n_components + 1):
        scores = Xs @ directions.rotation(c)
        try:
            cox = fit_cox(scores[train], times[train], events[train], columns=_component_names(c))
        except NumericalError as err:
            logger.debug(f'Fold {fold} eta={eta} C={c}: {err}')
            continue
        eta_all = risk_all.sort(scores @ cox.coef)
        eta_train = risk_train.sort(scores[train] @ cox.coef)
        out[c - 1] = -2.0 * (risk_all.loglik(eta_all) - risk_train.loglik(eta_train)) / n_events
    return out


def fit_spls_dr(design, times, events, eta_mode='none', max_components=6, n_folds=10, seed=0,
                columns=None) -> SplsDrFit:
    """sPLS on deviance residuals, then Cox on the component scores.

    The number of components (and eta for the 'grid' mode) minimizes the
    K-fold cross-validated partial-likelihood deviance; ties go to fewer
    components.
    """
    if eta_mode not in ETA_MODES:
        raise ConfigError(f'Unknown eta mode "{eta_mode}"; expected one of {", ".join(ETA_MODES)}')
    if max_components < 1:
        raise ConfigError('max_components must be >= 1')
    X, columns = as_matrix(design, columns)
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    if n_folds > len(times):
        raise ConfigError(f'{n_folds} folds requested for {len(times)} subjects')

    varying = X.std(axis=0) > 0
    if not varying.all():
        logger.info(f'Zero-variance columns left out of sPLS: '
                    f'{[c for c, v in zip(columns, varying) if not v]}')
        X = X[:, varying]
        columns = tuple(c for c, v in zip(columns, varying) if v)
    if not columns:
        raise DataError('No column with non-zero variance for sPLS')
    max_components = min(max_components, len(columns))

    folds = fold_assignment(events, n_folds, seed)
    best = None
    for eta in ETA_MODES[eta_mode]:
        errors = np.mean([_fold_deviances(X, times, events, folds, k, max_components, eta)
                          for k in range(n_folds)], axis=0)
        for c, error in enumerate(errors, start=1):
            logger.debug(f'sPLS eta={eta} C={c}: CV deviance {error:.6f}')
            if best is None or (error, c) < (best[0], best[1]):
                best = (error, c, eta)
    error, n_components, eta = best
    if not np.isfinite(error):
        raise NumericalError('sPLS-DR: no component count gave a finite CV deviance')
    return _fit_final(X, times, events, columns, n_components, eta)


def refit_spls_dr(design, times, events, n_components, eta, columns=None) -> SplsDrFit:
    """sPLS-DR with a fixed number of components and sparsity, no cross-validation."""
    X, columns = as_matrix(design, columns)
    varying = X.std(axis=0) > 0
    X = X[:, varying]
    columns = tuple(c for c, v in zip(columns, varying) if v)
    if not columns:
        raise DataError('No column with non-zero variance for sPLS')
    return _fit_final(X, np.asarray(times, dtype=float), np.asarray(events, dtype=int), columns,
                      min(n_components, len(columns)), eta)


def _fit_final(X, times, events, columns, n_components, eta):
    means, sds, directions = _fit_directions(X, times, events, n_components, eta)
    rotation = directions.rotation()
    scores = ((X - means) / sds) @ rotation
    cox = fit_cox(scores, times, events, columns=_component_names(directions.n_components))
    logger.debug(f'sPLS-DR: {directions.n_components} component(s), eta={eta}')
    return SplsDrFit(columns=columns, means=means, sds=sds, weights=directions.weights,
                     rotation=rotation, eta=eta, cox=cox)
