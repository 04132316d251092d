import logging

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from scipy import linalg
from sklearn.model_selection import KFold, StratifiedKFold

from dynpred.core.errors import (ConfigError, ConvergenceError, DataError,
                                 MonotoneLikelihoodError, SingularDesignError)
from dynpred.core.evalmetrics import StepFunction

logger = logging.getLogger('survreg')

SCORE_TOL = 1e-8
MAX_NEWTON_STEPS = 100
DIVERGENCE_BOUND = 50.0
DRIFT_TOL = 1e-4
CD_TOL = 1e-7
MAX_PASSES = 100000
LAMBDA_MIN_RATIO = 1e-3


class RiskSets:
    """Breslow risk-set sums over subjects sorted by time.

    The risk set of a subject with time t is every subject with time >= t, so
    tied times share one risk set.
    """

    def __init__(self, times, events):
        times = np.asarray(times, dtype=float)
        self.order = np.argsort(times, kind='mergesort')
        self.times = times[self.order]
        self.events = np.asarray(events, dtype=float)[self.order]
        self.first = np.searchsorted(self.times, self.times, side='left')
        self.event_idx = np.flatnonzero(self.events > 0)
        self.n = len(times)
        self.n_events = len(self.event_idx)

    def sort(self, X):
        return np.asarray(X, dtype=float)[self.order]

    def _revcumsum(self, values):
        return np.cumsum(values[::-1], axis=0)[::-1]

    def loglik(self, eta_sorted) -> float:
        top = np.max(eta_sorted) if self.n else 0.0
        w = np.exp(eta_sorted - top)
        S0 = self._revcumsum(w)[self.first[self.event_idx]]
        return float(np.sum(eta_sorted[self.event_idx] - top - np.log(S0)))

    def hazard_weights(self, eta_sorted):
        """Returns exp(eta - top), S0 at each event and the cumulative sum c_j of 1/S0 over events <= t_j."""
        top = np.max(eta_sorted) if self.n else 0.0
        w = np.exp(eta_sorted - top)
        S0 = self._revcumsum(w)[self.first[self.event_idx]]
        jumps = np.zeros(self.n)
        np.add.at(jumps, self.first[self.event_idx], 1.0 / S0)
        return w, S0, np.cumsum(jumps)

    def score_information(self, X_sorted, eta_sorted):
        w, S0, c = self.hazard_weights(eta_sorted)
        wc = w * c
        score = X_sorted[self.event_idx].sum(axis=0) - X_sorted.T @ wc
        S1 = self._revcumsum(w[:, None] * X_sorted)[self.first[self.event_idx]]
        means = S1 / S0[:, None]
        information = (X_sorted * wc[:, None]).T @ X_sorted - means.T @ means
        return score, information

    def coordinate(self, x_sorted, eta_sorted):
        """First and second derivative of -loglik / n along one column."""
        w, S0, c = self.hazard_weights(eta_sorted)
        S1 = self._revcumsum(w * x_sorted)[self.first[self.event_idx]]
        mean = S1 / S0
        grad = -(x_sorted[self.event_idx].sum() - np.sum(w * c * x_sorted)) / self.n
        hess = (np.sum(w * c * x_sorted ** 2) - np.sum(mean ** 2)) / self.n
        return grad, hess

    def breslow(self, eta_sorted) -> StepFunction:
        """Baseline cumulative hazard jumps d_t / sum_{R(t)} exp(eta) at event times."""
        if self.n_events == 0:
            return StepFunction(times=np.array([]), values=np.array([]))
        top = np.max(eta_sorted)
        S0 = self._revcumsum(np.exp(eta_sorted - top))
        event_times, start = np.unique(self.times[self.event_idx], return_index=True)
        counts = np.diff(np.append(start, self.n_events))
        denominators = S0[self.first[self.event_idx][start]] * np.exp(top)
        return StepFunction(times=event_times, values=np.cumsum(counts / denominators))


@dataclass(frozen=True)
class CoxFit:
    columns: Tuple[str, ...]
    coef: np.ndarray
    means: np.ndarray
    sds: np.ndarray
    baseline: StepFunction
    loglik: float
    n_events: int = 0

    @property
    def n_coef(self):
        return len(self.columns)

    @property
    def aic(self):
        return -2.0 * self.loglik + 2.0 * self.n_coef

    def linear_predictor(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if self.n_coef == 0:
            return np.zeros(X.shape[0] if X.ndim == 2 else 1)
        X = X.reshape(-1, self.n_coef)
        return (X - self.means) @ self.coef

    def to_dict(self):
        return {'columns': list(self.columns), 'coef': self.coef.tolist(),
                'means': self.means.tolist(), 'sds': self.sds.tolist(),
                'baseline': self.baseline.to_dict(), 'loglik': self.loglik,
                'n_events': self.n_events}

    @classmethod
    def from_dict(cls, data):
        return cls(columns=tuple(data['columns']), coef=np.asarray(data['coef'], dtype=float),
                   means=np.asarray(data['means'], dtype=float),
                   sds=np.asarray(data['sds'], dtype=float),
                   baseline=StepFunction.from_dict(data['baseline']),
                   loglik=float(data['loglik']), n_events=int(data.get('n_events', 0)))


def as_matrix(design, columns=None):
    """(values, column names) from a DataFrame, or from an array with explicit names."""
    if isinstance(design, pd.DataFrame):
        if columns is not None:
            missing = [c for c in columns if c not in design.columns]
            if missing:
                raise DataError(f'Design is missing column(s) {", ".join(missing)}')
            design = design[list(columns)]
        return design.to_numpy(dtype=float), tuple(design.columns)
    values = np.asarray(design, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if columns is None:
        columns = tuple(f'x{j}' for j in range(values.shape[1]))
    if len(columns) != values.shape[1]:
        raise DataError(f'{values.shape[1]} design columns but {len(columns)} names')
    return values, tuple(columns)


def _standardize(X, columns):
    means = X.mean(axis=0)
    sds = X.std(axis=0)
    for j, sd in enumerate(sds):
        if sd == 0:
            raise SingularDesignError(f'Column "{columns[j]}" is constant; information matrix is singular')
    return (X - means) / sds, means, sds


def _null_fit(risk, n_events):
    eta = np.zeros(risk.n)
    return CoxFit(columns=(), coef=np.zeros(0), means=np.zeros(0), sds=np.zeros(0),
                  baseline=risk.breslow(eta), loglik=risk.loglik(eta), n_events=n_events)


def _final_fit(risk, X, columns, coef, means, sds):
    eta = risk.sort((X - means) @ coef)
    return CoxFit(columns=tuple(columns), coef=coef, means=means, sds=sds,
                  baseline=risk.breslow(eta), loglik=risk.loglik(eta), n_events=risk.n_events)


def fit_cox(design, times, events, columns=None) -> CoxFit:
    """Newton-Raphson maximization of the Breslow partial likelihood."""
    X, columns = as_matrix(design, columns)
    risk = RiskSets(times, events)
    if risk.n_events == 0:
        raise DataError('Cox model needs at least one event')
    if not columns:
        return _null_fit(risk, risk.n_events)

    Xs, means, sds = _standardize(X, columns)
    Xs_sorted = risk.sort(Xs)
    beta = np.zeros(len(columns))
    loglik = risk.loglik(Xs_sorted @ beta)
    for step in range(MAX_NEWTON_STEPS):
        eta = Xs_sorted @ beta
        score, information = risk.score_information(Xs_sorted, eta)
        if np.max(np.abs(score)) < SCORE_TOL:
            # a vanishing score with a non-vanishing Newton step means beta drifts to infinity
            drift = np.abs(np.linalg.lstsq(information, score, rcond=None)[0])
            if drift.max() > DRIFT_TOL:
                raise MonotoneLikelihoodError(columns[int(np.argmax(drift))])
            break
        try:
            cho = linalg.cho_factor(information)
        except linalg.LinAlgError:
            raise SingularDesignError('Cox information matrix is singular')
        if np.linalg.cond(information) > 1e12:
            raise SingularDesignError('Cox information matrix is singular')
        delta = linalg.cho_solve(cho, score)
        for _ in range(30):
            candidate = beta + delta
            new_loglik = risk.loglik(Xs_sorted @ candidate)
            if new_loglik >= loglik - 1e-12:
                break
            delta = delta / 2.0
        beta, loglik = candidate, new_loglik
        worst = int(np.argmax(np.abs(beta)))
        if abs(beta[worst]) > DIVERGENCE_BOUND:
            raise MonotoneLikelihoodError(columns[worst])
    else:
        raise ConvergenceError('Cox Newton-Raphson did not converge', best=beta / sds,
                               gradient_norm=float(np.max(np.abs(score))))
    logger.debug(f'Cox fit on {len(columns)} columns in {step} Newton steps, loglik {loglik:.6f}')
    return _final_fit(risk, X, columns, beta / sds, means, sds)


def collinear_columns(X, columns, tol=1e-8):
    Xs = (X - X.mean(axis=0)) / np.where(X.std(axis=0) > 0, X.std(axis=0), 1.0)
    _, R, pivot = linalg.qr(Xs, mode='economic', pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > tol * diag[0])) if len(diag) and diag[0] > 0 else 0
    return [columns[j] for j in sorted(pivot[rank:])]


def backward_select_cox(design, times, events, columns=None, criterion='aic') -> CoxFit:
    """Greedy backward elimination by AIC, starting from the full (non-collinear) model."""
    if criterion != 'aic':
        raise ConfigError(f'Unsupported selection criterion "{criterion}"')
    X, columns = as_matrix(design, columns)
    frame = pd.DataFrame(X, columns=columns)
    dropped = collinear_columns(X, columns) if columns else []
    if dropped:
        logger.warning(f'Collinear columns removed before backward selection: {dropped}')
    current_columns = [c for c in columns if c not in dropped]
    current = fit_cox(frame[current_columns], times, events)

    while current_columns:
        best = None
        for column in current_columns:
            candidate_columns = [c for c in current_columns if c != column]
            candidate = fit_cox(frame[candidate_columns], times, events)
            if best is None or candidate.aic < best.aic:
                best, best_columns = candidate, candidate_columns
        if best.aic >= current.aic:
            break
        current, current_columns = best, best_columns
    logger.debug(f'Backward selection kept {len(current_columns)} of {len(columns)} columns')
    return current


@dataclass(frozen=True)
class ElasticNetPath:
    alpha: float
    columns: Tuple[str, ...]
    lambdas: np.ndarray
    coefs: np.ndarray
    cv_error: Optional[np.ndarray]
    cv_se: Optional[np.ndarray]
    index_selected: int
    fit: CoxFit
    traces: Tuple[np.ndarray, ...] = field(default=(), compare=False)

    @property
    def lambda_selected(self):
        return float(self.lambdas[self.index_selected])

    @property
    def selected_columns(self):
        return self.fit.columns

    def to_dict(self):
        return {'alpha': self.alpha, 'columns': list(self.columns),
                'lambdas': self.lambdas.tolist(), 'coefs': self.coefs.tolist(),
                'cv_error': None if self.cv_error is None else self.cv_error.tolist(),
                'cv_se': None if self.cv_se is None else self.cv_se.tolist(),
                'index_selected': self.index_selected, 'fit': self.fit.to_dict()}

    @classmethod
    def from_dict(cls, data):
        def array(key):
            return None if data[key] is None else np.asarray(data[key], dtype=float)
        return cls(alpha=float(data['alpha']), columns=tuple(data['columns']),
                   lambdas=array('lambdas'), coefs=array('coefs'),
                   cv_error=array('cv_error'), cv_se=array('cv_se'),
                   index_selected=int(data['index_selected']), fit=CoxFit.from_dict(data['fit']))


def _soft_threshold(z, threshold):
    return np.sign(z) * max(abs(z) - threshold, 0.0)


def _penalty(beta, lam, alpha):
    return lam * (alpha * np.sum(np.abs(beta)) + 0.5 * (1.0 - alpha) * np.sum(beta ** 2))


def lambda_max(Xs, times, events, alpha):
    risk = RiskSets(times, events)
    Xs_sorted = risk.sort(Xs)
    score, _ = risk.score_information(Xs_sorted, np.zeros(risk.n)) if Xs.shape[1] else (np.zeros(0), None)
    return float(np.max(np.abs(score), initial=0.0) / risk.n / max(alpha, 1e-3))


def coxnet_path(Xs, times, events, alpha, lambdas, trace=False):
    """Cyclic coordinate descent with warm starts along `lambdas` on standardized columns.

    Each coordinate takes a proximal Newton step, halved until the penalized
    objective does not increase.
    """
    risk = RiskSets(times, events)
    Xs_sorted = risk.sort(Xs)
    n, p = Xs_sorted.shape
    beta = np.zeros(p)
    eta = np.zeros(n)
    coefs = np.zeros((len(lambdas), p))
    traces = []

    for k, lam in enumerate(lambdas):
        objective = -risk.loglik(eta) / n + _penalty(beta, lam, alpha)
        history = [objective]
        for passes in range(MAX_PASSES):
            max_change = 0.0
            for j in range(p):
                x = Xs_sorted[:, j]
                grad, hess = risk.coordinate(x, eta)
                if hess <= 0:
                    continue
                if beta[j] == 0 and abs(grad) <= lam * alpha:
                    continue
                target = _soft_threshold(hess * beta[j] - grad, lam * alpha) / (hess + lam * (1.0 - alpha))
                delta = target - beta[j]
                if delta == 0:
                    continue
                for _ in range(30):
                    candidate = beta.copy()
                    candidate[j] += delta
                    new_eta = eta + delta * x
                    new_objective = -risk.loglik(new_eta) / n + _penalty(candidate, lam, alpha)
                    if new_objective <= objective:
                        break
                    delta /= 2.0
                else:
                    continue
                beta, eta, objective = candidate, new_eta, new_objective
                max_change = max(max_change, abs(delta) * np.sqrt(hess))
            assert objective <= history[-1], 'coordinate descent objective increased'
            history.append(objective)
            if max_change < CD_TOL:
                break
        else:
            raise ConvergenceError(f'Coordinate descent did not converge at lambda={lam:.4g}', best=beta)
        coefs[k] = beta
        if trace:
            traces.append(np.asarray(history))
    return coefs, traces


def lambda_grid(lam_max, n_lambda=100, min_ratio=LAMBDA_MIN_RATIO):
    if lam_max <= 0:
        return np.zeros(1)
    return np.exp(np.linspace(np.log(lam_max), np.log(lam_max * min_ratio), n_lambda))


def fold_assignment(events, n_folds, seed):
    """Random fold ids; refolds with event stratification when a fold has no event."""
    events = np.asarray(events, dtype=int)
    n = len(events)
    if n_folds > n:
        raise ConfigError(f'{n_folds} folds requested for {n} subjects')
    folds = np.zeros(n, dtype=int)
    for k, (_, test) in enumerate(KFold(n_folds, shuffle=True, random_state=seed).split(events)):
        folds[test] = k
    if all(events[folds == k].sum() > 0 for k in range(n_folds)):
        return folds
    logger.warning('A cross-validation fold has no event, refolding with event stratification')
    if events.sum() < n_folds:
        raise DataError(f'{int(events.sum())} events cannot fill {n_folds} folds')
    for k, (_, test) in enumerate(StratifiedKFold(n_folds, shuffle=True, random_state=seed)
                                  .split(events, events)):
        folds[test] = k
    return folds


def cv_partial_deviance(Xs_all, times, events, folds, fold, coefs):
    """Grouped partial-likelihood deviance of `coefs` rows for held-out `fold`."""
    train = folds != fold
    risk_all = RiskSets(times, events)
    risk_train = RiskSets(times[train], events[train])
    X_all = risk_all.sort(Xs_all)
    X_train = risk_train.sort(Xs_all[train])
    out = np.zeros(len(coefs))
    for k, beta in enumerate(coefs):
        out[k] = -2.0 * (risk_all.loglik(X_all @ beta) - risk_train.loglik(X_train @ beta))
    return out / max(int(np.sum(events[~train])), 1)


def fit_coxnet(design, times, events, alpha=0.5, n_lambda=100, n_folds=10, seed=0,
               columns=None, lambdas: Optional[Sequence[float]] = None, binary=(),
               standardize_binary=True, trace=False) -> ElasticNetPath:
    """Elastic-net Cox path with lambda chosen by K-fold cross-validated deviance.

    `n_folds=0` skips cross-validation and keeps the last lambda of the path.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f'Elastic-net mixing alpha={alpha} outside [0, 1]')
    X, columns = as_matrix(design, columns)
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    if events.sum() == 0:
        raise DataError('Penalized Cox model needs at least one event')

    means = X.mean(axis=0)
    sds = X.std(axis=0)
    if not standardize_binary:
        sds = np.where(np.isin(columns, list(binary)), 1.0, sds)
    sds = np.where(sds > 0, sds, 1.0)
    Xs = (X - means) / sds

    if lambdas is None:
        lambdas = lambda_grid(lambda_max(Xs, times, events, alpha), n_lambda)
    lambdas = np.asarray(lambdas, dtype=float)
    if np.any(np.diff(lambdas) >= 0):
        raise ConfigError('Lambda grid must be strictly decreasing')

    coefs_std, traces = coxnet_path(Xs, times, events, alpha, lambdas, trace=trace)
    cv_error = cv_se = None
    index = len(lambdas) - 1
    if n_folds:
        folds = fold_assignment(events, n_folds, seed)
        per_fold = []
        for fold in range(n_folds):
            train = folds != fold
            fold_Xs = X[train]
            fold_means = fold_Xs.mean(axis=0)
            fold_sds = fold_Xs.std(axis=0)
            fold_sds = np.where(fold_sds > 0, fold_sds, 1.0)
            if not standardize_binary:
                fold_sds = np.where(np.isin(columns, list(binary)), 1.0, fold_sds)
            fold_coefs, _ = coxnet_path((fold_Xs - fold_means) / fold_sds, times[train], events[train],
                                        alpha, lambdas)
            # original column scale
            orig = fold_coefs / fold_sds
            per_fold.append(cv_partial_deviance(X, times, events, folds, fold, orig))
        per_fold = np.asarray(per_fold)
        cv_error = per_fold.mean(axis=0)
        cv_se = per_fold.std(axis=0, ddof=1) / np.sqrt(n_folds) if n_folds > 1 else np.zeros(len(lambdas))
        index = int(np.argmin(cv_error))

    coef = coefs_std[index] / sds
    keep = np.flatnonzero(coef != 0)
    risk = RiskSets(times, events)
    fit = _final_fit(risk, X[:, keep], [columns[j] for j in keep], coef[keep], means[keep], sds[keep])
    logger.debug(f'Elastic net alpha={alpha}: lambda={lambdas[index]:.4g} '
                 f'({index + 1}/{len(lambdas)}), {len(keep)} non-zero coefficients')
    return ElasticNetPath(alpha=alpha, columns=columns, lambdas=lambdas, coefs=coefs_std / sds,
                          cv_error=cv_error, cv_se=cv_se, index_selected=index, fit=fit,
                          traces=tuple(traces))


def predict_cox_probability(fit: CoxFit, rows, t_hor) -> np.ndarray:
    """1 - exp(-Lambda0(t_hor) exp(linear predictor)) for each row."""
    if isinstance(rows, pd.DataFrame):
        missing = [c for c in fit.columns if c not in rows.columns]
        if missing:
            raise DataError(f'New data is missing column(s) {", ".join(missing)}')
        X = rows[list(fit.columns)].to_numpy(dtype=float)
    else:
        X = np.atleast_2d(np.asarray(rows, dtype=float))
        if X.shape[1] != len(fit.columns):
            raise DataError(f'New data has {X.shape[1]} column(s), the model expects {len(fit.columns)}')
    hazard = fit.baseline(t_hor)
    return 1.0 - np.exp(-hazard * np.exp(fit.linear_predictor(X)))
