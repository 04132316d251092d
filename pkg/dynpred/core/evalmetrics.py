import logging

from dataclasses import dataclass
from typing import Optional

import numpy as np

from dynpred.core.errors import CensoringWeightError

logger = logging.getLogger('evalmetrics')


@dataclass(frozen=True)
class StepFunction:
    """Right-continuous step function: `initial` before `times[0]`, `values[k]` on [times[k], times[k+1])."""
    times: np.ndarray
    values: np.ndarray
    initial: float = 0.0

    def __call__(self, t):
        idx = np.searchsorted(self.times, t, side='right') - 1
        return self._lookup(idx)

    def left_limit(self, t):
        idx = np.searchsorted(self.times, t, side='left') - 1
        return self._lookup(idx)

    def _lookup(self, idx):
        idx = np.asarray(idx)
        out = np.where(idx < 0, self.initial, self.values[np.clip(idx, 0, None)] if len(self.values) else self.initial)
        return float(out) if out.ndim == 0 else out

    def to_dict(self):
        return {'times': self.times.tolist(), 'values': self.values.tolist(), 'initial': self.initial}

    @classmethod
    def from_dict(cls, data):
        return cls(times=np.asarray(data['times'], dtype=float),
                   values=np.asarray(data['values'], dtype=float),
                   initial=float(data.get('initial', 0.0)))


@dataclass(frozen=True)
class MetricReport:
    brier: float
    auc: float
    n_at_risk: int
    n_cases: int
    n_controls: int
    msep: Optional[float] = None

    def to_dict(self):
        return {'brier': self.brier, 'auc': None if np.isnan(self.auc) else self.auc,
                'msep': self.msep, 'n_at_risk': self.n_at_risk,
                'n_cases': self.n_cases, 'n_controls': self.n_controls}


def _risk_table(times, events, weights=None):
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=float)
    weights = np.ones_like(times) if weights is None else np.asarray(weights, dtype=float)
    uniq, inverse = np.unique(times, return_inverse=True)
    counts = np.bincount(inverse, weights=weights, minlength=len(uniq))
    n_events = np.bincount(inverse, weights=weights * events, minlength=len(uniq))
    at_risk = np.cumsum(counts[::-1])[::-1]
    return uniq, at_risk, n_events, counts - n_events


def nelson_aalen(times, events, weights=None) -> StepFunction:
    """Cumulative hazard sum_{t_j <= t} d_j / n_j; `weights` are case multiplicities."""
    uniq, at_risk, n_events, _ = _risk_table(times, events, weights)
    keep = n_events > 0
    return StepFunction(times=uniq[keep], values=np.cumsum(n_events[keep] / at_risk[keep]))


def kaplan_meier(times, events) -> StepFunction:
    uniq, at_risk, n_events, _ = _risk_table(times, events)
    keep = n_events > 0
    return StepFunction(times=uniq[keep], values=np.cumprod(1.0 - n_events[keep] / at_risk[keep]),
                        initial=1.0)


def km_censoring(times, events) -> StepFunction:
    """Kaplan-Meier of the censoring distribution (event indicator flipped)."""
    uniq, at_risk, _, n_censored = _risk_table(times, events)
    keep = n_censored > 0
    return StepFunction(times=uniq[keep], values=np.cumprod(1.0 - n_censored[keep] / at_risk[keep]),
                        initial=1.0)


def ipcw_weights(times, events, t_hor, censoring=None):
    """Status D_i at the horizon and its IPCW weight.

    Cases (event by t_hor) get 1/G(T_i-), subjects still at risk after t_hor get
    1/G(t_hor), subjects censored before the horizon get 0.
    """
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    censoring = censoring or km_censoring(times, events)
    cases = (events == 1) & (times <= t_hor)
    controls = times > t_hor

    g_cases = np.atleast_1d(censoring.left_limit(times[cases]))
    g_horizon = censoring(t_hor)
    if np.any(g_cases <= 0) or (controls.any() and g_horizon <= 0):
        raise CensoringWeightError(
            'Censoring survival estimate is 0 where a weight is needed; '
            'use a horizon with more follow-up margin')

    weights = np.zeros(len(times))
    weights[cases] = 1.0 / g_cases
    weights[controls] = 1.0 / g_horizon
    return cases.astype(int), weights


def _check_predictions(predictions, n):
    predictions = np.asarray(predictions, dtype=float)
    if predictions.shape != (n,):
        raise ValueError(f'Expected {n} predictions, got shape {predictions.shape}')
    if np.any(~np.isfinite(predictions)) or np.any(predictions < 0) or np.any(predictions > 1):
        raise ValueError('Predictions must be probabilities in [0, 1]')
    return predictions


def ipcw_brier(predictions, times, events, t_hor) -> float:
    status, weights = ipcw_weights(times, events, t_hor)
    predictions = _check_predictions(predictions, len(status))
    return float(np.mean(weights * (status - predictions) ** 2))


def ipcw_auc(predictions, times, events, t_hor) -> float:
    """IPCW Mann-Whitney AUC of cases (event by t_hor) against controls (at risk after t_hor)."""
    times = np.asarray(times, dtype=float)
    status, weights = ipcw_weights(times, events, t_hor)
    predictions = _check_predictions(predictions, len(status))
    cases = status == 1
    controls = times > t_hor
    if not cases.any() or not controls.any():
        return float('nan')
    diff = np.subtract.outer(predictions[cases], predictions[controls])
    score = (diff > 0) + 0.5 * (diff == 0)
    pair_weights = np.outer(weights[cases], weights[controls])
    return float(np.sum(pair_weights * score) / np.sum(pair_weights))


def msep(predictions, true_probabilities) -> float:
    predictions = np.asarray(predictions, dtype=float)
    true_probabilities = np.asarray(true_probabilities, dtype=float)
    return float(np.mean((predictions - true_probabilities) ** 2))


def evaluate(predictions, times, events, t_hor, true_probabilities=None) -> MetricReport:
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    return MetricReport(
        brier=ipcw_brier(predictions, times, events, t_hor),
        auc=ipcw_auc(predictions, times, events, t_hor),
        n_at_risk=int(len(times)),
        n_cases=int(np.sum((events == 1) & (times <= t_hor))),
        n_controls=int(np.sum(times > t_hor)),
        msep=None if true_probabilities is None else msep(predictions, true_probabilities))
