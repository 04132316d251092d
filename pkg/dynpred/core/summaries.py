import json
import logging

from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

import numpy as np
import pandas as pd

from dynpred.core.errors import DataError
from dynpred.core.longitudinal import MixedModelFit, predict_random_effects

logger = logging.getLogger('summaries')

QUADRATURE_NODES = 64
DEFAULT_SUMMARIES = ('random_effects', 'level', 'slope', 'cumulative')

_nodes, _weights = np.polynomial.legendre.leggauss(QUADRATURE_NODES)


def level_at(fit: MixedModelFit, b, u):
    """Error-free level X(u)'beta + Z(u)'b on the linear-predictor scale; `b` may be (q,) or (n, q)."""
    return _curve(fit, b, u, deriv=0)


def slope_at(fit: MixedModelFit, b, u):
    return _curve(fit, b, u, deriv=1)


def _curve(fit, b, u, deriv):
    u = np.asarray(u, dtype=float)
    centered = np.atleast_1d(u) - fit.origin
    X = fit.basis_fixed.evaluate(centered, deriv)
    fixed = X @ fit.beta
    b = np.asarray(b, dtype=float)
    if fit.q:
        Z = fit.basis_random.evaluate(centered, deriv)
        random = b @ Z.T if b.ndim == 2 else Z @ b
    else:
        random = np.zeros((len(b), len(centered))) if b.ndim == 2 else 0.0
    out = fixed + random
    if u.ndim == 0:
        return out[..., 0] if b.ndim == 2 else float(out[0])
    return out


def cumulative_level(fit: MixedModelFit, b, t_lm, window):
    """Gauss-Legendre integral of the level over [t_lm - window, t_lm]."""
    if window <= 0:
        raise ValueError('Cumulative window must be positive')
    half = 0.5 * window
    u = (t_lm - half) + half * _nodes
    levels = level_at(fit, b, u)
    return half * (levels @ _weights)


SummaryFunction = Callable[..., Tuple[Tuple[str, ...], np.ndarray]]
SUMMARIES: Dict[str, SummaryFunction] = {}


def register_summary(name):
    """Register `f(fit, b, t_lm, window, **options) -> (names, (n, k) values)`."""
    def decorator(function):
        SUMMARIES[name] = function
        return function
    return decorator


@register_summary('random_effects')
def _random_effects(fit, b, t_lm, window, **options):
    return tuple(f'b{j}' for j in range(fit.q)), np.asarray(b, dtype=float).reshape(len(b), fit.q)


@register_summary('level')
def _level(fit, b, t_lm, window, **options):
    return ('level',), level_at(fit, b, t_lm)[:, None]


@register_summary('slope')
def _slope(fit, b, t_lm, window, **options):
    return ('slope',), slope_at(fit, b, t_lm)[:, None]


@register_summary('cumulative')
def _cumulative(fit, b, t_lm, window, **options):
    return ('cumulative',), cumulative_level(fit, b, t_lm, window)[:, None]


@register_summary('time_above')
def _time_above(fit, b, t_lm, window, threshold=0.0, grid=512, **options):
    """Time spent above `threshold` during the window (midpoint rule)."""
    step = window / grid
    u = t_lm - window + step * (np.arange(grid) + 0.5)
    above = level_at(fit, b, u) > threshold
    return ('time_above',), (step * above.sum(axis=1))[:, None]


@dataclass(frozen=True)
class ColumnInfo:
    name: str
    marker: Optional[str]
    kind: str


@dataclass(frozen=True)
class DesignMatrix:
    frame: pd.DataFrame
    provenance: Tuple[ColumnInfo, ...]
    binary: Tuple[str, ...] = ()

    @property
    def columns(self):
        return list(self.frame.columns)

    @property
    def values(self) -> np.ndarray:
        return self.frame.to_numpy(dtype=float)

    @property
    def ids(self):
        return self.frame.index.to_numpy(dtype=object)

    @property
    def means(self):
        return self.frame.mean(axis=0).to_numpy()

    @property
    def sds(self):
        return self.frame.std(axis=0, ddof=0).to_numpy()

    @property
    def gamma_columns(self):
        return [c.name for c in self.provenance if c.marker is not None]

    @property
    def covariate_columns(self):
        return [c.name for c in self.provenance if c.marker is None]

    def provenance_dict(self):
        return {c.name: {'marker': c.marker, 'summary': c.kind,
                         'binary': c.name in self.binary} for c in self.provenance}


def subject_random_effects(fit: MixedModelFit, series, ids) -> np.ndarray:
    """(n, q) predicted random effects; subjects without measurements get the prior mean 0."""
    out = np.zeros((len(ids), fit.q))
    for k, subject_id in enumerate(ids):
        if subject_id in series:
            times, values = series[subject_id]
            out[k] = predict_random_effects(fit, times, values)
    return out


def marker_summaries(fit: MixedModelFit, b, t_lm, summaries=DEFAULT_SUMMARIES, options=None):
    options = dict(options or {})
    window = fit.window or t_lm
    names, blocks = [], []
    for summary in summaries:
        if summary not in SUMMARIES:
            raise DataError(f'Unknown summary "{summary}"')
        kinds, values = SUMMARIES[summary](fit, b, t_lm, window, **options)
        names.extend(kinds)
        blocks.append(values)
    values = np.hstack(blocks) if blocks else np.zeros((len(b), 0))
    return names, values


def assemble_design(cohort, fits: Dict[str, MixedModelFit], marker_specs=None) -> DesignMatrix:
    """Concatenate per-marker summary vectors and baseline covariates, one row per subject."""
    ids = cohort.ids
    columns, provenance, blocks = [], [], []
    for marker in sorted(fits):
        fit = fits[marker]
        spec = marker_specs(marker) if marker_specs else None
        summaries = spec.summaries if spec else DEFAULT_SUMMARIES
        options = dict(spec.summary_options) if spec else {}
        b = subject_random_effects(fit, cohort.longitudinal.series(marker), ids)
        kinds, values = marker_summaries(fit, b, cohort.t_lm, summaries, options)
        for kind in kinds:
            columns.append(f'{marker}.{kind}')
            provenance.append(ColumnInfo(name=f'{marker}.{kind}', marker=marker, kind=kind))
        blocks.append(values)

    covariates = cohort.covariate_frame().loc[ids]
    for name in cohort.covariates:
        columns.append(name)
        provenance.append(ColumnInfo(name=name, marker=None, kind='covariate'))
    blocks.append(covariates.to_numpy(dtype=float))

    seen = set()
    for name in columns:
        if name in seen:
            raise DataError(f'Duplicate design column "{name}"')
        seen.add(name)

    frame = pd.DataFrame(np.hstack(blocks), index=pd.Index(ids, name='id'), columns=columns)
    logger.debug(f'Design matrix {frame.shape[0]} x {frame.shape[1]}')
    return DesignMatrix(frame=frame, provenance=tuple(provenance),
                        binary=tuple(c for c in cohort.binary_covariates))


def export_design(design: DesignMatrix, csv_path):
    """Write the matrix to CSV and the column provenance to `<csv_path>.json`."""
    design.frame.to_csv(csv_path, float_format='%.17g')
    with open(f'{csv_path}.json', 'w') as f:
        json.dump(design.provenance_dict(), f, indent=4, sort_keys=True)
