"""Synthetic landmark cohorts with known conditional event probabilities.

Trajectory shapes, fixed effects, Weibull parameters and coefficient values
are reconstructed defaults; the manifest written next to every cohort labels
them as such.
"""
import json
import logging
import math

from dataclasses import asdict, dataclass, field
from itertools import combinations
from os import path
from typing import List, Tuple

import numpy as np
import pandas as pd

from dynpred.core.dataset import LongitudinalTable, SurvivalTable
from dynpred.core.errors import ConfigError

logger = logging.getLogger('simgen')

DESIGN_SEED = 20210615
# random-effect dimension q per marker: 4 intercept-only, 5 linear, 5 quadratic, 3 cubic
MARKER_Q = (1,) * 4 + (2,) * 5 + (3,) * 5 + (4,) * 3
RANDOM_SDS = (1.0, 0.5, 0.2, 0.05)
INTERCEPT_SLOPE_CORRELATION = 0.3
NOISE_SD = 0.5
VISITS = (-4.0, -3.0, -2.0, -1.0, 0.0)
VISIT_JITTER = 0.15
N_CONTINUOUS = 5
N_BINARY = 5
NULL_PROBABILITY = 0.35
TRANSFORMS = ('square', 'cube', 'indicator')


@dataclass(frozen=True)
class MarkerDesign:
    name: str
    beta: Tuple[float, ...]
    B: Tuple[Tuple[float, ...], ...]

    @property
    def q(self):
        return len(self.beta)

    @property
    def summary_names(self):
        return tuple(f'b{j}' for j in range(self.q)) + ('level', 'slope', 'cumulative')

    def summary_map(self, window):
        """(a, A) with summaries = a + A b for random effects b."""
        q = self.q
        beta = np.asarray(self.beta)
        level = np.eye(q)[0]
        slope = np.eye(q)[1] if q > 1 else np.zeros(q)
        cumulative = np.array([(-1.0) ** d * window ** (d + 1) / (d + 1) for d in range(q)])
        A = np.vstack([np.eye(q), level, slope, cumulative])
        return A @ beta - np.concatenate([beta, np.zeros(3)]), A


def marker_designs() -> List[MarkerDesign]:
    """The fixed 17-marker design; polynomial of degree q-1 in time since landmark."""
    rng = np.random.default_rng(DESIGN_SEED)
    designs = []
    for k, q in enumerate(MARKER_Q):
        beta = [rng.normal(0.0, 1.0)] + [rng.normal(0.0, 1.0 / (2.0 * 4.0 ** (d - 1))) for d in range(1, q)]
        sds = np.asarray(RANDOM_SDS[:q])
        corr = np.eye(q)
        if q > 1:
            corr[0, 1] = corr[1, 0] = INTERCEPT_SLOPE_CORRELATION
        B = corr * np.outer(sds, sds)
        designs.append(MarkerDesign(name=f'y{k + 1:02d}', beta=tuple(beta),
                                    B=tuple(tuple(row) for row in B)))
    return designs


def weibull_scale(shape, t_lm, t_hor, probability=NULL_PROBABILITY):
    """Scale giving `probability` of an event within the horizon at risk score 0."""
    return ((((t_lm + t_hor) ** shape - t_lm ** shape) / -math.log(1.0 - probability)) ** (1.0 / shape))


@dataclass(frozen=True)
class ScenarioSpec:
    """Resolved generator parameters; `make_scenario` fills them from a run config."""
    n_subjects: int = 500
    t_lm: float = 4.0
    t_hor: float = 3.0
    link: str = 'linear'
    active: Tuple[int, ...] = ()
    coefficients: Tuple[float, ...] = ()
    center: Tuple[float, ...] = ()
    spread: Tuple[float, ...] = ()
    transforms: Tuple[str, ...] = ()
    interactions: Tuple[Tuple[int, int], ...] = ()
    interaction_coefficients: Tuple[float, ...] = ()
    covariate_coefficients: Tuple[float, ...] = (0.0,) * (N_CONTINUOUS + N_BINARY)
    shape: float = 1.5
    scale: float = 1.0
    censoring_rate: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.shape <= 0 or self.scale <= 0:
            raise ConfigError('Weibull shape and scale must be positive')
        if self.link not in ('linear', 'interactions', 'nonlinear'):
            raise ConfigError(f'Unknown scenario link "{self.link}"')
        if not len(self.active) == len(self.coefficients) == len(self.center) == len(self.spread):
            raise ConfigError('Active summaries, coefficients and standardization must have equal length')
        if self.link == 'nonlinear' and len(self.transforms) != len(self.active):
            raise ConfigError('Nonlinear link needs one transform per active summary')
        if not 0 < self.censoring_rate <= 1:
            raise ConfigError('censoring_rate must be in (0, 1]')


def summary_columns(designs=None) -> List[str]:
    designs = designs or marker_designs()
    return [f'{d.name}.{s}' for d in designs for s in d.summary_names]


def summary_moments(designs, window):
    """Exact mean and SD of every true summary column."""
    means, sds = [], []
    for design in designs:
        a, A = design.summary_map(window)
        means.append(a)
        sds.append(np.sqrt(np.diag(A @ np.asarray(design.B) @ A.T)))
    return np.concatenate(means), np.concatenate(sds)


def make_scenario(simulation, t_lm, t_hor, seed=0, effect_size=0.8, covariate_effect=0.2) -> ScenarioSpec:
    """Draw active summaries, signs and transforms from `seed` for a `SimulationSpec`."""
    designs = marker_designs()
    means, sds = summary_moments(designs, t_lm)
    rng = np.random.default_rng([seed, 1])
    candidates = np.flatnonzero(sds > 0)
    if simulation.n_active > len(candidates):
        raise ConfigError(f'Only {len(candidates)} summaries vary across subjects')
    active = np.sort(rng.choice(candidates, simulation.n_active, replace=False))
    magnitude = effect_size / math.sqrt(simulation.n_active)
    coefficients = magnitude * rng.choice([-1.0, 1.0], simulation.n_active)
    transforms = tuple(rng.choice(TRANSFORMS, simulation.n_active)) if simulation.link == 'nonlinear' else ()
    interactions, interaction_coefficients = (), ()
    if simulation.link == 'interactions':
        interactions = tuple(combinations(range(simulation.n_active // 2), 2))
        interaction_coefficients = tuple(magnitude * rng.choice([-1.0, 1.0], len(interactions)))
    n_covariates = N_CONTINUOUS + N_BINARY
    covariate_coefficients = covariate_effect * np.where(np.arange(n_covariates) % 2 == 0, 1.0, -1.0)
    scale = simulation.scale or weibull_scale(simulation.shape, t_lm, t_hor)
    return ScenarioSpec(
        n_subjects=simulation.n_subjects, t_lm=t_lm, t_hor=t_hor, link=simulation.link,
        active=tuple(int(a) for a in active), coefficients=tuple(float(c) for c in coefficients),
        center=tuple(float(means[a]) for a in active), spread=tuple(float(sds[a]) for a in active),
        transforms=tuple(str(t) for t in transforms), interactions=interactions,
        interaction_coefficients=tuple(float(c) for c in interaction_coefficients),
        covariate_coefficients=tuple(float(c) for c in covariate_coefficients),
        shape=simulation.shape, scale=scale, censoring_rate=simulation.censoring_rate, seed=seed)


def _transform(z, kind):
    if kind == 'square':
        return z ** 2 - 1.0
    if kind == 'cube':
        return z ** 3
    if kind == 'indicator':
        return (z > 0).astype(float)
    raise ConfigError(f'Unknown transform "{kind}"')


def standardized_covariates(x0):
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    out = x0.copy()
    out[:, N_CONTINUOUS:] = (x0[:, N_CONTINUOUS:] - 0.5) / 0.5
    return out


def scenario_link(gamma0, x0, spec: ScenarioSpec) -> np.ndarray:
    """Risk score of each subject from true summaries and covariates."""
    gamma0 = np.atleast_2d(np.asarray(gamma0, dtype=float))
    n = gamma0.shape[0]
    eta = np.zeros(n)
    if spec.active:
        z = (gamma0[:, list(spec.active)] - np.asarray(spec.center)) / np.asarray(spec.spread)
        if spec.link == 'nonlinear':
            z = np.column_stack([_transform(z[:, k], kind) for k, kind in enumerate(spec.transforms)])
            eta = eta + z @ np.asarray(spec.coefficients)
        else:
            eta = eta + z @ np.asarray(spec.coefficients)
            for (a, b), coef in zip(spec.interactions, spec.interaction_coefficients):
                eta = eta + coef * z[:, a] * z[:, b]
    if x0 is not None and any(spec.covariate_coefficients):
        eta = eta + standardized_covariates(x0) @ np.asarray(spec.covariate_coefficients)
    return eta


def true_probability(spec: ScenarioSpec, eta):
    """P(T <= t_lm + t_hor | T > t_lm, eta) under the Weibull proportional hazards model."""
    eta = np.asarray(eta, dtype=float)
    increment = ((spec.t_lm + spec.t_hor) ** spec.shape - spec.t_lm ** spec.shape) / spec.scale ** spec.shape
    return -np.expm1(-increment * np.exp(eta))


@dataclass(frozen=True)
class GeneratedCohort:
    spec: ScenarioSpec
    survival: pd.DataFrame
    longitudinal: pd.DataFrame
    gamma0: pd.DataFrame
    x0: pd.DataFrame
    truth: pd.DataFrame
    markers: Tuple[MarkerDesign, ...] = field(default=(), repr=False)

    @property
    def eta(self):
        return self.truth['eta'].to_numpy()

    @property
    def pi0(self):
        return self.truth['pi0'].to_numpy()

    def survival_table(self) -> SurvivalTable:
        return SurvivalTable(frame=self.survival.copy(), covariates=tuple(self.x0.columns))

    def longitudinal_table(self) -> LongitudinalTable:
        return LongitudinalTable(frame=self.longitudinal.copy(),
                                 natures={m.name: 'continuous' for m in self.markers})

    def marker_config(self):
        """Run-config marker block matching the generating polynomials."""
        return {m.name: {'nature': 'continuous',
                         'fixed': {'kind': 'poly', 'degree': m.q - 1},
                         'random': {'kind': 'poly', 'degree': m.q - 1},
                         'window': self.spec.t_lm}
                for m in self.markers}

    def manifest(self):
        names = summary_columns(self.markers)
        return {
            'generator': 'dynpred.simgen',
            'note': 'trajectory shapes, effects and Weibull parameters are reconstructed defaults',
            'scenario': asdict(self.spec),
            'active_summaries': [names[a] for a in self.spec.active],
            'markers': [{'name': m.name, 'beta': list(m.beta), 'B': [list(r) for r in m.B]}
                        for m in self.markers],
            'marker_config': self.marker_config(),
            'noise_sd': NOISE_SD,
            'visits': list(VISITS),
            'visit_jitter': VISIT_JITTER,
            'n_subjects': len(self.survival),
            'n_events': int(self.survival['event'].sum()),
        }

    def write(self, directory):
        files = {
            'survival': path.join(directory, 'survival.csv'),
            'longitudinal': path.join(directory, 'longitudinal.csv'),
            'truth': path.join(directory, 'truth.csv'),
            'manifest': path.join(directory, 'manifest.json'),
        }
        self.survival.to_csv(files['survival'], index=False, float_format='%.10g')
        self.longitudinal.to_csv(files['longitudinal'], index=False, float_format='%.10g')
        self.truth.to_csv(files['truth'], index=False, float_format='%.12g')
        with open(files['manifest'], 'w') as f:
            json.dump(self.manifest(), f, indent=4, sort_keys=True)
        logger.info(f'Wrote simulated cohort of {len(self.survival)} subjects to {directory}')
        return files


def simulate_cohort(spec: ScenarioSpec, id_prefix='S') -> GeneratedCohort:
    """Subjects at risk at t_lm with marker histories, outcomes and true probabilities."""
    designs = marker_designs()
    rng = np.random.default_rng([spec.seed, 2])
    n = spec.n_subjects
    ids = [f'{id_prefix}{i + 1:05d}' for i in range(n)]

    # visit times on the study clock, shared by all markers of a subject
    offsets = np.asarray(VISITS)[None, :] + rng.normal(0.0, VISIT_JITTER, (n, len(VISITS)))
    visit_times = np.minimum(spec.t_lm + offsets, spec.t_lm)
    visit_times.sort(axis=1)

    gamma_blocks, records = [], []
    for design in designs:
        b = rng.multivariate_normal(np.zeros(design.q), np.asarray(design.B), size=n)
        a, A = design.summary_map(spec.t_lm)
        gamma_blocks.append(a + b @ A.T)
        coefs = np.asarray(design.beta) + b
        s = visit_times - spec.t_lm
        powers = s[:, :, None] ** np.arange(design.q)[None, None, :]
        values = np.einsum('nvd,nd->nv', powers, coefs) + rng.normal(0.0, NOISE_SD, s.shape)
        records.append(pd.DataFrame({
            'id': np.repeat(ids, len(VISITS)),
            'marker': design.name,
            'time': visit_times.ravel(),
            'value': values.ravel(),
        }))
    gamma0 = pd.DataFrame(np.hstack(gamma_blocks), index=pd.Index(ids, name='id'),
                          columns=summary_columns(designs))

    x_cont = rng.normal(0.0, 1.0, (n, N_CONTINUOUS))
    x_bin = rng.binomial(1, 0.5, (n, N_BINARY)).astype(float)
    x0 = pd.DataFrame(np.hstack([x_cont, x_bin]), index=pd.Index(ids, name='id'),
                      columns=[f'x{k + 1}' for k in range(N_CONTINUOUS + N_BINARY)])

    eta = scenario_link(gamma0.to_numpy(), x0.to_numpy(), spec)
    exceed = rng.exponential(1.0, n)
    event_times = spec.scale * ((spec.t_lm / spec.scale) ** spec.shape
                                + exceed * np.exp(-eta)) ** (1.0 / spec.shape)
    censor_times = spec.t_lm + rng.uniform(0.0, spec.t_hor / spec.censoring_rate, n)
    observed = np.minimum(event_times, censor_times)
    events = (event_times <= censor_times).astype(int)

    survival = pd.DataFrame({'id': ids, 'time': observed, 'event': events})
    survival = pd.concat([survival, x0.reset_index(drop=True)], axis=1)
    longitudinal = (pd.concat(records, ignore_index=True)
                    .sort_values(['id', 'marker', 'time'], kind='mergesort')
                    .reset_index(drop=True))
    truth = pd.DataFrame({'id': ids, 'eta': eta, 'pi0': true_probability(spec, eta)})
    logger.debug(f'Simulated {n} subjects: {int(events.sum())} events, mean pi0 {truth["pi0"].mean():.3f}')
    return GeneratedCohort(spec=spec, survival=survival, longitudinal=longitudinal, gamma0=gamma0,
                           x0=x0, truth=truth, markers=tuple(designs))
