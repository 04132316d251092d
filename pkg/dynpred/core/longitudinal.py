import logging

from collections import defaultdict
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from joblib import Parallel, delayed
from scipy import optimize
from scipy.special import expit

from dynpred.core.errors import (ConvergenceError, DataError, SeparationError,
                                 SingularDesignError)

logger = logging.getLogger('longitudinal')

MAX_ITERATIONS = 500
GRADIENT_TOL = 1e-5
LOGLIK_RTOL = 1e-8
SIGMA2_FLOOR = 1e-10
LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class BasisSpec:
    """Basis of a function of (centered) time.

    kind 'poly': 1, t, ..., t^degree. kind 'ns': natural cubic spline with an
    intercept column, linear beyond the boundary knots (truncated-power form).
    """
    kind: str = 'poly'
    degree: int = 1
    knots: Tuple[float, ...] = ()
    boundary: Tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.kind not in ('poly', 'ns'):
            raise ValueError(f'Unknown basis kind "{self.kind}"')
        if self.kind == 'poly' and self.degree < 0:
            raise ValueError('Polynomial degree must be >= 0')
        if self.kind == 'ns':
            knots = np.asarray(self.knots, dtype=float)
            if np.any(np.diff(knots) <= 0):
                raise ValueError('Interior knots must be strictly increasing')
            lo, hi = self.boundary
            if not lo < hi:
                raise ValueError('Boundary knots must be increasing')
            if len(knots) and (knots[0] <= lo or knots[-1] >= hi):
                raise ValueError('Boundary knots must bracket the interior knots')

    @property
    def n_columns(self):
        if self.kind == 'poly':
            return self.degree + 1
        return len(self.knots) + 2

    def evaluate(self, t, deriv=0) -> np.ndarray:
        """(len(t), n_columns) matrix of basis values or their `deriv`-th derivative."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if self.kind == 'poly':
            return _polynomial(t, self.degree, deriv)
        return _natural_spline(t, self.knots, self.boundary, deriv)

    def to_dict(self):
        return {'kind': self.kind, 'degree': self.degree,
                'knots': list(self.knots), 'boundary': list(self.boundary)}

    @classmethod
    def from_dict(cls, data):
        if data is None:
            return None
        return cls(kind=data['kind'], degree=int(data['degree']),
                   knots=tuple(data['knots']), boundary=tuple(data['boundary']))


def _polynomial(t, degree, deriv):
    out = np.zeros((len(t), degree + 1))
    for power in range(deriv, degree + 1):
        coef = np.prod(np.arange(power - deriv + 1, power + 1)) if deriv else 1.0
        out[:, power] = coef * t ** (power - deriv)
    return out


def _truncated_cube(t, knot, deriv):
    base = np.clip(t - knot, 0.0, None)
    if deriv == 0:
        return base ** 3
    if deriv == 1:
        return 3.0 * base ** 2
    if deriv == 2:
        return 6.0 * base
    return 6.0 * (t > knot)


def _natural_spline(t, knots, boundary, deriv):
    all_knots = np.concatenate([[boundary[0]], np.asarray(knots, dtype=float), [boundary[1]]])
    last = all_knots[-1]

    def d(k):
        return (_truncated_cube(t, all_knots[k], deriv) - _truncated_cube(t, last, deriv)) / (last - all_knots[k])

    columns = _polynomial(t, 1, deriv).T.tolist()
    d_penultimate = d(len(all_knots) - 2)
    for k in range(len(all_knots) - 2):
        columns.append(d(k) - d_penultimate)
    return np.column_stack(columns)


def natural_spline_basis(t, spec: BasisSpec, deriv=0) -> np.ndarray:
    values = spec.evaluate(t, deriv)
    return values[0] if np.ndim(t) == 0 else values


def default_basis(config, centered_times) -> BasisSpec:
    """Natural spline with knots at history tertiles, or the configured basis."""
    if config is None:
        return None
    if config.kind == 'poly':
        return BasisSpec(kind='poly', degree=config.degree)
    times = np.asarray(centered_times, dtype=float)
    boundary = config.boundary or (float(times.min()), float(times.max()))
    knots = config.knots
    if knots is None:
        knots = tuple(float(k) for k in np.unique(np.quantile(times, [1 / 3, 2 / 3])))
        knots = tuple(k for k in knots if boundary[0] < k < boundary[1])
    if not boundary[0] < boundary[1]:
        logger.warning('History times are all equal, using an intercept-only basis')
        return BasisSpec(kind='poly', degree=0)
    return BasisSpec(kind='ns', knots=tuple(knots), boundary=tuple(boundary))


@dataclass(frozen=True)
class MixedModelFit:
    marker: str
    link: str
    beta: np.ndarray
    chol: np.ndarray
    sigma2: Optional[float]
    basis_fixed: BasisSpec
    basis_random: Optional[BasisSpec]
    loglik: float
    origin: float = 0.0
    window: Optional[float] = None
    n_subjects: int = 0

    @property
    def B(self) -> np.ndarray:
        return self.chol @ self.chol.T

    @property
    def q(self):
        return 0 if self.basis_random is None else self.basis_random.n_columns

    def design(self, t):
        """Fixed and random design rows at study times `t`."""
        centered = np.atleast_1d(np.asarray(t, dtype=float)) - self.origin
        return _design(self.basis_fixed, self.basis_random, centered)

    def to_dict(self):
        return {
            'marker': self.marker, 'link': self.link, 'beta': self.beta.tolist(),
            'chol': self.chol.tolist(), 'sigma2': self.sigma2,
            'basis_fixed': self.basis_fixed.to_dict(),
            'basis_random': None if self.basis_random is None else self.basis_random.to_dict(),
            'loglik': self.loglik, 'origin': self.origin, 'window': self.window,
            'n_subjects': self.n_subjects,
        }

    @classmethod
    def from_dict(cls, data):
        q = 0 if data['basis_random'] is None else BasisSpec.from_dict(data['basis_random']).n_columns
        return cls(
            marker=data['marker'], link=data['link'],
            beta=np.asarray(data['beta'], dtype=float),
            chol=np.asarray(data['chol'], dtype=float).reshape(q, q),
            sigma2=data['sigma2'],
            basis_fixed=BasisSpec.from_dict(data['basis_fixed']),
            basis_random=BasisSpec.from_dict(data['basis_random']),
            loglik=float(data['loglik']), origin=float(data['origin']),
            window=data.get('window'), n_subjects=int(data.get('n_subjects', 0)))


def _design(fixed, random, centered):
    X = fixed.evaluate(centered)
    Z = random.evaluate(centered) if random is not None else np.zeros((len(centered), 0))
    return X, Z


@dataclass
class _Block:
    """Subjects sharing the same number of measurements, stacked for batched algebra."""
    ids: List[str]
    X: np.ndarray
    Z: np.ndarray
    y: np.ndarray


def _blocks(series, fixed, random, origin) -> List[_Block]:
    by_size = defaultdict(list)
    for subject_id in sorted(series):
        times, _ = series[subject_id]
        if len(times):
            by_size[len(times)].append(subject_id)
    blocks = []
    for size, ids in sorted(by_size.items()):
        times = np.stack([np.asarray(series[s][0], dtype=float) for s in ids]) - origin
        y = np.stack([np.asarray(series[s][1], dtype=float) for s in ids])
        X, Z = _design(fixed, random, times.ravel())
        blocks.append(_Block(ids=ids, X=X.reshape(len(ids), size, -1),
                             Z=Z.reshape(len(ids), size, -1), y=y))
    return blocks


def _check_design(blocks, p):
    if not blocks:
        raise DataError('No measurement to fit a mixed model on')
    pooled = np.concatenate([b.X.reshape(-1, p) for b in blocks])
    rank = np.linalg.matrix_rank(pooled)
    if rank < p:
        raise SingularDesignError(f'Pooled fixed-effect design has rank {rank} < {p}')
    return pooled


def _tril(q):
    return np.tril_indices(q)


def _chol_from(theta, q):
    L = np.zeros((q, q))
    L[_tril(q)] = theta[:q * (q + 1) // 2]
    return L


def _lmm_terms(blocks, L, sigma2):
    """Per-block V^-1 and log|V| for V = Z L L' Z' + sigma2 I."""
    for b in blocks:
        ZL = b.Z @ L
        V = ZL @ np.swapaxes(ZL, 1, 2) + sigma2 * np.eye(b.y.shape[1])
        sign, logdet = np.linalg.slogdet(V)
        yield b, np.linalg.inv(V), logdet


def _gls_beta(terms, p):
    A = np.zeros((p, p))
    c = np.zeros(p)
    for b, Vinv, _ in terms:
        VX = Vinv @ b.X
        A += np.einsum('gnp,gnk->pk', b.X, VX)
        c += np.einsum('gnp,gn->p', VX, b.y)
    try:
        return np.linalg.solve(A, c)
    except np.linalg.LinAlgError:
        raise SingularDesignError('Fixed-effect information matrix is singular')


def _lmm_objective(theta, blocks, p, q, with_grad=True):
    """Negative profiled ML log-likelihood and its gradient in (vech L, log sigma2)."""
    L = _chol_from(theta, q)
    sigma2 = np.exp(theta[-1])
    terms = list(_lmm_terms(blocks, L, sigma2))
    beta = _gls_beta(terms, p)

    loglik = 0.0
    grad_L = np.zeros((q, q))
    grad_s = 0.0
    for b, Vinv, logdet in terms:
        r = b.y - b.X @ beta
        Vr = np.einsum('gnk,gk->gn', Vinv, r)
        loglik -= 0.5 * (r.size * LOG_2PI + logdet.sum() + np.sum(r * Vr))
        if with_grad:
            W = Vinv - Vr[:, :, None] * Vr[:, None, :]
            grad_L -= np.einsum('gnq,gnk,gkr->qr', b.Z, W, b.Z) @ L
            grad_s -= 0.5 * sigma2 * np.trace(W, axis1=1, axis2=2).sum()
    if not with_grad:
        return -loglik, beta
    grad = np.concatenate([grad_L[_tril(q)], [grad_s]])
    return -loglik, -grad


def lmm_loglik(series, basis_fixed, basis_random, beta, B, sigma2, origin=0.0) -> float:
    """Exact marginal Gaussian log-likelihood at given parameters."""
    blocks = _blocks(series, basis_fixed, basis_random, origin)
    q = 0 if basis_random is None else basis_random.n_columns
    total = 0.0
    for b in blocks:
        ZB = b.Z @ np.asarray(B).reshape(q, q)
        V = ZB @ np.swapaxes(b.Z, 1, 2) + sigma2 * np.eye(b.y.shape[1])
        r = b.y - b.X @ beta
        _, logdet = np.linalg.slogdet(V)
        quad = np.einsum('gn,gn->g', r, np.linalg.solve(V, r[:, :, None])[:, :, 0])
        total -= 0.5 * (r.size * LOG_2PI + logdet.sum() + quad.sum())
    return float(total)


def _projected_gradient_norm(result, bounds):
    grad = np.asarray(result.jac, dtype=float)
    x = result.x
    for k, (lo, hi) in enumerate(bounds):
        if lo is not None and x[k] <= lo + 1e-12 and grad[k] > 0:
            grad[k] = 0.0
        if hi is not None and x[k] >= hi - 1e-12 and grad[k] < 0:
            grad[k] = 0.0
    return float(np.max(np.abs(grad))) if len(grad) else 0.0


def _minimize(fun, x0, bounds, jac, label):
    result = optimize.minimize(
        fun, x0, jac=jac, method='L-BFGS-B', bounds=bounds,
        options={'maxiter': MAX_ITERATIONS, 'ftol': LOGLIK_RTOL, 'gtol': GRADIENT_TOL})
    norm = _projected_gradient_norm(result, bounds) if result.jac is not None else float('nan')
    logger.debug(f'{label}: {result.nit} iterations, -loglik {result.fun:.6f}, '
                 f'gradient norm {norm:.2e} ({result.message})')
    if not result.success and not norm <= GRADIENT_TOL * max(1.0, abs(result.fun)):
        raise ConvergenceError(f'{label}: optimizer did not converge after {result.nit} iterations',
                               best=result.x, gradient_norm=norm)
    return result


def fit_lmm(series: Dict[str, Tuple[np.ndarray, np.ndarray]], fixed: BasisSpec,
            random: Optional[BasisSpec], origin=0.0, marker='') -> MixedModelFit:
    """Maximum-likelihood Gaussian linear mixed model, B parameterized by its Cholesky factor."""
    blocks = _blocks(series, fixed, random, origin)
    p = fixed.n_columns
    q = 0 if random is None else random.n_columns
    pooled_X = _check_design(blocks, p)
    if len(blocks) and sum(len(b.ids) for b in blocks) < 2:
        logger.warning(f'Marker "{marker}": fitting a mixed model on a single subject')

    pooled_y = np.concatenate([b.y.ravel() for b in blocks])
    ols, *_ = np.linalg.lstsq(pooled_X, pooled_y, rcond=None)
    resid_var = float(np.var(pooled_y - pooled_X @ ols))
    scale = resid_var if resid_var > 0 else 1.0
    floor = np.log(SIGMA2_FLOOR * max(1.0, float(np.var(pooled_y))))

    theta0 = np.concatenate([(np.sqrt(scale / 2.0) * np.eye(q))[_tril(q)],
                             [max(np.log(scale / 2.0), floor)]])
    bounds = [(None, None)] * (len(theta0) - 1) + [(floor, None)]
    result = _minimize(lambda th: _lmm_objective(th, blocks, p, q), theta0, bounds, True,
                       f'LMM "{marker}"')

    nll, beta = _lmm_objective(result.x, blocks, p, q, with_grad=False)
    fit = MixedModelFit(
        marker=marker, link='identity', beta=beta, chol=_chol_from(result.x, q),
        sigma2=float(np.exp(result.x[-1])), basis_fixed=fixed, basis_random=random,
        loglik=float(-nll), origin=float(origin), n_subjects=sum(len(b.ids) for b in blocks))
    logger.debug(f'Marker "{marker}": beta={np.round(beta, 4)}, sigma2={fit.sigma2:.4g}')
    return fit


def _logistic_loglik(beta, X, y):
    eta = X @ beta
    return float(np.sum(y * eta - np.logaddexp(0.0, eta))), X.T @ (y - expit(eta))


def _posterior_modes(b, beta, L, max_steps=50):
    """Newton iterations for u maximizing log f(y | X beta + Z L u) - u'u/2, batched over subjects."""
    ZL = b.Z @ L
    offset = b.X @ beta
    u = np.zeros((len(b.ids), L.shape[1]))
    eye = np.eye(L.shape[1])
    for _ in range(max_steps):
        eta = offset + np.einsum('gnq,gq->gn', ZL, u)
        mu = expit(eta)
        grad = np.einsum('gnq,gn->gq', ZL, b.y - mu) - u
        H = np.einsum('gnq,gn,gnr->gqr', ZL, mu * (1.0 - mu), ZL) + eye
        step = np.clip(np.linalg.solve(H, grad[:, :, None])[:, :, 0], -5.0, 5.0)
        u = u + step
        if np.max(np.abs(step), initial=0.0) < 1e-10:
            break
    eta = offset + np.einsum('gnq,gq->gn', ZL, u)
    mu = expit(eta)
    H = np.einsum('gnq,gn,gnr->gqr', ZL, mu * (1.0 - mu), ZL) + eye
    return u, eta, H


def _laplace_objective(theta, blocks, p, q):
    beta = theta[:p]
    L = _chol_from(theta[p:], q)
    loglik = 0.0
    for b in blocks:
        u, eta, H = _posterior_modes(b, beta, L)
        _, logdet = np.linalg.slogdet(H)
        loglik += np.sum(b.y * eta - np.logaddexp(0.0, eta)) - 0.5 * np.sum(u * u) - 0.5 * logdet.sum()
    return -float(loglik)


def fit_glmm_logistic(series, fixed: BasisSpec, random: Optional[BasisSpec],
                      origin=0.0, marker='') -> MixedModelFit:
    """Random-effects logistic model by Laplace-approximated marginal likelihood.

    `random=None` fixes B = 0 and reduces to plain logistic regression.
    """
    blocks = _blocks(series, fixed, random, origin)
    p = fixed.n_columns
    q = 0 if random is None else random.n_columns
    X = _check_design(blocks, p)
    y = np.concatenate([b.y.ravel() for b in blocks])
    if np.all(y == y[0]):
        raise SeparationError(f'Marker "{marker}": all outcomes are {int(y[0])}')

    glm = _minimize(lambda bt: tuple(-v for v in _logistic_loglik(bt, X, y)), np.zeros(p),
                    [(None, None)] * p, True, f'GLM "{marker}"')
    eta = X @ glm.x
    if np.max(np.abs(eta)) > 30 and np.all(np.abs(y - expit(eta)) < 1e-6):
        raise SeparationError(f'Marker "{marker}": complete separation in the fixed-effect design')

    if q == 0:
        theta, loglik = glm.x, -float(glm.fun)
    else:
        theta0 = np.concatenate([glm.x, (0.5 * np.eye(q))[_tril(q)]])
        result = _minimize(lambda th: _laplace_objective(th, blocks, p, q), theta0,
                           [(None, None)] * len(theta0), None, f'GLMM "{marker}"')
        theta, loglik = result.x, -float(result.fun)

    fit = MixedModelFit(
        marker=marker, link='logit', beta=theta[:p], chol=_chol_from(theta[p:], q), sigma2=None,
        basis_fixed=fixed, basis_random=random, loglik=loglik, origin=float(origin),
        n_subjects=sum(len(b.ids) for b in blocks))
    logger.debug(f'Marker "{marker}": beta={np.round(fit.beta, 4)}, B={np.round(fit.B, 4).tolist()}')
    return fit


def predict_random_effects(fit: MixedModelFit, times, values) -> np.ndarray:
    """BLUP B Z' V^-1 (y - X beta) for the identity link, posterior mode for the logit link."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if fit.q == 0 or len(times) == 0:
        return np.zeros(fit.q)
    X, Z = fit.design(times)
    if fit.link == 'identity':
        V = Z @ fit.B @ Z.T + fit.sigma2 * np.eye(len(times))
        return fit.B @ Z.T @ np.linalg.solve(V, values - X @ fit.beta)
    block = _Block(ids=[''], X=X[None], Z=Z[None], y=values[None])
    u, _, _ = _posterior_modes(block, fit.beta, fit.chol, max_steps=200)
    return fit.chol @ u[0]


def fit_marker(series, spec, t_lm) -> MixedModelFit:
    """Fit the model of one marker on histories centered at the landmark."""
    times = np.concatenate([t for t, _ in series.values()]) if series else np.array([])
    if len(times) == 0:
        raise DataError(f'Marker "{spec.name}" has no measurement before the landmark')
    fixed = default_basis(spec.fixed, times - t_lm)
    random = default_basis(spec.random, times - t_lm)
    fitter = fit_glmm_logistic if spec.nature == 'binary' else fit_lmm
    fit = fitter(series, fixed, random, origin=t_lm, marker=spec.name)
    return replace(fit, window=float(spec.window or t_lm))


def fit_marker_models(cohort, marker_specs, n_jobs=1) -> Dict[str, MixedModelFit]:
    """One independent mixed model per marker, fitted in parallel."""
    long = cohort.longitudinal
    specs = [marker_specs(name) for name in long.markers]
    fits = Parallel(n_jobs=n_jobs)(
        delayed(fit_marker)(long.series(spec.name), _with_nature(spec, long), cohort.t_lm)
        for spec in specs)
    logger.info(f'Fitted mixed models for {len(fits)} markers on {cohort.n} subjects')
    return {fit.marker: fit for fit in fits}


def _with_nature(spec, long):
    if spec.name in long.natures and long.natures[spec.name] != spec.nature:
        return replace(spec, nature=long.natures[spec.name])
    return spec
