import numpy as np
import pandas as pd
import pytest

from numpy.testing import assert_allclose

from dynpred.core import spls
from dynpred.core.errors import ConfigError, DataError


def test_deviance_residuals_by_hand():
    # Nelson-Aalen jumps 1/3 at t=1 and 1/2 at t=2
    residuals = spls.deviance_residuals([1.0, 2.0, 3.0], [1, 1, 0])
    martingale = np.array([1 - 1 / 3, 1 - 5 / 6, -5 / 6])
    expected = np.sign(martingale) * np.sqrt(-2.0 * (martingale + np.array([1, 1, 0]) *
                                                      np.log(np.array([1 / 3, 5 / 6, 1.0]))))
    assert_allclose(residuals, expected, atol=1e-12)
    assert_allclose(spls.martingale_residuals([1.0, 2.0, 3.0], [1, 1, 0]), martingale, atol=1e-12)


def test_deviance_residuals_need_events():
    with pytest.raises(DataError):
        spls.deviance_residuals([1.0, 2.0], [0, 0])


def test_unpenalized_directions_are_pls1():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(40, 5))
    X -= X.mean(axis=0)
    y = X @ np.array([1.0, -0.5, 0.0, 0.2, 0.0]) + rng.normal(size=40)
    y -= y.mean()
    directions = spls.fit_spls(X, y, n_components=2, eta=0.0)

    w1 = X.T @ y / np.linalg.norm(X.T @ y)
    t1 = X @ w1
    X2 = X - np.outer(t1, X.T @ t1 / (t1 @ t1))
    w2 = X2.T @ y / np.linalg.norm(X2.T @ y)
    assert_allclose(directions.weights, np.column_stack([w1, w2]), atol=1e-10)
    assert_allclose(directions.scores[:, 0] @ directions.scores[:, 1], 0.0, atol=1e-8)
    assert_allclose(X @ directions.rotation(), directions.scores, atol=1e-10)


def test_maximal_sparsity_keeps_the_leading_column():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(60, 6))
    y = 3.0 * X[:, 2] + rng.normal(size=60)
    directions = spls.fit_spls(X, y, n_components=1, eta=0.99)
    assert list(np.flatnonzero(directions.weights[:, 0])) == [2]
    with pytest.raises(ConfigError):
        spls.fit_spls(X, y, n_components=1, eta=1.0)


def test_spls_dr(exponential_data):
    design, times, events = exponential_data
    design = design.assign(flat=1.0)
    fit = spls.fit_spls_dr(design, times, events, eta_mode='grid', max_components=3, n_folds=3, seed=2)
    assert 1 <= fit.n_components <= 3
    assert fit.eta in spls.ETA_MODES['grid']
    assert 'flat' not in fit.columns
    predictions = fit.predict(design, 1.0)
    assert np.all((predictions >= 0) & (predictions <= 1))

    restored = spls.SplsDrFit.from_dict(fit.to_dict())
    assert_allclose(restored.predict(design, 1.0), predictions, atol=1e-12)

    refit = spls.refit_spls_dr(design, times, events, fit.n_components, fit.eta)
    assert_allclose(refit.predict(design, 1.0), predictions, atol=1e-10)


def test_spls_dr_rejects_bad_settings(exponential_data):
    design, times, events = exponential_data
    with pytest.raises(ConfigError):
        spls.fit_spls_dr(design, times, events, eta_mode='half')
    with pytest.raises(ConfigError):
        spls.fit_spls_dr(design.iloc[:5], times[:5], events[:5], n_folds=10)
    with pytest.raises(DataError):
        spls.fit_spls_dr(pd.DataFrame({'c': np.ones(len(times))}), times, events)


def r_squared(target, regressors):
    A = np.column_stack([np.ones(len(target)), regressors])
    coef, *_ = np.linalg.lstsq(A, target, rcond=None)
    residual = target - A @ coef
    centered = target - target.mean()
    return 1.0 - (residual @ residual) / (centered @ centered)


def test_full_rank_unpenalized_scores_span_the_design(exponential_data):
    design, times, events = exponential_data
    design = design.assign(x4=np.random.default_rng(3).normal(size=len(times)))
    fit = spls.refit_spls_dr(design, times, events, n_components=4, eta=0.0)
    assert fit.n_components == 4

    scores = fit.scores(design)
    residuals = spls.deviance_residuals(times, events)
    X = design.to_numpy()
    A = np.column_stack([np.ones(len(times)), X])
    projection = A @ np.linalg.lstsq(A, residuals, rcond=None)[0]
    assert_allclose(r_squared(projection, scores), 1.0, atol=1e-6)
    assert_allclose(r_squared(scores @ fit.cox.coef, X), 1.0, atol=1e-6)


def test_predictions_do_not_depend_on_column_scale(exponential_data):
    design, times, events = exponential_data
    scaled = design.assign(x2=10.0 * design['x2'])
    fit = spls.refit_spls_dr(design, times, events, n_components=2, eta=0.4)
    fit_scaled = spls.refit_spls_dr(scaled, times, events, n_components=2, eta=0.4)
    assert_allclose(fit_scaled.weights, fit.weights, atol=1e-10)
    assert_allclose(fit_scaled.predict(scaled, 1.0), fit.predict(design, 1.0), atol=1e-8)


def test_sparsity_grows_with_eta():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(80, 8))
    y = X @ np.array([3.0, -1.5, 1.0, 0.6, 0.3, 0.0, 0.0, 0.0]) + rng.normal(size=80)
    kept = [np.count_nonzero(spls.fit_spls(X, y, n_components=1, eta=eta).weights[:, 0])
            for eta in spls.ETA_MODES['grid'] + spls.ETA_MODES['max']]
    assert kept[0] == 8
    assert kept[-1] == 1
    assert all(a >= b for a, b in zip(kept, kept[1:]))
