import numpy as np
import pandas as pd
import pytest

from numpy.testing import assert_allclose

from dynpred.core import survreg
from dynpred.core.errors import (ConfigError, DataError, MonotoneLikelihoodError,
                                 SingularDesignError)
from dynpred.core.evalmetrics import nelson_aalen

# (time, event, x)
HAND_TIMES = np.array([1.0, 2.0, 3.0])
HAND_EVENTS = np.array([1, 1, 0])
HAND_X = pd.DataFrame({'x': [1.0, 0.0, 1.0]})


def test_cox_hand_dataset():
    fit = survreg.fit_cox(HAND_X, HAND_TIMES, HAND_EVENTS)
    # score 1 - 2u / (2u + 1) - u / (1 + u) = 0 gives u = exp(beta) = 1 / sqrt(2)
    assert_allclose(fit.coef, [-0.5 * np.log(2.0)], atol=1e-6)

    u = np.exp(fit.coef[0])
    expected = 1.0 - np.exp(-u * (1.0 / (2.0 * u + 1.0) + 1.0 / (1.0 + u)))
    assert_allclose(survreg.predict_cox_probability(fit, pd.DataFrame({'x': [1.0]}), 2.0),
                    [expected], atol=1e-6)


def test_cox_matches_grid_search():
    fit = survreg.fit_cox(HAND_X, HAND_TIMES, HAND_EVENTS)
    grid = np.linspace(-2.0, 2.0, 40001)
    loglik = grid - np.log(2.0 * np.exp(grid) + 1.0) - np.log(1.0 + np.exp(grid))
    assert abs(fit.coef[0] - grid[np.argmax(loglik)]) < 1e-4


def test_null_model_baseline_is_nelson_aalen(exponential_data):
    _, times, events = exponential_data
    fit = survreg.fit_cox(pd.DataFrame(index=range(len(times))), times, events)
    grid = np.linspace(0.0, 3.0, 50)
    assert fit.n_coef == 0
    assert_allclose(fit.baseline(grid), nelson_aalen(times, events)(grid), atol=1e-12)
    assert_allclose(survreg.predict_cox_probability(fit, np.zeros((4, 0)), 1.0),
                    1.0 - np.exp(-nelson_aalen(times, events)(1.0)), atol=1e-12)


def test_cox_recovers_effect(exponential_data):
    design, times, events = exponential_data
    fit = survreg.fit_cox(design, times, events)
    assert_allclose(fit.coef[0], 1.0, atol=0.3)
    assert fit.aic == pytest.approx(-2.0 * fit.loglik + 6.0)


def test_prediction_is_non_decreasing_in_horizon(exponential_data):
    design, times, events = exponential_data
    fit = survreg.fit_cox(design, times, events)
    early = survreg.predict_cox_probability(fit, design, 0.5)
    late = survreg.predict_cox_probability(fit, design, 1.5)
    assert np.all(late >= early)
    assert np.all((early >= 0) & (late <= 1))


def test_prediction_checks_the_row_width(exponential_data):
    design, times, events = exponential_data
    fit = survreg.fit_cox(design, times, events)
    rows = design.to_numpy()
    assert_allclose(survreg.predict_cox_probability(fit, rows, 1.0),
                    survreg.predict_cox_probability(fit, design, 1.0))
    with pytest.raises(DataError):
        survreg.predict_cox_probability(fit, rows[:, :2], 1.0)
    with pytest.raises(DataError):
        survreg.predict_cox_probability(fit, np.ones(6), 1.0)
    with pytest.raises(DataError):
        survreg.predict_cox_probability(fit, design.drop(columns='x3'), 1.0)


def test_cox_degenerate_designs():
    with pytest.raises(DataError):
        survreg.fit_cox(HAND_X, HAND_TIMES, np.zeros(3, dtype=int))
    with pytest.raises(SingularDesignError):
        survreg.fit_cox(pd.DataFrame({'x': [1.0, 1.0, 1.0]}), HAND_TIMES, HAND_EVENTS)


def test_monotone_likelihood():
    times = np.arange(1.0, 7.0)
    design = pd.DataFrame({'x': -times})
    with pytest.raises(MonotoneLikelihoodError) as err:
        survreg.fit_cox(design, times, np.ones(6, dtype=int))
    assert err.value.column == 'x'


def test_collinear_columns():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(2, 50))
    dropped = survreg.collinear_columns(np.column_stack([a, b, a + b]), ('a', 'b', 'c'))
    assert len(dropped) == 1


def test_backward_selection_keeps_the_signal(exponential_data):
    design, times, events = exponential_data
    design = design.assign(x4=design['x1'] + design['x2'])
    fit = survreg.backward_select_cox(design, times, events)
    assert 'x1' in fit.columns or 'x4' in fit.columns
    assert len(fit.columns) <= 3
    with pytest.raises(ConfigError):
        survreg.backward_select_cox(design, times, events, criterion='bic')


def test_lambda_max_gives_zero_coefficients(exponential_data):
    design, times, events = exponential_data
    Xs = (design.to_numpy() - design.to_numpy().mean(axis=0)) / design.to_numpy().std(axis=0)
    lam_max = survreg.lambda_max(Xs, times, events, alpha=1.0)
    coefs, _ = survreg.coxnet_path(Xs, times, events, 1.0, [lam_max * 1.000001, lam_max * 0.5])
    assert np.all(coefs[0] == 0)
    assert np.any(coefs[1] != 0)


def test_ridge_with_vanishing_penalty_is_cox(exponential_data):
    design, times, events = exponential_data
    path = survreg.fit_coxnet(design, times, events, alpha=0.0, n_folds=0,
                              lambdas=[1e-1, 1e-2, 1e-3, 1e-4, 1e-6])
    cox = survreg.fit_cox(design, times, events)
    assert path.lambda_selected == 1e-6
    assert_allclose(path.fit.coef, cox.coef, atol=1e-3)


def test_coordinate_descent_objective_decreases(exponential_data):
    design, times, events = exponential_data
    Xs = (design.to_numpy() - design.to_numpy().mean(axis=0)) / design.to_numpy().std(axis=0)
    lambdas = survreg.lambda_grid(survreg.lambda_max(Xs, times, events, 0.5), 10)
    _, traces = survreg.coxnet_path(Xs, times, events, 0.5, lambdas, trace=True)
    assert len(traces) == 10
    for trace in traces:
        assert np.all(np.diff(trace) <= 0)


def test_coxnet_cross_validation(exponential_data):
    design, times, events = exponential_data
    path = survreg.fit_coxnet(design, times, events, alpha=1.0, n_lambda=15, n_folds=3, seed=1)
    assert path.cv_error.shape == (15,)
    assert path.index_selected == int(np.argmin(path.cv_error))
    assert 'x1' in path.selected_columns
    restored = survreg.ElasticNetPath.from_dict(path.to_dict())
    assert_allclose(survreg.predict_cox_probability(restored.fit, design, 1.0),
                    survreg.predict_cox_probability(path.fit, design, 1.0))


def test_coxnet_rejects_bad_grids(exponential_data):
    design, times, events = exponential_data
    with pytest.raises(ConfigError):
        survreg.fit_coxnet(design, times, events, lambdas=[0.1, 0.2], n_folds=0)
    with pytest.raises(ConfigError):
        survreg.fit_coxnet(design, times, events, alpha=1.5)


def test_fold_assignment():
    events = np.array([1] * 6 + [0] * 14)
    folds = survreg.fold_assignment(events, 5, seed=3)
    assert sorted(np.bincount(folds)) == [4] * 5
    assert all(events[folds == k].sum() > 0 for k in range(5))
    with pytest.raises(ConfigError):
        survreg.fold_assignment(events, 30, seed=3)
