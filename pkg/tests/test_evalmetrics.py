import numpy as np
import pytest

from numpy.testing import assert_allclose

from dynpred.core import evalmetrics

TIMES = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
EVENTS = np.array([1, 0, 1, 0, 1, 0])
PREDICTIONS = np.array([0.9, 0.5, 0.6, 0.6, 0.2, 0.1])


def test_nelson_aalen_by_hand():
    hazard = evalmetrics.nelson_aalen([1.0, 2.0, 2.0, 3.0, 4.0], [1, 1, 0, 1, 0])
    assert_allclose(hazard([0.5, 1.0, 2.5, 3.0, 10.0]), [0.0, 0.2, 0.45, 0.95, 0.95], atol=1e-12)
    assert_allclose(hazard.left_limit(3.0), 0.45, atol=1e-12)


def test_censoring_kaplan_meier_by_hand():
    survival = evalmetrics.km_censoring(TIMES, EVENTS)
    assert_allclose(survival([1.0, 2.0, 3.5, 4.0, 6.0]), [1.0, 0.8, 0.8, 0.8 * 2 / 3, 0.0], atol=1e-12)
    assert_allclose(survival.left_limit(2.0), 1.0)


def test_ipcw_weights_by_hand():
    status, weights = evalmetrics.ipcw_weights(TIMES, EVENTS, t_hor=3.5)
    assert list(status) == [1, 0, 1, 0, 0, 0]
    assert_allclose(weights, [1.0, 0.0, 1.25, 1.25, 1.25, 1.25], atol=1e-12)


def test_ipcw_brier_by_hand():
    expected = (0.1 ** 2 + 1.25 * 0.4 ** 2 + 1.25 * (0.6 ** 2 + 0.2 ** 2 + 0.1 ** 2)) / 6
    assert_allclose(evalmetrics.ipcw_brier(PREDICTIONS, TIMES, EVENTS, 3.5), expected, atol=1e-10)


def test_ipcw_auc_by_hand():
    # case 0.6 ties control 0.6 and counts one half
    expected = (1.0 * 1.25 * 3 + 1.25 * 1.25 * (0.5 + 2)) / ((1.0 + 1.25) * 3 * 1.25)
    assert_allclose(evalmetrics.ipcw_auc(PREDICTIONS, TIMES, EVENTS, 3.5), expected, atol=1e-12)


def test_auc_is_a_rank_statistic():
    auc = evalmetrics.ipcw_auc(PREDICTIONS, TIMES, EVENTS, 3.5)
    transformed = evalmetrics.ipcw_auc(PREDICTIONS ** 3, TIMES, EVENTS, 3.5)
    assert_allclose(auc, transformed, atol=1e-12)


def test_without_censoring_brier_is_mse():
    events = np.ones(6, dtype=int)
    status = (TIMES <= 3.5).astype(float)
    assert_allclose(evalmetrics.ipcw_brier(PREDICTIONS, TIMES, events, 3.5),
                    np.mean((status - PREDICTIONS) ** 2), atol=1e-12)
    assert evalmetrics.ipcw_brier(np.full(6, 0.5), TIMES, events, 3.5) == 0.25


def test_auc_undefined_without_controls():
    assert np.isnan(evalmetrics.ipcw_auc(PREDICTIONS, TIMES, EVENTS, 10.0))


def test_evaluate_report():
    report = evalmetrics.evaluate(PREDICTIONS, TIMES, EVENTS, 3.5, true_probabilities=PREDICTIONS)
    assert report.n_at_risk == 6
    assert report.n_cases == 2
    assert report.n_controls == 3
    assert report.msep == 0.0
    assert set(report.to_dict()) == {'brier', 'auc', 'msep', 'n_at_risk', 'n_cases', 'n_controls'}


def test_predictions_must_be_probabilities():
    with pytest.raises(ValueError):
        evalmetrics.ipcw_brier(PREDICTIONS + 0.5, TIMES, EVENTS, 3.5)
    with pytest.raises(ValueError):
        evalmetrics.ipcw_brier(PREDICTIONS[:3], TIMES, EVENTS, 3.5)
