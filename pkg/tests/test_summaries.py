import numpy as np
import pytest

from numpy.testing import assert_allclose
from scipy import integrate

from dynpred.core import simgen, summaries
from dynpred.core.errors import DataError
from dynpred.core.longitudinal import BasisSpec, MixedModelFit, fit_marker_models

from conftest import COVARIATES, MARKERS


def linear_fit(origin=4.0, window=2.0):
    basis = BasisSpec(kind='poly', degree=1)
    return MixedModelFit(marker='m', link='identity', beta=np.array([1.0, 2.0]),
                         chol=np.eye(2), sigma2=1.0, basis_fixed=basis, basis_random=basis,
                         loglik=0.0, origin=origin, window=window)


def test_level_slope_cumulative_closed_form():
    fit = linear_fit()
    b = np.array([0.5, -1.0])
    assert_allclose(summaries.level_at(fit, b, 4.0), 1.5)
    assert_allclose(summaries.slope_at(fit, b, 4.0), 1.0)
    # integral of 1.5 + s over [-2, 0]
    assert_allclose(summaries.cumulative_level(fit, b, 4.0, 2.0), 1.0, atol=1e-12)
    assert_allclose(summaries.level_at(fit, np.array([b, 2 * b]), 4.0), [1.5, 2.0])


def spline_fit():
    """Spline mean with knots at study times 1 and 3, random intercept and slope."""
    return MixedModelFit(marker='m', link='identity', beta=np.array([1.0, 0.5, 0.3, -0.2]),
                         chol=np.eye(2), sigma2=1.0,
                         basis_fixed=BasisSpec(kind='ns', knots=(-3.0, -1.0), boundary=(-4.0, 0.0)),
                         basis_random=BasisSpec(kind='poly', degree=1), loglik=0.0, origin=4.0)


@pytest.mark.parametrize('h', [1e-5, 1e-6])
@pytest.mark.parametrize('u', [0.3, 2.0, 3.5, 4.0])
def test_slope_matches_central_difference(u, h):
    fit, b = spline_fit(), np.array([0.4, -0.1])
    numeric = (summaries.level_at(fit, b, u + h) - summaries.level_at(fit, b, u - h)) / (2.0 * h)
    assert_allclose(summaries.slope_at(fit, b, u), numeric, atol=1e-6)


def test_cumulative_level_matches_adaptive_quadrature():
    fit, b = spline_fit(), np.array([0.4, -0.1])
    expected, _ = integrate.quad(lambda u: summaries.level_at(fit, b, u), 0.0, 4.0,
                                 points=[1.0, 3.0], epsabs=1e-13, epsrel=1e-13)
    # absolute tolerance; the curve stays within [-0.2, 4.3] on the window
    assert_allclose(summaries.cumulative_level(fit, b, 4.0, 4.0), expected, rtol=0, atol=1e-8)


def test_cumulative_level_is_additive_over_windows():
    fit, b = spline_fit(), np.array([0.4, -0.1])
    whole = summaries.cumulative_level(fit, b, 4.0, 4.0)
    parts = summaries.cumulative_level(fit, b, 2.0, 2.0) + summaries.cumulative_level(fit, b, 4.0, 2.0)
    # each of the three integrals carries its own quadrature error
    assert_allclose(whole, parts, rtol=0, atol=2e-8)


def test_time_above_threshold():
    fit = linear_fit()
    names, values = summaries.marker_summaries(fit, np.array([[0.5, -1.0]]), 4.0,
                                               summaries=('time_above',), options={'threshold': 0.5})
    assert names == ['time_above']
    assert_allclose(values[0, 0], 1.0, atol=1e-2)


def test_registered_summary_is_used():
    @summaries.register_summary('last_level_squared')
    def _squared(fit, b, t_lm, window, **options):
        return ('level2',), summaries.level_at(fit, b, t_lm)[:, None] ** 2

    try:
        names, values = summaries.marker_summaries(linear_fit(), np.array([[0.5, -1.0]]), 4.0,
                                                   summaries=('level', 'last_level_squared'))
        assert names == ['level', 'level2']
        assert_allclose(values, [[1.5, 2.25]])
    finally:
        del summaries.SUMMARIES['last_level_squared']


def test_unknown_summary():
    with pytest.raises(DataError):
        summaries.marker_summaries(linear_fit(), np.zeros((1, 2)), 4.0, summaries=('median',))


@pytest.mark.parametrize('index', [0, 6, 12, 15])
def test_generator_summaries_match_summary_functions(index):
    design = simgen.marker_designs()[index]
    t_lm = 4.0
    basis = BasisSpec(kind='poly', degree=design.q - 1)
    fit = MixedModelFit(marker=design.name, link='identity', beta=np.asarray(design.beta),
                        chol=np.linalg.cholesky(np.asarray(design.B)), sigma2=0.25,
                        basis_fixed=basis, basis_random=basis, loglik=0.0, origin=t_lm, window=t_lm)
    b = np.random.default_rng(index).normal(size=(5, design.q))
    names, values = summaries.marker_summaries(fit, b, t_lm)
    a, A = design.summary_map(t_lm)
    assert tuple(names) == design.summary_names
    assert_allclose(values, a + b @ A.T, atol=1e-10)


def test_assemble_design(cohort, run_config):
    fits = fit_marker_models(cohort, run_config.marker)
    assert sorted(fits) == list(MARKERS)
    design = summaries.assemble_design(cohort, fits, run_config.marker)

    assert list(design.ids) == list(cohort.ids)
    assert design.columns[:4] == ['y01.b0', 'y01.level', 'y01.slope', 'y01.cumulative']
    assert design.covariate_columns == list(COVARIATES)
    assert design.binary == ('x6',)
    assert len(design.gamma_columns) == (1 + 3) + (2 + 3) + (3 + 3)
    assert np.isfinite(design.values).all()
    provenance = design.provenance_dict()
    assert provenance['y05.slope'] == {'marker': 'y05', 'summary': 'slope', 'binary': False}


def test_export_design(tmp_path, cohort, run_config):
    fits = fit_marker_models(cohort, run_config.marker)
    design = summaries.assemble_design(cohort, fits, run_config.marker)
    summaries.export_design(design, tmp_path / 'design.csv')
    assert (tmp_path / 'design.csv').exists()
    assert (tmp_path / 'design.csv.json').exists()
