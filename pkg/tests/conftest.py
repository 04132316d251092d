import numpy as np
import pandas as pd
import pytest

from dynpred.config import SimulationSpec, run_config_from_dict
from dynpred.core import dataset, simgen

T_LM = 4.0
T_HOR = 3.0
MARKERS = ('y01', 'y05', 'y10')
COVARIATES = ('x1', 'x6')


@pytest.fixture(scope='session')
def generated():
    """150 simulated subjects at risk at t_lm=4, 17 markers, known pi0."""
    scenario = simgen.make_scenario(SimulationSpec(n_subjects=150), T_LM, T_HOR, seed=11)
    return simgen.simulate_cohort(scenario)


@pytest.fixture(scope='session')
def tables(generated):
    """Survival and longitudinal tables restricted to three markers and two covariates."""
    survival = generated.survival[['id', 'time', 'event', *COVARIATES]].copy()
    longitudinal = generated.longitudinal[generated.longitudinal['marker'].isin(MARKERS)]
    surv = dataset.SurvivalTable(frame=survival, covariates=COVARIATES)
    long = dataset.LongitudinalTable(frame=longitudinal.reset_index(drop=True),
                                     natures={m: 'continuous' for m in MARKERS})
    return surv, long


@pytest.fixture(scope='session')
def cohort(tables):
    surv, long = tables
    return dataset.landmark_filter(surv, long, T_LM, T_HOR)


def run_document(generated, methods, **extra):
    marker_config = generated.marker_config()
    document = {
        't_lm': T_LM,
        't_hor': T_HOR,
        'markers': {m: marker_config[m] for m in MARKERS},
        'methods': methods,
        'folds': {'outer': 3, 'inner': 3, 'tuning': 3},
        'seed': 5,
    }
    document.update(extra)
    return document


@pytest.fixture(scope='session')
def run_config(generated):
    return run_config_from_dict(run_document(generated, [
        'cox-all',
        {'name': 'coxnet-lasso', 'n_lambda': 15},
        'superlearner',
    ]))


@pytest.fixture
def cohort_files(tmp_path, tables):
    surv, long = tables
    survival_csv = tmp_path / 'survival.csv'
    longitudinal_csv = tmp_path / 'longitudinal.csv'
    surv.frame.to_csv(survival_csv, index=False)
    long.frame.to_csv(longitudinal_csv, index=False)
    return survival_csv, longitudinal_csv


@pytest.fixture
def exponential_data():
    """300 subjects, hazard exp(x1), x2 and x3 pure noise, uniform censoring."""
    rng = np.random.default_rng(42)
    n = 300
    X = rng.normal(size=(n, 3))
    event_times = rng.exponential(1.0, n) / np.exp(X[:, 0])
    censor_times = rng.uniform(0.0, 3.0, n)
    times = np.minimum(event_times, censor_times)
    events = (event_times <= censor_times).astype(int)
    design = pd.DataFrame(X, columns=['x1', 'x2', 'x3'])
    return design, times, events
