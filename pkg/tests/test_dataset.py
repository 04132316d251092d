import pandas as pd
import pytest

from dynpred.config import SimulationSpec
from dynpred.core import dataset, simgen
from dynpred.core.errors import DataError


@pytest.fixture
def small_files(tmp_path):
    survival = pd.DataFrame({
        'id': ['a', 'b', 'c', 'd', 'e'],
        'time': [2.0, 7.0, 12.0, 5.5, 6.0],
        'event': [1, 1, 1, 0, 1],
        'age': [50.0, 61.0, 45.0, 70.0, 58.0],
        'sex': [0, 1, 1, 0, 1],
    })
    rows = []
    for subject in 'abcde':
        for t in (0.0, 1.5, 3.0, 4.0, 6.0):
            rows.append({'id': subject, 'marker': 'm1', 'time': t, 'value': t + 1.0})
            if subject != 'e':
                rows.append({'id': subject, 'marker': 'm2', 'time': t, 'value': float(t > 2)})
    survival_csv = tmp_path / 'survival.csv'
    longitudinal_csv = tmp_path / 'longitudinal.csv'
    survival.to_csv(survival_csv, index=False)
    pd.DataFrame(rows).to_csv(longitudinal_csv, index=False)
    return survival_csv, longitudinal_csv


def test_load_survival_reads_covariates(small_files):
    surv = dataset.load_survival(small_files[0])
    assert surv.covariates == ('age', 'sex')
    assert surv.binary_covariates == ('sex',)
    assert len(surv) == 5


def test_landmark_filter(small_files):
    surv = dataset.load_survival(small_files[0])
    long = dataset.load_longitudinal(small_files[1], {'m2': 'binary'})
    cohort = dataset.landmark_filter(surv, long, t_lm=4.0, t_hor=3.0, require_all_markers=False)

    assert list(cohort.ids) == ['b', 'c', 'd', 'e']
    assert cohort.n_dropped == 1
    assert cohort.longitudinal.frame['time'].max() <= 4.0
    # b: 7 - 4 = 3 is not strictly inside the horizon; c: event after the horizon; e: inside
    assert list(cohort.events) == [0, 0, 0, 1]
    assert list(cohort.times) == [3.0, 8.0, 1.5, 2.0]


def test_landmark_filter_requires_all_markers(small_files):
    surv = dataset.load_survival(small_files[0])
    long = dataset.load_longitudinal(small_files[1])
    cohort = dataset.landmark_filter(surv, long, t_lm=4.0, t_hor=3.0)
    assert 'e' not in set(cohort.ids)
    assert cohort.n == 3


def test_landmark_filter_selects_markers(small_files):
    surv = dataset.load_survival(small_files[0])
    long = dataset.load_longitudinal(small_files[1])
    cohort = dataset.landmark_filter(surv, long, t_lm=4.0, t_hor=3.0, markers=['m1'])
    assert cohort.n == 4
    assert cohort.longitudinal.markers == ['m1']


def test_nobody_at_risk(small_files):
    surv = dataset.load_survival(small_files[0])
    long = dataset.load_longitudinal(small_files[1])
    with pytest.raises(DataError):
        dataset.landmark_filter(surv, long, t_lm=20.0, t_hor=3.0)


def test_invalid_survival_rows(tmp_path):
    file_path = tmp_path / 'survival.csv'
    file_path.write_text('id,time,event\na,1.0,1\nb,-2.0,0\n')
    with pytest.raises(DataError) as err:
        dataset.load_survival(file_path)
    assert err.value.row == 2

    file_path.write_text('id,time,event\na,1.0,2\n')
    with pytest.raises(DataError):
        dataset.load_survival(file_path)

    file_path.write_text('id,time,event\na,1.0,1\na,2.0,0\n')
    with pytest.raises(DataError):
        dataset.load_survival(file_path)

    file_path.write_text('id,event\na,1\n')
    with pytest.raises(DataError):
        dataset.load_survival(file_path)


def test_binary_marker_values_are_checked(tmp_path):
    file_path = tmp_path / 'longitudinal.csv'
    file_path.write_text('id,marker,time,value\na,m2,0.0,1\na,m2,1.0,0.5\n')
    with pytest.raises(DataError):
        dataset.load_longitudinal(file_path, {'m2': 'binary'})
    assert dataset.load_longitudinal(file_path).markers == ['m2']


def test_subjects_without_outcomes(tmp_path):
    file_path = tmp_path / 'subjects.csv'
    file_path.write_text('id,age\nz,40\ny,52\n')
    surv = dataset.load_subjects(file_path)
    assert list(surv.frame['id']) == ['y', 'z']
    assert surv.covariates == ('age',)
    assert (surv.frame['time'] > 1e300).all()


@pytest.mark.parametrize('seed,t_lm', [(1, 4.0), (2, 5.0), (3, 6.0)])
def test_landmark_filter_on_generated_cohorts(seed, t_lm):
    scenario = simgen.make_scenario(SimulationSpec(n_subjects=120), 4.0, 3.0, seed=seed)
    generated = simgen.simulate_cohort(scenario)
    surv, long = generated.survival_table(), generated.longitudinal_table()
    cohort = dataset.landmark_filter(surv, long, t_lm=t_lm, t_hor=3.0)

    assert cohort.n + cohort.n_dropped == len(surv)
    at_risk = set(surv.frame.loc[surv.frame['time'] > t_lm, 'id'])
    assert set(cohort.ids) <= at_risk
    assert set(cohort.longitudinal.frame['id']) <= set(cohort.ids)
    last_visit = cohort.longitudinal.frame.groupby('id')['time'].max()
    assert (last_visit <= t_lm).all()

    again = dataset.landmark_filter(
        dataset.SurvivalTable(frame=cohort.survival, covariates=cohort.covariates),
        cohort.longitudinal, t_lm=t_lm, t_hor=3.0)
    assert again.n_dropped == 0
    pd.testing.assert_frame_equal(again.survival, cohort.survival)
    pd.testing.assert_frame_equal(again.longitudinal.frame, cohort.longitudinal.frame)
