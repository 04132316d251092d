import json

import pandas as pd
import pytest

from click.testing import CliRunner

from dynpred.cli import cli

from conftest import T_HOR, T_LM, run_document


def write_config(tmp_path, document, name='run.json'):
    config_path = tmp_path / name
    config_path.write_text(json.dumps(document))
    return str(config_path)


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def fit_config(tmp_path, generated, cohort_files):
    survival_csv, longitudinal_csv = cohort_files
    document = run_document(generated, ['cox-all', {'name': 'coxnet-ridge', 'n_lambda': 10}, 'superlearner'],
                            paths={'survival': str(survival_csv), 'longitudinal': str(longitudinal_csv)})
    return write_config(tmp_path, document)


def test_version(runner):
    result = runner.invoke(cli, ['--version'])
    assert result.exit_code == 0
    assert result.output.strip() == 'v0.1.0'


def test_simulate(runner, tmp_path):
    config_path = write_config(tmp_path, {'t_lm': T_LM, 't_hor': T_HOR, 'seed': 4,
                                          'simulation': {'n_subjects': 30}})
    output = tmp_path / 'cohort'
    result = runner.invoke(cli, ['simulate', '-c', config_path, '-o', str(output), '--link', 'nonlinear'])
    assert result.exit_code == 0, result.output
    for name in ('survival.csv', 'longitudinal.csv', 'truth.csv', 'manifest.json', 'run_config.json'):
        assert (output / name).exists()
    written = json.loads((output / 'run_config.json').read_text())
    assert written['simulation']['link'] == 'nonlinear'
    assert len(written['markers']) == 17
    assert written['paths']['truth'].endswith('truth.csv')
    assert len(pd.read_csv(output / 'survival.csv')) == 30


def test_fit_predict_evaluate(runner, tmp_path, fit_config, cohort_files, cohort):
    survival_csv, longitudinal_csv = cohort_files
    model = tmp_path / 'model'
    result = runner.invoke(cli, ['fit', '-c', fit_config, '-o', str(model), '-t', '1'])
    assert result.exit_code == 0, result.output
    for name in ('pipeline.json', 'markers.json', 'learner-cox-all.json', 'learner-coxnet-ridge.json',
                 'importance.json'):
        assert (model / name).exists()

    predictions_csv = tmp_path / 'predictions.csv'
    result = runner.invoke(cli, ['predict', '-m', str(model), '--subjects', str(survival_csv),
                                 '--longitudinal', str(longitudinal_csv), '-o', str(predictions_csv)])
    assert result.exit_code == 0, result.output
    predictions = pd.read_csv(predictions_csv, dtype={'subject': str})
    assert list(predictions.columns) == ['subject', 'method', 'prediction', 'config_hash']
    assert set(predictions['method']) == {'cox-all', 'coxnet-ridge', 'superlearner'}
    assert len(predictions) == 3 * cohort.n
    assert predictions['prediction'].between(0, 1).all()

    metrics_json = tmp_path / 'metrics.json'
    result = runner.invoke(cli, ['evaluate', '-p', str(predictions_csv), '--survival', str(survival_csv),
                                 '--t-lm', str(T_LM), '--t-hor', str(T_HOR), '-o', str(metrics_json)])
    assert result.exit_code == 0, result.output
    metrics = json.loads(metrics_json.read_text())['metrics']
    assert set(metrics) == {'cox-all', 'coxnet-ridge', 'superlearner'}
    assert metrics['superlearner']['n_at_risk'] == cohort.n
    assert 'superlearner' in result.output


def test_predict_without_model(runner, tmp_path, cohort_files):
    survival_csv, longitudinal_csv = cohort_files
    result = runner.invoke(cli, ['predict', '-m', str(tmp_path / 'nothing'), '--subjects', str(survival_csv),
                                 '--longitudinal', str(longitudinal_csv)])
    assert result.exit_code == 3


def test_cv(runner, tmp_path, generated, cohort_files):
    survival_csv, longitudinal_csv = cohort_files
    truth_csv = tmp_path / 'truth.csv'
    generated.truth.to_csv(truth_csv, index=False)
    document = run_document(generated, ['cox-all', {'name': 'coxnet-lasso', 'n_lambda': 10}, 'superlearner'],
                            folds={'outer': 2, 'inner': 3, 'tuning': 3})
    config_path = write_config(tmp_path, document)
    output = tmp_path / 'cv'
    result = runner.invoke(cli, ['cv', '-c', config_path, '--survival', str(survival_csv),
                                 '--longitudinal', str(longitudinal_csv), '--truth', str(truth_csv),
                                 '-o', str(output), '-t', '1'])
    assert result.exit_code == 0, result.output
    predictions = pd.read_csv(output / 'predictions.csv')
    assert set(predictions['fold']) == {0, 1}
    metrics = json.loads((output / 'metrics.json').read_text())
    assert metrics['summary']['superlearner']['msep']['mean'] is not None
    weights = json.loads((output / 'weights.json').read_text())
    assert set(weights['replicates'][0]) == {'0', '1'}


def test_evaluate_without_common_subjects(runner, tmp_path, cohort_files):
    survival_csv, _ = cohort_files
    predictions_csv = tmp_path / 'predictions.csv'
    pd.DataFrame({'subject': ['nobody'], 'method': ['cox-all'], 'prediction': [0.3]}).to_csv(
        predictions_csv, index=False)
    result = runner.invoke(cli, ['evaluate', '-p', str(predictions_csv), '--survival', str(survival_csv),
                                 '--t-lm', '4', '--t-hor', '3', '-o', str(tmp_path / 'metrics.json')])
    assert result.exit_code == 3


@pytest.mark.parametrize('document', [
    {'t_hor': 3.0},
    {'t_lm': 4.0, 't_hor': 3.0, 'methods': ['cox-all', 'deep-surv']},
    {'t_lm': 4.0, 't_hor': 3.0, 'folds': {'outer': 2, 'inner': 1, 'tuning': 3}},
])
def test_bad_config_exits_with_config_code(runner, tmp_path, document):
    config_path = write_config(tmp_path, document)
    result = runner.invoke(cli, ['fit', '-c', config_path, '-o', str(tmp_path / 'model')])
    assert result.exit_code == 2


def test_missing_config_file(runner, tmp_path):
    result = runner.invoke(cli, ['cv', '-c', str(tmp_path / 'absent.json')])
    assert result.exit_code == 2
