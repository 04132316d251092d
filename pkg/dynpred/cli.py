import click
import functools
import logging
import os
import sys
import time

from os import path

import humanfriendly
import numpy as np
import pandas as pd

from dynpred import __version__, logger as log_setup
from dynpred import util
from dynpred.config import SCENARIO_LINKS, config, load_run_config
from dynpred.core import dataset, ensemble, evalmetrics, simgen
from dynpred.core.errors import DataError, DynpredError
from dynpred.store import ModelStore

logger = logging.getLogger('cli')


def handle_errors(command):
    """Log library errors and exit with their code."""
    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except DynpredError as err:
            logger.error(str(err))
            sys.exit(err.exit_code)
    return wrapper


def _threads(threads):
    return threads or config.threads


def _output_dir(output):
    output = output or config.output_dir
    os.makedirs(output, exist_ok=True)
    return output


def _write_json(file_path, payload):
    with open(file_path, 'w') as f:
        f.write(util.pretty_json(payload))
    logger.info(f'Wrote {file_path}')


def _load_cohort(run_config):
    surv = dataset.load_survival(run_config.path('survival'))
    long = dataset.load_longitudinal(run_config.path('longitudinal'), run_config.natures)
    markers = [m.name for m in run_config.markers] or None
    if markers:
        absent = sorted(set(markers) - set(long.markers))
        if absent:
            raise DataError(f'Configured marker(s) {", ".join(absent)} not found in longitudinal data')
    return dataset.landmark_filter(surv, long, run_config.t_lm, run_config.t_hor,
                                   run_config.require_all_markers, markers)


def _load_truth(file_path):
    if not file_path:
        return None
    frame = pd.read_csv(file_path, dtype={'id': str})
    if 'id' not in frame.columns or 'pi0' not in frame.columns:
        raise DataError(f'{file_path}: truth file needs "id" and "pi0" columns')
    return dict(zip(frame['id'].str.strip(), frame['pi0'].astype(float)))


def _truth_values(truth, ids):
    absent = [i for i in ids if i not in truth]
    if absent:
        raise DataError(f'Truth file has no probability for subject "{absent[0]}"')
    return np.asarray([truth[i] for i in ids], dtype=float)


@click.group()
@click.option('--debug', is_flag=True, help='Enables debug mode.')
@click.option('--log-file', help='Also write the full log to this file.', default=None)
@click.version_option(__version__, '-v', '--version', message='v%(version)s',
                      help='Show dynpred version.')
def cli(debug, log_file):
    """Dynamic prediction of clinical events from repeated markers."""
    if debug:
        log_setup.set_console_level(logging.DEBUG)
        logger.debug('Debug mode is on')
    log_setup.set_log_file(log_file)


@cli.command()
@click.option('-c', '--config', 'config_path', help='Run config JSON.', required=True)
@click.option('-o', '--output', help='Output directory.', default=None)
@click.option('-s', '--seed', help='Random seed (overrides the config).', type=int, default=None)
@click.option('-n', '--n-subjects', help='Number of subjects (overrides the config).', type=int, default=None)
@click.option('--link', help='Dependence of the hazard on the summaries.',
              type=click.Choice(SCENARIO_LINKS), default=None)
@handle_errors
def simulate(config_path, output, seed, n_subjects, link):
    """Generate a synthetic landmark cohort with known event probabilities."""
    run_config = load_run_config(config_path, seed=seed)
    simulation = run_config.simulation
    changes = {k: v for k, v in (('n_subjects', n_subjects), ('link', link)) if v is not None}
    if changes:
        simulation_block = {**run_config.to_dict()['simulation'], **changes}
        run_config = run_config.replace(simulation=simulation_block)
        simulation = run_config.simulation
    output = _output_dir(output or run_config.path('output', required=False))
    scenario = simgen.make_scenario(simulation, run_config.t_lm, run_config.t_hor, seed=run_config.seed)
    generated = simgen.simulate_cohort(scenario)
    files = generated.write(output)

    cohort_config = run_config.to_dict()
    cohort_config['markers'] = cohort_config['markers'] or generated.marker_config()
    cohort_config['paths'] = {'survival': files['survival'], 'longitudinal': files['longitudinal'],
                              'truth': files['truth']}
    cohort_config['config_hash'] = util.config_hash(run_config.to_dict())
    _write_json(path.join(output, 'run_config.json'), cohort_config)


@cli.command()
@click.option('-c', '--config', 'config_path', help='Run config JSON.', required=True)
@click.option('--survival', help='Survival CSV (overrides the config).', default=None)
@click.option('--longitudinal', help='Longitudinal CSV (overrides the config).', default=None)
@click.option('-o', '--output', help='Model directory.', default=None)
@click.option('-s', '--seed', help='Random seed (overrides the config).', type=int, default=None)
@click.option('-t', '--threads', help='Parallel jobs.', type=int, default=None)
@handle_errors
def fit(config_path, survival, longitudinal, output, seed, threads):
    """Train the mixed models, the learners and the superlearner on a cohort."""
    started = time.time()
    run_config = load_run_config(config_path, survival=survival, longitudinal=longitudinal, seed=seed)
    output = _output_dir(output or run_config.path('output', required=False))
    digest = util.config_hash(run_config.to_dict())
    cohort = _load_cohort(run_config)
    pipeline = ensemble.fit_pipeline(cohort, run_config, n_jobs=_threads(threads))

    store = ModelStore(output)
    payload = pipeline.to_dict()
    store.save('markers', 'markers', payload.pop('marker_fits'))
    for name, learner in payload.pop('learners').items():
        store.save(f'learner-{name}', 'learner', learner)
    store.save('pipeline', 'pipeline', payload)
    store.update('pipeline', 'pipeline', {'config_hash': digest, 'learners': list(pipeline.learners),
                                          'version': __version__})
    _write_json(path.join(output, 'importance.json'),
                {'config_hash': digest, 'methods': pipeline.importance()})
    logger.info(f'Model saved to {output} in {humanfriendly.format_timespan(time.time() - started)}')


def load_pipeline(model_dir):
    """The fitted pipeline of a model directory and the config hash it was trained with."""
    store = ModelStore(model_dir)
    payload = store.load('pipeline', 'pipeline')
    payload['marker_fits'] = store.load('markers', 'markers')
    payload['learners'] = {name: store.load(f'learner-{name}', 'learner') for name in payload['learners']}
    return ensemble.FittedPipeline.from_dict(payload), payload.get('config_hash')


@cli.command()
@click.option('-m', '--model', 'model_dir', help='Model directory written by "fit".', required=True)
@click.option('--subjects', help='CSV with id and covariates (time/event optional).', required=True)
@click.option('--longitudinal', help='Longitudinal CSV of the new subjects.', required=True)
@click.option('-o', '--output', help='Predictions CSV.', default='predictions.csv')
@handle_errors
def predict(model_dir, subjects, longitudinal, output):
    """Predict the probability of event within the horizon for new subjects."""
    pipeline, digest = load_pipeline(model_dir)
    run_config = pipeline.run_config
    surv = dataset.load_subjects(subjects)
    long = dataset.load_longitudinal(longitudinal, run_config.natures)
    absent = sorted(set(pipeline.marker_fits) - set(long.markers))
    if absent:
        raise DataError(f'Longitudinal data has no marker {", ".join(absent)}')
    cohort = dataset.landmark_filter(surv, long, run_config.t_lm, run_config.t_hor,
                                     require_all_markers=False)
    predicted = pipeline.predict(cohort)
    rows = predicted.reset_index().melt(id_vars='id', var_name='method', value_name='prediction')
    rows = rows.rename(columns={'id': 'subject'})
    rows['config_hash'] = digest
    rows.to_csv(output, index=False, float_format='%.17g')
    logger.info(f'Wrote {len(predicted)} x {len(pipeline.methods)} predictions to {output}')


@cli.command()
@click.option('-c', '--config', 'config_path', help='Run config JSON.', required=True)
@click.option('--survival', help='Survival CSV (overrides the config).', default=None)
@click.option('--longitudinal', help='Longitudinal CSV (overrides the config).', default=None)
@click.option('--truth', help='truth.csv of a simulated cohort, adds MSEP.', default=None)
@click.option('-o', '--output', help='Output directory.', default=None)
@click.option('-s', '--seed', help='Random seed (overrides the config).', type=int, default=None)
@click.option('-t', '--threads', help='Parallel jobs.', type=int, default=None)
@handle_errors
def cv(config_path, survival, longitudinal, truth, output, seed, threads):
    """Cross-validate every configured method and the superlearner."""
    started = time.time()
    run_config = load_run_config(config_path, survival=survival, longitudinal=longitudinal,
                                 truth=truth, seed=seed)
    output = _output_dir(output or run_config.path('output', required=False))
    digest = util.config_hash(run_config.to_dict())
    cohort = _load_cohort(run_config)
    truth = _load_truth(run_config.path('truth', required=False))

    results = []
    for r in range(run_config.replicates):
        replicate_seed = run_config.seed if run_config.replicates == 1 else util.derive_seed(run_config.seed, r)
        result = ensemble.run_pipeline_cv(cohort, run_config, n_jobs=_threads(threads), truth=truth,
                                          seed=replicate_seed)
        result.predictions.insert(0, 'replicate', r)
        results.append(result)
        logger.info(f'Replicate {r + 1}/{run_config.replicates} finished')

    predictions = pd.concat([r.predictions for r in results], ignore_index=True)
    predictions['config_hash'] = digest
    predictions.to_csv(path.join(output, 'predictions.csv'), index=False, float_format='%.17g')
    summary = ensemble.summarize_metrics([r.metrics for r in results])
    _write_json(path.join(output, 'metrics.json'), {
        'config_hash': digest, 'summary': summary,
        'replicates': [r.to_dict() for r in results]})
    fold_weights = [w for r in results for w in r.weights.values()]
    _write_json(path.join(output, 'weights.json'), {
        'config_hash': digest, 'summary': ensemble.summarize_weights(fold_weights),
        'replicates': [{str(k): w for k, w in r.weights.items()} for r in results]})
    print(_summary_table(summary))
    logger.info(f'Cross-validation finished in {humanfriendly.format_timespan(time.time() - started)}')


def _summary_table(summary):
    rows = []
    for method, values in summary.items():
        rows.append({'method': method,
                     'brier': values['brier']['mean'], 'brier_sd': values['brier']['sd'],
                     'auc': values['auc']['mean'], 'auc_sd': values['auc']['sd'],
                     'msep': values['msep']['mean']})
    return util.format_table(rows, ['method', 'brier', 'brier_sd', 'auc', 'auc_sd', 'msep'])


@cli.command()
@click.option('-p', '--predictions', help='Predictions CSV (subject, method, prediction).', required=True)
@click.option('--survival', help='Survival CSV of the predicted subjects.', required=True)
@click.option('--t-lm', help='Landmark time.', type=float, required=True)
@click.option('--t-hor', help='Prediction horizon.', type=float, required=True)
@click.option('--truth', help='truth.csv of a simulated cohort, adds MSEP.', default=None)
@click.option('-o', '--output', help='Metrics JSON.', default='metrics.json')
@handle_errors
def evaluate(predictions, survival, t_lm, t_hor, truth, output):
    """IPCW Brier score and AUC of stored predictions."""
    frame = pd.read_csv(predictions, dtype={'subject': str})
    missing = [c for c in ('subject', 'method', 'prediction') if c not in frame.columns]
    if missing:
        raise DataError(f'{predictions}: missing column(s) {", ".join(missing)}')
    surv = dataset.load_survival(survival).frame.set_index('id')
    truth = _load_truth(truth)

    common = sorted(set(frame['subject']) & set(surv.index))
    if not common:
        raise DataError('No subject id in common between predictions and survival data')
    at_risk = [i for i in common if surv.loc[i, 'time'] > t_lm]
    if len(at_risk) < len(common):
        logger.warning(f'{len(common) - len(at_risk)} subjects not at risk at {t_lm:g} are ignored')
    if not at_risk:
        raise DataError(f'No predicted subject is at risk at landmark time {t_lm:g}')
    times = surv.loc[at_risk, 'time'].to_numpy(dtype=float) - t_lm
    events = ((surv.loc[at_risk, 'event'].to_numpy() == 1) & (times < t_hor)).astype(int)
    true_p = None if truth is None else _truth_values(truth, at_risk)

    metrics, rows = {}, []
    for method, group in frame.groupby('method', sort=False):
        values = group.drop_duplicates('subject', keep='last').set_index('subject')['prediction']
        if not set(at_risk) <= set(values.index):
            raise DataError(f'Method "{method}" has no prediction for some subjects')
        report = evalmetrics.evaluate(values.loc[at_risk].to_numpy(dtype=float), times, events, t_hor, true_p)
        metrics[method] = report.to_dict()
        rows.append({'method': method, **report.to_dict()})
    digest = util.config_hash({'predictions': path.basename(predictions), 't_lm': t_lm, 't_hor': t_hor})
    _write_json(output, {'config_hash': digest, 't_lm': t_lm, 't_hor': t_hor, 'metrics': metrics})
    print(util.format_table(rows, ['method', 'brier', 'auc', 'msep', 'n_cases', 'n_controls']))


@cli.command()
@click.option('-c', '--config', 'config_path', help='Run config JSON.', required=True)
@click.option('-o', '--output', help='Output directory.', default=None)
@click.option('-r', '--replicates', help='Learning datasets (overrides the config).', type=int, default=None)
@click.option('-s', '--seed', help='Random seed (overrides the config).', type=int, default=None)
@click.option('-t', '--threads', help='Parallel jobs.', type=int, default=None)
@handle_errors
def benchmark(config_path, output, replicates, seed, threads):
    """Simulation study: train on simulated cohorts, score on an external one."""
    started = time.time()
    run_config = load_run_config(config_path, replicates=replicates, seed=seed)
    output = _output_dir(output or run_config.path('output', required=False))
    digest = util.config_hash(run_config.to_dict())
    study = ensemble.run_simulation_study(run_config, n_jobs=_threads(threads))
    _write_json(path.join(output, 'benchmark.json'), {'config_hash': digest, **study.to_dict()})
    print(_summary_table(study.summary))
    logger.info(f'Simulation study finished in {humanfriendly.format_timespan(time.time() - started)}')
