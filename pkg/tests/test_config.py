import json

import pytest

from dynpred import util
from dynpred.config import FoldSpec, load_run_config, run_config_from_dict
from dynpred.core.errors import ConfigError


def write_config(tmp_path, document):
    file_path = tmp_path / 'run.json'
    file_path.write_text(json.dumps(document))
    return file_path


def test_defaults(tmp_path):
    run_config = load_run_config(write_config(tmp_path, {'t_lm': 4, 't_hor': 3}))
    assert run_config.t_lm == 4.0
    assert run_config.folds == FoldSpec(outer=10, inner=9, tuning=10)
    assert run_config.method_names == ['cox-all']
    assert run_config.seed == 0
    assert run_config.replicates == 1
    assert run_config.require_all_markers
    assert run_config.marker('m1').window is None


def test_overrides_go_to_paths_and_top_level(tmp_path):
    document = {'t_lm': 4, 't_hor': 3, 'paths': {'survival': 'a.csv'}}
    run_config = load_run_config(write_config(tmp_path, document), survival='b.csv', seed=7, truth=None)
    assert run_config.path('survival') == 'b.csv'
    assert run_config.path('truth', required=False) is None
    assert run_config.seed == 7


def test_missing_path_is_config_error():
    run_config = run_config_from_dict({'t_lm': 4, 't_hor': 3})
    with pytest.raises(ConfigError):
        run_config.path('survival')


@pytest.mark.parametrize('document', [
    {'t_lm': 4},
    {'t_lm': 4, 't_hor': -1},
    {'t_lm': 4, 't_hor': 3, 'methods': ['cox-everything']},
    {'t_lm': 4, 't_hor': 3, 'methods': ['cox-all', 'cox-all']},
    {'t_lm': 4, 't_hor': 3, 'folds': {'inner': 1}},
    {'t_lm': 4, 't_hor': 3, 'markers': {'m1': {'nature': 'count'}}},
    {'t_lm': 4, 't_hor': 3, 'simulation': {'link': 'quadratic'}},
    {'t_lm': 4, 't_hor': 3, 'simulation': {'n_active': 5}},
])
def test_invalid_documents(document):
    with pytest.raises(ConfigError):
        run_config_from_dict(document)


def test_invalid_json(tmp_path):
    file_path = tmp_path / 'run.json'
    file_path.write_text('{"t_lm": 4,')
    with pytest.raises(ConfigError):
        load_run_config(file_path)
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / 'absent.json')


def test_to_dict_rebuilds_the_same_config():
    run_config = run_config_from_dict({
        't_lm': 4, 't_hor': 3,
        'markers': {'m1': {'window': 2.0, 'fixed': {'kind': 'poly', 'degree': 2}},
                    'm2': {'nature': 'binary', 'random': None}},
        'methods': ['cox-all', {'name': 'coxnet-lasso', 'n_lambda': 20}],
        'paths': {'survival': 's.csv'},
    })
    assert run_config_from_dict(run_config.to_dict()) == run_config
    assert run_config.marker('m2').random is None
    assert run_config.natures == {'m1': 'continuous', 'm2': 'binary'}


def test_config_hash_is_stable():
    first = run_config_from_dict({'t_lm': 4, 't_hor': 3, 'seed': 1})
    second = run_config_from_dict({'seed': 1, 't_hor': 3.0, 't_lm': 4.0})
    assert util.config_hash(first.to_dict()) == util.config_hash(second.to_dict())
    assert util.config_hash(first.to_dict()) != util.config_hash(first.replace(seed=2).to_dict())
