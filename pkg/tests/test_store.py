import pytest

from dynpred.core.errors import DataError
from dynpred.store import ModelStore


def test_save_and_load(tmp_path):
    store = ModelStore(str(tmp_path))
    store.save('pipeline', 'pipeline', {'learners': ['cox-all']})
    assert store.load('pipeline', 'pipeline') == {'learners': ['cox-all']}


def test_update_merges_payload(tmp_path):
    store = ModelStore(str(tmp_path))
    store.update('pipeline', 'pipeline', {'a': 1})
    store.update('pipeline', 'pipeline', {'b': 2})
    assert store.load('pipeline') == {'a': 1, 'b': 2}


def test_wrong_kind_or_missing_document(tmp_path):
    store = ModelStore(str(tmp_path))
    store.save('markers', 'markers', {})
    with pytest.raises(DataError):
        store.load('markers', 'learner')
    with pytest.raises(DataError):
        store.load('absent')
    (tmp_path / 'foreign.json').write_text('{"format": "other"}')
    with pytest.raises(DataError):
        store.load('foreign')
