import json
import logging

from os import path

from dynpred.core.errors import DataError
from dynpred.util import _to_builtin

logger = logging.getLogger('store')

FORMAT = 'dynpred'
VERSION = 1


def pack(kind, payload):
    return {'format': FORMAT, 'version': VERSION, 'kind': kind, 'payload': payload}


def unpack(document, kind=None):
    if not isinstance(document, dict) or document.get('format') != FORMAT:
        raise DataError('Not a dynpred model document')
    if document.get('version') != VERSION:
        raise DataError(f'Unsupported model document version {document.get("version")}')
    if kind is not None and document.get('kind') != kind:
        raise DataError(f'Expected a "{kind}" document, found "{document.get("kind")}"')
    return document['payload']


class ModelStore():
    """Versioned JSON documents kept in one model directory."""

    def __init__(self, directory):
        self.directory = directory

    def path(self, name):
        return path.join(self.directory, f'{name}.json')

    def save(self, name, kind, payload):
        with open(self.path(name), 'w') as f:
            json.dump(pack(kind, payload), f, indent=1, default=_to_builtin)
        logger.debug(f'Saved {kind} document to {self.path(name)}')

    def update(self, name, kind, payload):
        if path.exists(self.path(name)):
            stored = self.load(name, kind)
        else:
            stored = {}
        stored.update(payload)
        self.save(name, kind, stored)

    def load(self, name, kind=None):
        if not path.exists(self.path(name)):
            raise DataError(f'Model document {self.path(name)} not found')
        with open(self.path(name), 'r') as f:
            return unpack(json.load(f), kind)
