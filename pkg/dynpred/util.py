import hashlib
import json

import numpy as np


def truncate_string_middle(s, n):
    if len(s) <= n:
        return s
    n_2 = int(n / 2 - 3)
    n_1 = int(n - n_2 - 3)
    return '{0}...{1}'.format(s[:n_1], s[-n_2:])


def _to_builtin(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return None if np.isnan(obj) else float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (set, frozenset)):
        return sorted(obj)
    raise TypeError(f'Object of type {type(obj).__name__} is not JSON serializable')


def pretty_json(obj):
    if isinstance(obj, str):
        obj = json.loads(obj)
    return json.dumps(obj, indent=4, sort_keys=True, default=_to_builtin)


def config_hash(obj):
    """SHA-256 of the canonical JSON form of `obj`."""
    canonical = json.dumps(obj, sort_keys=True, separators=(',', ':'), default=_to_builtin)
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def format_table(rows, columns, width=24):
    """Aligned-column text table; `rows` is a list of dicts."""
    def cell(value):
        if value is None:
            return 'NA'
        if isinstance(value, float):
            return 'NA' if np.isnan(value) else f'{value:.4f}'
        return truncate_string_middle(str(value), width)

    widths = [max([len(c)] + [len(cell(r.get(c))) for r in rows]) for c in columns]
    lines = ['  '.join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append('  '.join('-' * w for w in widths))
    for r in rows:
        lines.append('  '.join(cell(r.get(c)).ljust(w) for c, w in zip(columns, widths)))
    return '\n'.join(lines)


def derive_seed(*parts):
    """Stable integer seed from a hierarchical key such as (run, fold, method)."""
    return int(np.random.SeedSequence([abs(int(p)) for p in parts]).generate_state(1)[0])
