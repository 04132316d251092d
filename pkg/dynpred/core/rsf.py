import logging
import math

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from joblib import Parallel, delayed
from lifelines.utils import concordance_index

from dynpred.core.errors import ConfigError, DataError
from dynpred.core.evalmetrics import nelson_aalen
from dynpred.core.survreg import as_matrix

logger = logging.getLogger('rsf')

DEFAULT_TREES = 500
DEFAULT_NODESIZE = 15
TUNING_TREES = 100
MAX_CANDIDATES = 32


def default_mtry(p):
    return max(1, int(math.ceil(math.sqrt(p))))


def _logrank_scores(times, events, weights, left) -> np.ndarray:
    """Absolute standardized log-rank statistic of every column of the (m, c) `left` mask."""
    event_times = np.unique(times[events == 1])
    if len(event_times) == 0:
        return np.zeros(left.shape[1])
    at_risk = (times[:, None] >= event_times[None, :]) * weights[:, None]
    died = ((times[:, None] == event_times[None, :]) & (events[:, None] == 1)) * weights[:, None]
    Y = at_risk.sum(axis=0)
    d = died.sum(axis=0)
    L = left.astype(float)
    ratio = (L.T @ at_risk) / Y
    numerator = np.sum(L.T @ died - ratio * d, axis=1)
    variance = np.sum(ratio * (1.0 - ratio) * d * (Y - d) / np.where(Y > 1, Y - 1, 1.0), axis=1)
    with np.errstate(divide='ignore', invalid='ignore'):
        scores = np.abs(numerator) / np.sqrt(variance)
    return np.where(variance > 1e-12, scores, 0.0)


def logrank_split_score(times, events, left, weights=None) -> float:
    """Two-group log-rank score of the split `left` versus its complement."""
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    left = np.asarray(left, dtype=bool)
    weights = np.ones(len(times)) if weights is None else np.asarray(weights, dtype=float)
    return float(_logrank_scores(times, events, weights, left[:, None])[0])


@dataclass(frozen=True)
class SurvivalTree:
    """Flat node arrays; `leaf[k] >= 0` marks a terminal node and indexes `chf`."""
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf: np.ndarray
    chf: np.ndarray            # (n_leaves, len(grid))
    inbag: np.ndarray          # bootstrap multiplicity per training subject

    @property
    def n_leaves(self):
        return self.chf.shape[0]

    @property
    def used_features(self):
        return set(int(f) for f in self.feature[self.leaf < 0])

    def apply(self, X) -> np.ndarray:
        """Leaf index reached by each row."""
        node = np.zeros(len(X), dtype=int)
        active = self.leaf[node] < 0
        while active.any():
            rows = np.flatnonzero(active)
            current = node[rows]
            go_left = X[rows, self.feature[current]] <= self.threshold[current]
            node[rows] = np.where(go_left, self.left[current], self.right[current])
            active = self.leaf[node] < 0
        return self.leaf[node]

    def to_dict(self):
        steps = np.diff(self.chf, axis=1, prepend=0.0)
        rows, cols = np.nonzero(steps)
        return {'feature': self.feature.tolist(), 'threshold': self.threshold.tolist(),
                'left': self.left.tolist(), 'right': self.right.tolist(),
                'leaf': self.leaf.tolist(), 'n_leaves': self.n_leaves,
                'jumps': [rows.tolist(), cols.tolist(), steps[rows, cols].tolist()]}

    @classmethod
    def from_dict(cls, data, n_grid):
        steps = np.zeros((data['n_leaves'], n_grid))
        rows, cols, values = data['jumps']
        steps[np.asarray(rows, dtype=int), np.asarray(cols, dtype=int)] = values
        return cls(feature=np.asarray(data['feature'], dtype=int),
                   threshold=np.asarray(data['threshold'], dtype=float),
                   left=np.asarray(data['left'], dtype=int),
                   right=np.asarray(data['right'], dtype=int),
                   leaf=np.asarray(data['leaf'], dtype=int),
                   chf=np.cumsum(steps, axis=1), inbag=np.zeros(0, dtype=int))


def _candidates(values, rng):
    unique = np.unique(values)
    if len(unique) < 2:
        return np.zeros(0)
    midpoints = 0.5 * (unique[:-1] + unique[1:])
    if len(unique) > MAX_CANDIDATES + 1:
        midpoints = np.sort(rng.choice(midpoints, MAX_CANDIDATES, replace=False))
    return midpoints


def _best_split(X, times, events, members, counts, mtry, nodesize, rng):
    best = (0.0, None, None)
    columns = np.sort(rng.choice(X.shape[1], size=min(mtry, X.shape[1]), replace=False))
    node_times = times[members]
    node_events = events[members]
    for j in columns:
        values = X[members, j]
        thresholds = _candidates(values, rng)
        if not len(thresholds):
            continue
        left = values[:, None] <= thresholds[None, :]
        n_left = left.sum(axis=0)
        admissible = (n_left >= nodesize) & (len(members) - n_left >= nodesize)
        if not admissible.any():
            continue
        left = left[:, admissible]
        thresholds = thresholds[admissible]
        scores = _logrank_scores(node_times, node_events, counts, left)
        k = int(np.argmax(scores))
        if scores[k] > best[0]:
            best = (float(scores[k]), int(j), float(thresholds[k]))
    return best


def grow_tree(X, times, events, sample, mtry, nodesize, rng, grid) -> SurvivalTree:
    """Grow one tree on the bootstrap `sample` (training row indices, with repeats).

    A node with fewer than max(2S, S+1) distinct subjects or without events is
    a leaf; every split leaves at least S distinct subjects on each side.
    """
    X = np.asarray(X, dtype=float)
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    members, counts = np.unique(np.asarray(sample, dtype=int), return_counts=True)
    inbag = np.bincount(members, weights=counts, minlength=len(times)).astype(int)
    feature, threshold, left, right, leaf, chf = [], [], [], [], [], []

    def new_node():
        for column in (feature, threshold, left, right, leaf):
            column.append(-1)
        threshold[-1] = np.nan
        return len(feature) - 1

    stack = [(new_node(), members, counts)]
    min_members = max(2 * nodesize, nodesize + 1)
    while stack:
        node, node_members, node_counts = stack.pop()
        split = (0.0, None, None)
        has_events = events[node_members].any()
        if len(node_members) >= min_members and has_events:
            split = _best_split(X, times, events, node_members, node_counts, mtry, nodesize, rng)
        if split[1] is None:
            leaf[node] = len(chf)
            hazard = nelson_aalen(np.repeat(times[node_members], node_counts),
                                  np.repeat(events[node_members], node_counts))
            chf.append(hazard(grid))
            continue
        _, j, cut = split
        goes_left = X[node_members, j] <= cut
        feature[node], threshold[node] = j, cut
        left[node], right[node] = new_node(), new_node()
        stack.append((right[node], node_members[~goes_left], node_counts[~goes_left]))
        stack.append((left[node], node_members[goes_left], node_counts[goes_left]))

    return SurvivalTree(feature=np.asarray(feature, dtype=int),
                        threshold=np.asarray(threshold, dtype=float),
                        left=np.asarray(left, dtype=int), right=np.asarray(right, dtype=int),
                        leaf=np.asarray(leaf, dtype=int),
                        chf=np.asarray(chf, dtype=float).reshape(len(chf), len(grid)),
                        inbag=inbag)


def _grow_bootstrap_tree(X, times, events, mtry, nodesize, seed, b, grid):
    rng = np.random.default_rng([seed, b])
    sample = rng.integers(0, len(times), size=len(times))
    return grow_tree(X, times, events, sample, mtry, nodesize, rng, grid)


@dataclass(frozen=True)
class TrainingData:
    X: np.ndarray
    times: np.ndarray
    events: np.ndarray


@dataclass(frozen=True)
class Forest:
    columns: Tuple[str, ...]
    trees: Tuple[SurvivalTree, ...]
    grid: np.ndarray
    mtry: int
    nodesize: int
    seed: int
    data: Optional[TrainingData] = field(default=None, compare=False)

    @property
    def n_trees(self):
        return len(self.trees)

    def _matrix(self, rows):
        if isinstance(rows, pd.DataFrame):
            X, _ = as_matrix(rows, self.columns)
            return X
        return np.asarray(rows, dtype=float).reshape(-1, len(self.columns))

    def chf_at(self, rows, t) -> np.ndarray:
        """Ensemble cumulative hazard at `t`, averaged over trees."""
        X = self._matrix(rows)
        k = np.searchsorted(self.grid, t, side='right') - 1
        if k < 0:
            return np.zeros(len(X))
        return np.mean([tree.chf[tree.apply(X), k] for tree in self.trees], axis=0)

    def to_dict(self):
        return {'columns': list(self.columns), 'grid': self.grid.tolist(), 'mtry': self.mtry,
                'nodesize': self.nodesize, 'seed': self.seed,
                'trees': [tree.to_dict() for tree in self.trees]}

    @classmethod
    def from_dict(cls, data):
        grid = np.asarray(data['grid'], dtype=float)
        return cls(columns=tuple(data['columns']), grid=grid, mtry=int(data['mtry']),
                   nodesize=int(data['nodesize']), seed=int(data['seed']),
                   trees=tuple(SurvivalTree.from_dict(t, len(grid)) for t in data['trees']))


def fit_rsf(design, times, events, n_trees=DEFAULT_TREES, mtry=None, nodesize=DEFAULT_NODESIZE,
            seed=0, columns=None, n_jobs=1) -> Forest:
    """Random survival forest; tree b draws its bootstrap and splits from default_rng([seed, b])."""
    if n_trees < 1:
        raise ConfigError('A forest needs at least one tree')
    X, columns = as_matrix(design, columns)
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    if events.sum() == 0:
        raise DataError('Random survival forest needs at least one event')
    mtry = default_mtry(len(columns)) if mtry is None else min(int(mtry), len(columns))
    grid = np.unique(times[events == 1])
    trees = Parallel(n_jobs=n_jobs)(
        delayed(_grow_bootstrap_tree)(X, times, events, mtry, nodesize, seed, b, grid)
        for b in range(n_trees))
    logger.debug(f'Grew {n_trees} trees (M={mtry}, S={nodesize}), '
                 f'mean {np.mean([t.n_leaves for t in trees]):.1f} leaves')
    return Forest(columns=columns, trees=tuple(trees), grid=grid, mtry=mtry, nodesize=nodesize,
                  seed=seed, data=TrainingData(X=X, times=times, events=events))


def predict_rsf_probability(forest: Forest, rows, t_hor) -> np.ndarray:
    """1 - exp(-mean tree CHF at t_hor)."""
    return 1.0 - np.exp(-forest.chf_at(rows, t_hor))


def _training_data(forest):
    if forest.data is None:
        raise DataError('Forest was loaded without its training data; OOB quantities are unavailable')
    return forest.data


def _error(times, events, mortality) -> float:
    """1 - Harrell concordance; 0.5 when no pair is comparable."""
    if len(times) < 2:
        return 0.5
    try:
        return 1.0 - concordance_index(times, -mortality, events)
    except ZeroDivisionError:
        return 0.5


def oob_mortality(forest: Forest):
    """OOB ensemble mortality (CHF summed over the event-time grid) and the OOB-covered mask."""
    data = _training_data(forest)
    total = np.zeros(len(data.times))
    n_oob = np.zeros(len(data.times))
    for tree in forest.trees:
        oob = np.flatnonzero(tree.inbag == 0)
        if not len(oob):
            continue
        total[oob] += tree.chf[tree.apply(data.X[oob])].sum(axis=1)
        n_oob[oob] += 1
    covered = n_oob > 0
    mortality = np.full(len(total), np.nan)
    mortality[covered] = total[covered] / n_oob[covered]
    return mortality, covered


def oob_error(forest: Forest) -> float:
    data = _training_data(forest)
    mortality, covered = oob_mortality(forest)
    if not covered.all():
        logger.debug(f'{int((~covered).sum())} subjects are in-bag in every tree, excluded from OOB error')
    return _error(data.times[covered], data.events[covered], mortality[covered])


def _tree_error(tree, X, times, events, oob):
    mortality = tree.chf[tree.apply(X[oob])].sum(axis=1)
    return _error(times[oob], events[oob], mortality)


def vimp(forest: Forest, column, seed=0) -> float:
    """Mean over trees of the OOB error increase after permuting `column` among OOB rows."""
    data = _training_data(forest)
    j = forest.columns.index(column) if isinstance(column, str) else int(column)
    rng = np.random.default_rng([forest.seed, seed, j])
    increases = []
    for tree in forest.trees:
        oob = np.flatnonzero(tree.inbag == 0)
        if not len(oob):
            continue
        if j not in tree.used_features:
            increases.append(0.0)
            continue
        base = _tree_error(tree, data.X, data.times, data.events, oob)
        permuted = data.X[oob].copy()
        permuted[:, j] = rng.permutation(permuted[:, j])
        mortality = tree.chf[tree.apply(permuted)].sum(axis=1)
        increases.append(_error(data.times[oob], data.events[oob], mortality) - base)
    return float(np.mean(increases)) if increases else 0.0


def vimp_all(forest: Forest, seed=0, n_jobs=1) -> dict:
    values = Parallel(n_jobs=n_jobs)(delayed(vimp)(forest, j, seed) for j in range(len(forest.columns)))
    return dict(zip(forest.columns, values))


def default_grids(p):
    mtry = sorted({default_mtry(p), max(1, math.ceil(p / 3)), max(1, math.ceil(p / 2)), p})
    return mtry, [5, 15, 30, 50]


def tune_rsf(design, times, events, mtry_grid: Optional[Sequence[int]] = None,
             nodesize_grid: Optional[Sequence[int]] = None, n_trees=TUNING_TREES, seed=0,
             columns=None, n_jobs=1):
    """Grid search of (M, S) by OOB error; ties go to smaller M, then larger S."""
    X, columns = as_matrix(design, columns)
    default_m, default_s = default_grids(len(columns))
    mtry_grid = list(mtry_grid or default_m)
    nodesize_grid = list(nodesize_grid or default_s)
    table = []
    for m in mtry_grid:
        for s in nodesize_grid:
            forest = fit_rsf(X, times, events, n_trees=n_trees, mtry=m, nodesize=s, seed=seed,
                             columns=columns, n_jobs=n_jobs)
            error = oob_error(forest)
            logger.debug(f'RSF tuning M={m} S={s}: OOB error {error:.4f}')
            table.append((error, m, -s))
    error, m, s = min(table)
    logger.debug(f'RSF tuned M={m} S={-s} (OOB error {error:.4f})')
    return m, -s


def select_vars_rsf(forest: Forest, seed=0, n_jobs=1, importance=None) -> Tuple[str, ...]:
    """Columns with positive VIMP; all columns when none is positive."""
    if importance is None:
        importance = vimp_all(forest, seed, n_jobs)
    selected = tuple(c for c in forest.columns if importance[c] > 0)
    if not selected:
        logger.warning('No column has positive VIMP, keeping every column')
        return forest.columns
    return selected
