import logging

from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Tuple

import numpy as np
import pandas as pd

from dynpred.core.errors import DataError

logger = logging.getLogger('dataset')

SURVIVAL_COLUMNS = ('id', 'time', 'event')
LONGITUDINAL_COLUMNS = ('id', 'marker', 'time', 'value')


@dataclass(frozen=True)
class SurvivalTable:
    """One row per subject: id, time, event and the baseline covariates."""
    frame: pd.DataFrame
    covariates: Tuple[str, ...] = ()

    @property
    def binary_covariates(self):
        return tuple(c for c in self.covariates if _is_binary(self.frame[c]))

    def __len__(self):
        return len(self.frame)


@dataclass(frozen=True)
class LongitudinalTable:
    """Long-format measurements sorted by subject, marker and time."""
    frame: pd.DataFrame
    natures: Dict[str, str] = field(default_factory=dict)

    @property
    def markers(self):
        return sorted(self.frame['marker'].unique())

    def nature(self, marker):
        return self.natures.get(marker, 'continuous')

    def for_marker(self, marker) -> pd.DataFrame:
        return self.frame[self.frame['marker'] == marker]

    def series(self, marker) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
        """Subject id -> (times, values) of one marker."""
        out = {}
        for subject_id, group in self.for_marker(marker).groupby('id', sort=True):
            out[subject_id] = (group['time'].to_numpy(dtype=float),
                               group['value'].to_numpy(dtype=float))
        return out

    def subset(self, ids) -> 'LongitudinalTable':
        frame = self.frame[self.frame['id'].isin(set(ids))].reset_index(drop=True)
        return replace(self, frame=frame)


@dataclass(frozen=True)
class LandmarkCohort:
    """Subjects at risk at `t_lm` with histories truncated to `t_lm`.

    `survival['time']` keeps the observed time on the study clock and
    `survival['event']` is the horizon-capped indicator.
    """
    t_lm: float
    t_hor: float
    survival: pd.DataFrame
    longitudinal: LongitudinalTable
    covariates: Tuple[str, ...] = ()
    binary_covariates: Tuple[str, ...] = ()
    n_dropped: int = 0

    @property
    def n(self):
        return len(self.survival)

    @property
    def ids(self) -> np.ndarray:
        return self.survival['id'].to_numpy(dtype=object)

    @property
    def times(self) -> np.ndarray:
        """Observed times on the landmark clock (0 = t_lm)."""
        return self.survival['time'].to_numpy(dtype=float) - self.t_lm

    @property
    def events(self) -> np.ndarray:
        return self.survival['event'].to_numpy(dtype=int)

    def covariate_frame(self) -> pd.DataFrame:
        return self.survival.set_index('id')[list(self.covariates)]

    def subset(self, ids) -> 'LandmarkCohort':
        keep = set(ids)
        survival = self.survival[self.survival['id'].isin(keep)].reset_index(drop=True)
        return replace(self, survival=survival, longitudinal=self.longitudinal.subset(keep))

    def with_events(self, events) -> 'LandmarkCohort':
        survival = self.survival.copy()
        survival['event'] = np.asarray(events, dtype=int)
        return replace(self, survival=survival)


def _is_binary(series):
    values = pd.unique(series.dropna())
    return len(values) > 0 and set(np.asarray(values, dtype=float)) <= {0.0, 1.0}


def _read_csv(file_path, required):
    try:
        frame = pd.read_csv(file_path, encoding='utf-8', dtype={'id': str, 'marker': str})
    except FileNotFoundError:
        raise DataError(f'File {file_path} not found')
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as err:
        raise DataError(f'Could not parse {file_path}: {err}')
    frame.columns = [str(c).strip() for c in frame.columns]
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise DataError(f'{file_path}: missing column(s) {", ".join(missing)}')
    return frame


def _numeric_column(frame, column, file_path):
    values = pd.to_numeric(frame[column], errors='coerce')
    bad = np.flatnonzero(values.isna().to_numpy())
    if len(bad):
        raise DataError(f'{file_path}: non-numeric {column} "{frame[column].iloc[bad[0]]}"',
                        row=int(bad[0]) + 1)
    return values.astype(float)


def _first_duplicate(frame, keys):
    dup = np.flatnonzero(frame.duplicated(subset=list(keys), keep='first').to_numpy())
    return int(dup[0]) if len(dup) else None


def load_survival(file_path) -> SurvivalTable:
    frame = _read_csv(file_path, SURVIVAL_COLUMNS)
    frame['id'] = frame['id'].astype(str).str.strip()
    frame['time'] = _numeric_column(frame, 'time', file_path)
    frame['event'] = _numeric_column(frame, 'event', file_path)

    bad = np.flatnonzero(~frame['event'].isin([0, 1]).to_numpy())
    if len(bad):
        raise DataError(f'{file_path}: event must be 0 or 1, found {frame["event"].iloc[bad[0]]:g}',
                        row=int(bad[0]) + 1)
    bad = np.flatnonzero((frame['time'] <= 0).to_numpy())
    if len(bad):
        raise DataError(f'{file_path}: time must be positive', row=int(bad[0]) + 1)
    dup = _first_duplicate(frame, ['id'])
    if dup is not None:
        raise DataError(f'{file_path}: duplicate subject id "{frame["id"].iloc[dup]}"', row=dup + 1)
    frame['event'] = frame['event'].astype(int)

    covariates = []
    for column in frame.columns:
        if column in SURVIVAL_COLUMNS:
            continue
        values = pd.to_numeric(frame[column], errors='coerce')
        if values.isna().any():
            if pd.api.types.is_numeric_dtype(frame[column]):
                row = int(np.flatnonzero(values.isna().to_numpy())[0])
                raise DataError(f'{file_path}: missing value in covariate "{column}"', row=row + 1)
            logger.warning(f'Column "{column}" of {file_path} is not numeric, ignored')
            continue
        frame[column] = values.astype(float)
        covariates.append(column)

    frame = frame[list(SURVIVAL_COLUMNS) + covariates].sort_values('id').reset_index(drop=True)
    logger.debug(f'Loaded {len(frame)} survival records with covariates {covariates}')
    return SurvivalTable(frame=frame, covariates=tuple(covariates))


def load_subjects(file_path) -> SurvivalTable:
    """Subjects to predict for: a survival file, or `id` plus covariates when outcomes are unknown."""
    frame = _read_csv(file_path, ('id',))
    if 'time' in frame.columns:
        return load_survival(file_path)
    frame['time'] = np.inf
    frame['event'] = 0
    frame = frame[list(SURVIVAL_COLUMNS) + [c for c in frame.columns if c not in SURVIVAL_COLUMNS]].copy()
    frame['id'] = frame['id'].astype(str).str.strip()
    covariates = [c for c in frame.columns if c not in SURVIVAL_COLUMNS]
    for column in covariates:
        frame[column] = _numeric_column(frame, column, file_path)
    frame = frame.sort_values('id').reset_index(drop=True)
    return SurvivalTable(frame=frame, covariates=tuple(covariates))


def load_longitudinal(file_path, natures: Optional[Dict[str, str]] = None) -> LongitudinalTable:
    natures = dict(natures or {})
    frame = _read_csv(file_path, LONGITUDINAL_COLUMNS)
    frame = frame[list(LONGITUDINAL_COLUMNS)].copy()
    frame['id'] = frame['id'].astype(str).str.strip()
    frame['marker'] = frame['marker'].astype(str).str.strip()
    frame['time'] = _numeric_column(frame, 'time', file_path)
    frame['value'] = _numeric_column(frame, 'value', file_path)

    for marker, nature in natures.items():
        if nature != 'binary':
            continue
        rows = (frame['marker'] == marker) & ~frame['value'].isin([0.0, 1.0])
        bad = np.flatnonzero(rows.to_numpy())
        if len(bad):
            raise DataError(f'{file_path}: binary marker "{marker}" has value '
                            f'{frame["value"].iloc[bad[0]]:g}', row=int(bad[0]) + 1)

    dup = _first_duplicate(frame, ['id', 'marker', 'time'])
    if dup is not None:
        raise DataError(f'{file_path}: duplicate measurement for subject "{frame["id"].iloc[dup]}" '
                        f'marker "{frame["marker"].iloc[dup]}" at time {frame["time"].iloc[dup]:g}',
                        row=dup + 1)

    undeclared = sorted(set(frame['marker']) - set(natures))
    if undeclared:
        logger.debug(f'Markers {undeclared} have no declared nature, assuming continuous')
    frame = frame.sort_values(['id', 'marker', 'time'], kind='mergesort').reset_index(drop=True)
    return LongitudinalTable(frame=frame, natures=natures)


def landmark_filter(surv: SurvivalTable, long: LongitudinalTable, t_lm, t_hor,
                    require_all_markers=True, markers=None) -> LandmarkCohort:
    """Keep subjects with t_obs > t_lm, truncate histories to t <= t_lm and cap events at the horizon.

    `markers` restricts the histories to those markers.
    """
    if t_lm <= 0 or t_hor <= 0:
        raise DataError('Landmark time and horizon must be positive')

    frame = surv.frame
    at_risk = frame[frame['time'] > t_lm].copy()
    history = long.frame[(long.frame['time'] <= t_lm) & long.frame['id'].isin(set(at_risk['id']))]
    if markers is not None:
        history = history[history['marker'].isin(set(markers))]

    if require_all_markers:
        markers = list(markers) if markers is not None else long.markers
        if markers:
            has_all = history[history['marker'].isin(markers)].groupby('id')['marker'].nunique()
            complete = set(has_all[has_all == len(markers)].index)
            missing = len(at_risk) - int(at_risk['id'].isin(complete).sum())
            if missing:
                logger.info(f'{missing} at-risk subjects lack a measurement of some marker, dropped')
            at_risk = at_risk[at_risk['id'].isin(complete)].copy()
            history = history[history['id'].isin(complete)]

    if at_risk.empty:
        raise DataError(f'No subject at risk at landmark time {t_lm:g}')

    at_risk['event'] = ((at_risk['event'] == 1) &
                        (at_risk['time'] - t_lm < t_hor)).astype(int)
    at_risk = at_risk.sort_values('id').reset_index(drop=True)
    history = history.reset_index(drop=True)

    cohort = LandmarkCohort(
        t_lm=float(t_lm), t_hor=float(t_hor), survival=at_risk,
        longitudinal=LongitudinalTable(frame=history, natures=long.natures),
        covariates=surv.covariates, binary_covariates=surv.binary_covariates,
        n_dropped=len(frame) - len(at_risk))
    logger.info(f'Landmark {t_lm:g}: {cohort.n} subjects at risk, {cohort.n_dropped} dropped, '
                f'{int(cohort.events.sum())} events within horizon {t_hor:g}')
    return cohort
