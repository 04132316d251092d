import json
import logging
import os

from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from dotenv import load_dotenv

from dynpred import logger
from dynpred.core.errors import ConfigError

env_path = Path('.') / 'environments/dev.env'
load_dotenv(dotenv_path=env_path)

logger.set_log_file(os.getenv('DYNPRED_LOG_FILE'))
logger = logging.getLogger('config')

METHOD_NAMES = (
    'cox-all', 'cox-select',
    'coxnet-lasso', 'coxnet-ridge', 'coxnet-elastic',
    'spls-nosparse', 'spls-maxsparse', 'spls-optimize',
    'rsf-default', 'rsf-optimize', 'rsf-select',
    'superlearner',
)
MARKER_NATURES = ('continuous', 'binary')
SCENARIO_LINKS = ('linear', 'interactions', 'nonlinear')


class Config:
    threads = int(os.getenv('DYNPRED_THREADS') or os.cpu_count() or 1)
    log_file = os.getenv('DYNPRED_LOG_FILE')
    output_dir = os.getenv('DYNPRED_OUTPUT_DIR') or 'dynpred-output'
    seed = int(os.getenv('DYNPRED_SEED') or 0)

    def __repr__(self):
        return (f'Config(threads={self.threads}, log_file={self.log_file}, '
                f'output_dir={self.output_dir}, seed={self.seed})')


config = Config()
logger.debug(config)


@dataclass(frozen=True)
class BasisConfig:
    kind: str = 'ns'                     # 'ns' natural spline or 'poly'
    degree: int = 1                      # polynomial degree for 'poly'
    knots: Optional[Tuple[float, ...]] = None   # None -> history tertiles
    boundary: Optional[Tuple[float, float]] = None


@dataclass(frozen=True)
class MarkerSpec:
    name: str
    nature: str = 'continuous'
    fixed: BasisConfig = BasisConfig()
    random: Optional[BasisConfig] = BasisConfig(kind='poly', degree=1)
    window: Optional[float] = None
    summaries: Tuple[str, ...] = ('random_effects', 'level', 'slope', 'cumulative')
    summary_options: Tuple[Tuple[str, float], ...] = ()


@dataclass(frozen=True)
class MethodSpec:
    name: str
    params: Tuple[Tuple[str, object], ...] = ()

    @property
    def options(self):
        return dict(self.params)


@dataclass(frozen=True)
class FoldSpec:
    outer: int = 10
    inner: int = 9
    tuning: int = 10


@dataclass(frozen=True)
class SimulationSpec:
    n_subjects: int = 500
    n_active: int = 4
    link: str = 'linear'
    shape: float = 1.5
    scale: Optional[float] = None
    censoring_rate: float = 0.3
    n_validation: int = 2000


@dataclass(frozen=True)
class RunConfig:
    t_lm: float
    t_hor: float
    markers: Tuple[MarkerSpec, ...] = ()
    methods: Tuple[MethodSpec, ...] = ()
    folds: FoldSpec = FoldSpec()
    seed: int = 0
    replicates: int = 1
    require_all_markers: bool = True
    refit_longitudinal: bool = True
    paths: Tuple[Tuple[str, str], ...] = ()
    simulation: SimulationSpec = SimulationSpec()

    @property
    def path_map(self) -> Dict[str, str]:
        return dict(self.paths)

    def path(self, key, required=True):
        value = self.path_map.get(key)
        if required and not value:
            raise ConfigError(f'Missing "paths.{key}" in run config')
        return value

    @property
    def natures(self) -> Dict[str, str]:
        return {m.name: m.nature for m in self.markers}

    @property
    def method_names(self) -> List[str]:
        return [m.name for m in self.methods]

    def marker(self, name) -> MarkerSpec:
        for spec in self.markers:
            if spec.name == name:
                return spec
        return MarkerSpec(name=name)

    def replace(self, **changes) -> 'RunConfig':
        data = self.to_dict()
        data.update(changes)
        return _build_run_config(data)

    def to_dict(self):
        data = asdict(self)
        data['paths'] = dict(self.paths)
        data['methods'] = [{'name': m.name, **m.options} for m in self.methods]
        for marker in data['markers']:
            marker['summary_options'] = dict(marker['summary_options'])
        return data


def _basis(raw, default):
    if raw is None:
        return default
    if isinstance(raw, BasisConfig):
        return raw
    if not isinstance(raw, dict):
        raise ConfigError(f'Basis must be an object, got {raw!r}')
    kind = raw.get('kind', 'ns')
    if kind not in ('ns', 'poly'):
        raise ConfigError(f'Unknown basis kind "{kind}"')
    knots = raw.get('knots')
    boundary = raw.get('boundary')
    return BasisConfig(
        kind=kind,
        degree=int(raw.get('degree', 1)),
        knots=tuple(float(k) for k in knots) if knots is not None else None,
        boundary=tuple(float(b) for b in boundary) if boundary is not None else None)


def _marker(name, raw):
    if isinstance(raw, MarkerSpec):
        return raw
    raw = dict(raw or {})
    nature = raw.get('nature', 'continuous')
    if nature not in MARKER_NATURES:
        raise ConfigError(f'Marker "{name}": nature must be one of {MARKER_NATURES}')
    random = raw.get('random', {'kind': 'poly', 'degree': 1})
    window = raw.get('window')
    if window is not None and float(window) <= 0:
        raise ConfigError(f'Marker "{name}": window must be positive')
    summaries = raw.get('summaries', MarkerSpec.summaries)
    return MarkerSpec(
        name=str(name),
        nature=nature,
        fixed=_basis(raw.get('fixed'), BasisConfig()),
        random=None if random is None else _basis(random, BasisConfig(kind='poly', degree=1)),
        window=None if window is None else float(window),
        summaries=tuple(summaries),
        summary_options=tuple(sorted(dict(raw.get('summary_options') or {}).items())))


def _method(raw):
    if isinstance(raw, MethodSpec):
        return raw
    if isinstance(raw, str):
        raw = {'name': raw}
    raw = dict(raw)
    name = raw.pop('name', None)
    if name not in METHOD_NAMES:
        raise ConfigError(f'Unknown method "{name}"; expected one of {", ".join(METHOD_NAMES)}')
    return MethodSpec(name=name, params=tuple(sorted(raw.items())))


def _build_run_config(data) -> RunConfig:
    try:
        t_lm = float(data['t_lm'])
        t_hor = float(data['t_hor'])
    except KeyError as err:
        raise ConfigError(f'Missing required run config key {err}')
    except (TypeError, ValueError):
        raise ConfigError('t_lm and t_hor must be numbers')
    if t_lm <= 0 or t_hor <= 0:
        raise ConfigError('t_lm and t_hor must be positive')

    markers = data.get('markers') or {}
    if isinstance(markers, dict):
        markers = [_marker(name, raw) for name, raw in markers.items()]
    else:
        markers = [_marker(raw['name'], raw) for raw in markers]

    methods = [_method(raw) for raw in data.get('methods') or ['cox-all']]
    if len({m.name for m in methods}) != len(methods):
        raise ConfigError('Methods must be listed once each')

    folds = data.get('folds') or {}
    if isinstance(folds, FoldSpec):
        folds = asdict(folds)
    fold_spec = FoldSpec(**{k: int(v) for k, v in folds.items()})
    if fold_spec.outer < 1 or fold_spec.inner < 2 or fold_spec.tuning < 2:
        raise ConfigError('Fold counts must be outer >= 1, inner >= 2, tuning >= 2')

    simulation = data.get('simulation') or {}
    if isinstance(simulation, SimulationSpec):
        simulation = asdict(simulation)
    try:
        sim_spec = SimulationSpec(**simulation)
    except TypeError as err:
        raise ConfigError(f'Invalid simulation block: {err}')
    if sim_spec.link not in SCENARIO_LINKS:
        raise ConfigError(f'Unknown scenario link "{sim_spec.link}"; expected one of {SCENARIO_LINKS}')
    if sim_spec.n_active not in (4, 18):
        raise ConfigError('simulation.n_active must be 4 or 18')

    paths = data.get('paths') or {}
    if not isinstance(paths, dict):
        paths = dict(paths)

    replicates = int(data.get('replicates', 1))
    if replicates < 1:
        raise ConfigError('replicates must be >= 1')

    return RunConfig(
        t_lm=t_lm,
        t_hor=t_hor,
        markers=tuple(markers),
        methods=tuple(methods),
        folds=fold_spec,
        seed=int(data.get('seed', 0)),
        replicates=replicates,
        require_all_markers=bool(data.get('require_all_markers', True)),
        refit_longitudinal=bool(data.get('refit_longitudinal', True)),
        paths=tuple(sorted((str(k), str(v)) for k, v in paths.items() if v is not None)),
        simulation=sim_spec)


def load_run_config(file_path, **overrides) -> RunConfig:
    """Read the JSON run document; non-None overrides replace top-level keys."""
    try:
        with open(file_path, 'r') as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f'Config file {file_path} not found')
    except json.JSONDecodeError as err:
        raise ConfigError(f'Config file {file_path} is not valid JSON: {err}')
    return run_config_from_dict(data, **overrides)


def run_config_from_dict(data, **overrides) -> RunConfig:
    data = dict(data)
    paths = dict(data.get('paths') or {})
    for key, value in overrides.items():
        if value is None:
            continue
        if key in ('survival', 'longitudinal', 'output', 'truth'):
            paths[key] = value
        else:
            data[key] = value
    data['paths'] = paths
    run_config = _build_run_config(data)
    logger.debug(f'Run config: {run_config}')
    return run_config
