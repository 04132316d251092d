import logging

from typing import Dict, Optional, Tuple

import numpy as np

from dynpred.core.errors import ConfigError
from dynpred.core import rsf, spls, survreg

logger = logging.getLogger('methods')

SUPERLEARNER = 'superlearner'


class Learner():
    """A survival learner trained on a design matrix and predicting P(event by t_hor).

    `frozen()` returns an unfitted learner whose hyperparameters are those
    tuned by this fit, so that it can be refit without inner tuning.
    """
    kind = None

    def __init__(self, name, **options):
        self.name = name
        self.options = options
        self.model = None

    def fit(self, design, times, events, seed=0, n_jobs=1):
        raise NotImplementedError

    def predict(self, frame, t_hor) -> np.ndarray:
        raise NotImplementedError

    def frozen(self) -> 'Learner':
        return type(self)(self.name, **self.options)

    def importance(self) -> Dict[str, float]:
        return {}

    def _require_fit(self):
        if self.model is None:
            raise RuntimeError(f'Learner "{self.name}" is not fitted')

    def to_dict(self):
        self._require_fit()
        return {'name': self.name, 'kind': self.kind, 'options': self.options,
                'model': self.model.to_dict()}

    def __repr__(self):
        return f'{type(self).__name__}({self.name}, {self.options})'


class CoxLearner(Learner):
    kind = 'cox'

    def fit(self, design, times, events, seed=0, n_jobs=1):
        frame = design.frame
        columns = self.options.get('columns')
        if columns is not None:
            frame = frame[list(columns)]
        if self.options.get('select'):
            self.model = survreg.backward_select_cox(frame, times, events)
        else:
            dropped = survreg.collinear_columns(frame.to_numpy(dtype=float), tuple(frame.columns))
            if dropped:
                logger.warning(f'{self.name}: collinear columns removed: {dropped}')
                frame = frame.drop(columns=dropped)
            self.model = survreg.fit_cox(frame, times, events)
        return self

    def predict(self, frame, t_hor):
        self._require_fit()
        return survreg.predict_cox_probability(self.model, frame, t_hor)

    def frozen(self):
        self._require_fit()
        if self.options.get('select'):
            return CoxLearner(self.name, columns=list(self.model.columns))
        return super().frozen()

    def importance(self):
        return {c: float(b) for c, b in zip(self.model.columns, self.model.coef)}

    @classmethod
    def load(cls, data):
        learner = cls(data['name'], **data['options'])
        learner.model = survreg.CoxFit.from_dict(data['model'])
        return learner


class CoxnetLearner(Learner):
    kind = 'coxnet'

    def fit(self, design, times, events, seed=0, n_jobs=1):
        self.model = survreg.fit_coxnet(
            design.frame, times, events,
            alpha=float(self.options.get('alpha', 0.5)),
            n_lambda=int(self.options.get('n_lambda', 100)),
            n_folds=int(self.options.get('n_folds', 10)),
            lambdas=self.options.get('lambdas'),
            binary=design.binary,
            standardize_binary=bool(self.options.get('standardize_binary', True)),
            seed=seed)
        logger.info(f'{self.name}: lambda={self.model.lambda_selected:.4g}, '
                    f'{len(self.model.selected_columns)} non-zero coefficient(s)')
        return self

    def predict(self, frame, t_hor):
        self._require_fit()
        return survreg.predict_cox_probability(self.model.fit, frame, t_hor)

    def frozen(self):
        self._require_fit()
        options = dict(self.options)
        options['lambdas'] = self.model.lambdas[:self.model.index_selected + 1].tolist()
        options['n_folds'] = 0
        return CoxnetLearner(self.name, **options)

    def importance(self):
        fit = self.model.fit
        return {c: float(b) for c, b in zip(fit.columns, fit.coef)}

    @classmethod
    def load(cls, data):
        learner = cls(data['name'], **data['options'])
        learner.model = survreg.ElasticNetPath.from_dict(data['model'])
        return learner


class SplsLearner(Learner):
    kind = 'spls'

    def fit(self, design, times, events, seed=0, n_jobs=1):
        if 'n_components' in self.options:
            self.model = spls.refit_spls_dr(design.frame, times, events,
                                            n_components=int(self.options['n_components']),
                                            eta=float(self.options['eta']))
        else:
            self.model = spls.fit_spls_dr(design.frame, times, events,
                                          eta_mode=self.options.get('eta_mode', 'none'),
                                          max_components=int(self.options.get('max_components', 6)),
                                          n_folds=int(self.options.get('n_folds', 10)), seed=seed)
        logger.info(f'{self.name}: {self.model.n_components} component(s), eta={self.model.eta}')
        return self

    def predict(self, frame, t_hor):
        self._require_fit()
        return self.model.predict(frame, t_hor)

    def frozen(self):
        self._require_fit()
        return SplsLearner(self.name, n_components=self.model.n_components, eta=self.model.eta)

    def importance(self):
        return {c: float(np.abs(w).sum()) for c, w in zip(self.model.columns, self.model.weights)}

    @classmethod
    def load(cls, data):
        learner = cls(data['name'], **data['options'])
        learner.model = spls.SplsDrFit.from_dict(data['model'])
        return learner


class RsfLearner(Learner):
    kind = 'rsf'

    def __init__(self, name, **options):
        super().__init__(name, **options)
        self.vimp = None

    def fit(self, design, times, events, seed=0, n_jobs=1):
        frame = design.frame
        columns = self.options.get('columns')
        if columns is not None:
            frame = frame[list(columns)]
        mode = self.options.get('mode', 'default')
        n_trees = int(self.options.get('n_trees', rsf.DEFAULT_TREES))
        mtry = self.options.get('mtry')
        nodesize = int(self.options.get('nodesize', rsf.DEFAULT_NODESIZE))
        if mode == 'optimize':
            mtry, nodesize = rsf.tune_rsf(frame, times, events,
                                          n_trees=int(self.options.get('tuning_trees', rsf.TUNING_TREES)),
                                          seed=seed, n_jobs=n_jobs)
            logger.info(f'{self.name}: tuned M={mtry}, S={nodesize}')
        self.model = rsf.fit_rsf(frame, times, events, n_trees=n_trees, mtry=mtry, nodesize=nodesize,
                                 seed=seed, n_jobs=n_jobs)
        if mode == 'select':
            self.vimp = rsf.vimp_all(self.model, seed=seed, n_jobs=n_jobs)
            selected = rsf.select_vars_rsf(self.model, importance=self.vimp)
            logger.info(f'{self.name}: {len(selected)} of {len(frame.columns)} columns kept by VIMP')
            self.model = rsf.fit_rsf(frame[list(selected)], times, events, n_trees=n_trees,
                                     mtry=None, nodesize=nodesize, seed=seed, n_jobs=n_jobs)
        return self

    def predict(self, frame, t_hor):
        self._require_fit()
        return rsf.predict_rsf_probability(self.model, frame, t_hor)

    def frozen(self):
        self._require_fit()
        options = {k: v for k, v in self.options.items() if k not in ('mode', 'tuning_trees')}
        options.update(mode='default', mtry=self.model.mtry, nodesize=self.model.nodesize,
                       columns=list(self.model.columns))
        return RsfLearner(self.name, **options)

    def importance(self):
        if self.vimp is None:
            self.vimp = rsf.vimp_all(self.model)
        return dict(self.vimp)

    @classmethod
    def load(cls, data):
        learner = cls(data['name'], **data['options'])
        learner.model = rsf.Forest.from_dict(data['model'])
        return learner


# method name -> (learner class, fixed options)
LEARNERS: Dict[str, Tuple[type, dict]] = {
    'cox-all': (CoxLearner, {'select': False}),
    'cox-select': (CoxLearner, {'select': True}),
    'coxnet-lasso': (CoxnetLearner, {'alpha': 1.0}),
    'coxnet-ridge': (CoxnetLearner, {'alpha': 0.0}),
    'coxnet-elastic': (CoxnetLearner, {'alpha': 0.5}),
    'spls-nosparse': (SplsLearner, {'eta_mode': 'none'}),
    'spls-maxsparse': (SplsLearner, {'eta_mode': 'max'}),
    'spls-optimize': (SplsLearner, {'eta_mode': 'grid'}),
    'rsf-default': (RsfLearner, {'mode': 'default'}),
    'rsf-optimize': (RsfLearner, {'mode': 'optimize'}),
    'rsf-select': (RsfLearner, {'mode': 'select'}),
}

ALLOWED_OPTIONS = {
    CoxLearner: {'columns'},
    CoxnetLearner: {'alpha', 'n_lambda', 'n_folds', 'lambdas', 'standardize_binary'},
    SplsLearner: {'max_components', 'n_folds'},
    RsfLearner: {'n_trees', 'mtry', 'nodesize', 'tuning_trees'},
}


def make_learner(spec, tuning_folds: Optional[int] = None) -> Learner:
    """Learner for a `MethodSpec`; the config block may override tunable options."""
    if spec.name not in LEARNERS:
        raise ConfigError(f'"{spec.name}" is not a learner')
    cls, fixed = LEARNERS[spec.name]
    unknown = set(spec.options) - ALLOWED_OPTIONS[cls]
    if unknown:
        raise ConfigError(f'Method "{spec.name}" does not accept option(s) {sorted(unknown)}')
    options = dict(fixed)
    if tuning_folds is not None and 'n_folds' in ALLOWED_OPTIONS[cls]:
        options['n_folds'] = tuning_folds
    options.update(spec.options)
    return cls(spec.name, **options)


def load_learner(data) -> Learner:
    classes = {cls.kind: cls for cls in (CoxLearner, CoxnetLearner, SplsLearner, RsfLearner)}
    if data.get('kind') not in classes:
        raise ConfigError(f'Unknown learner kind "{data.get("kind")}"')
    return classes[data['kind']].load(data)
