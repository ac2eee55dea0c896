"""Estimator wrappers with a scikit-learn style interface.

``fit(pairs)`` averages per-pair scores into ``scores_``; ``transform(pairs)``
returns the per-pair score matrix with one column per component.
"""

from __future__ import annotations

from functools import partial

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ..validation import check_components, check_pairs, check_rule_config
from .estimators import activation_patch, atp, expectation_over, integrated_gradients, relp


class _PatchingEstimator(TransformerMixin, BaseEstimator):
    def _estimator(self):  # pragma: no cover - abstract
        raise NotImplementedError

    def _prepare(self, pairs):
        if self.model is None:
            raise ValueError(f"{type(self).__name__} needs a model")
        pairs = check_pairs(pairs, self.model)
        comps = check_components(self.model, self.components, len(pairs[0]))
        return pairs, comps

    def fit(self, pairs, y=None):
        pairs, comps = self._prepare(pairs)
        fn = partial(self._estimator(), self.model, components=comps, metric=self.metric)
        self.result_ = expectation_over(pairs, fn, n_jobs=self.n_jobs)
        self.components_ = comps
        self.scores_ = self.result_.vector(comps)
        self.n_pairs_ = len(pairs)
        return self

    def transform(self, pairs):
        check_is_fitted(self, "components_")
        pairs = check_pairs(pairs, self.model)
        fn = partial(self._estimator(), self.model, components=self.components_, metric=self.metric)
        return expectation_over(pairs, fn, n_jobs=self.n_jobs).per_pair

    def fit_transform(self, pairs, y=None):
        self.fit(pairs)
        return self.result_.per_pair


class ActivationPatching(_PatchingEstimator):
    def __init__(self, model=None, components=None, metric=None, n_jobs=1):
        self.model = model
        self.components = components
        self.metric = metric
        self.n_jobs = n_jobs

    def _estimator(self):
        return activation_patch


class AttributionPatching(_PatchingEstimator):
    def __init__(self, model=None, components=None, metric=None, n_jobs=1):
        self.model = model
        self.components = components
        self.metric = metric
        self.n_jobs = n_jobs

    def _estimator(self):
        return atp


class RelevancePatching(_PatchingEstimator):
    def __init__(self, model=None, components=None, metric=None, rules="gpt2", n_jobs=1):
        self.model = model
        self.components = components
        self.metric = metric
        self.rules = rules
        self.n_jobs = n_jobs

    def _estimator(self):
        return partial(relp, config=check_rule_config(self.rules))


class IntegratedGradients(_PatchingEstimator):
    def __init__(self, model=None, components=None, metric=None, steps=10, n_jobs=1):
        self.model = model
        self.components = components
        self.metric = metric
        self.steps = steps
        self.n_jobs = n_jobs

    def _estimator(self):
        if int(self.steps) < 1:
            raise ValueError("steps must be >= 1")
        return partial(integrated_gradients, steps=int(self.steps))


ESTIMATORS = {
    "ap": ActivationPatching,
    "atp": AttributionPatching,
    "relp": RelevancePatching,
    "ig": IntegratedGradients,
}
