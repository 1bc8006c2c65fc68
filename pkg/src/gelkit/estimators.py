"""scikit-learn style wrappers over the functional fitting API.

The estimators keep constructor arguments untouched (so get_params,
set_params, and clone behave), resolve the moment model at fit time,
and expose the underlying fit objects through trailing-underscore
attributes.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .core import (confidence_interval, gel_estimate, gel_test)
from .distributed import dgel_estimate, dgel_test, partition_shards
from .exceptions import ArgumentError
from .models import MomentModel, as_data_matrix, model_from_config
from .two_sample import (make_two_sample_problem, two_sample_test)


def _resolve_model(model, data_dim) -> MomentModel:
    if isinstance(model, MomentModel):
        return model
    if isinstance(model, str):
        return model_from_config({"model": model}, data_dim=data_dim)
    if isinstance(model, dict):
        return model_from_config(model, data_dim=data_dim)
    raise ArgumentError(
        "model must be a MomentModel, a name like 'mean', or a config "
        f"dict; got {type(model).__name__}")


def _stack_xy(X, y):
    """Regression rows are (response, covariates); accept either a
    pre-stacked matrix or a separate target vector."""
    if y is None:
        return X
    y = np.asarray(y, dtype=float).reshape(-1)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != y.shape[0]:
        raise ArgumentError(
            f"X has {X.shape[0]} rows but y has {y.shape[0]}")
    return np.column_stack([y, X])


class GELEstimator(BaseEstimator):
    """Grouped empirical likelihood point estimator.

    Parameters mirror gel_estimate: the grouping is drawn at fit time
    with n_groups (default min(N, 100)) and seed.  For regression
    configs, fit(X, y) stacks the target as the first column.
    """

    def __init__(self, model="mean", n_groups=None, seed=0, tol=1e-8,
                 inner_tol=1e-10, max_iter=200):
        self.model = model
        self.n_groups = n_groups
        self.seed = seed
        self.tol = tol
        self.inner_tol = inner_tol
        self.max_iter = max_iter

    def fit(self, X, y=None):
        data = as_data_matrix(_stack_xy(X, y))
        model = _resolve_model(self.model, data.shape[1])
        data = as_data_matrix(data, model.data_dim)
        self.model_ = model
        self._data = data
        self.fit_ = gel_estimate(
            data, model, n_groups=self.n_groups, seed=self.seed,
            tol=self.tol, inner_tol=self.inner_tol,
            max_iter=self.max_iter)
        self.theta_ = self.fit_.theta
        self.lam_ = self.fit_.lam
        self.cov_ = self.fit_.cov
        self.converged_ = self.fit_.converged
        self.n_iter_ = self.fit_.outer_iterations
        return self

    def _check_fitted(self):
        if not hasattr(self, "fit_"):
            raise ArgumentError("call fit first")

    def predict(self, X):
        self._check_fitted()
        if not self.model_.supports_predict:
            raise ArgumentError(
                f"model {self.model_.name!r} has no prediction rule")
        return self.model_.predict(X, self.theta_)

    def wald_se(self):
        self._check_fitted()
        return self.fit_.wald_se()

    def test(self, theta0):
        """Likelihood-ratio test of theta = theta0 on the fitted data,
        reusing the fitted grouping."""
        self._check_fitted()
        return gel_test(self._data, self.model_, theta0=theta0,
                        fit=self.fit_, tol=self.tol,
                        inner_tol=self.inner_tol, max_iter=self.max_iter)

    def confidence_interval(self, component=0, level=0.95):
        self._check_fitted()
        return confidence_interval(
            self._data, self.model_, self.fit_, component=component,
            level=level, inner_tol=self.inner_tol, tol=self.tol,
            max_iter=self.max_iter)


class DGELEstimator(BaseEstimator):
    """Sharded GEL: partition, fit locally, average (and test)."""

    def __init__(self, model="mean", K=10, n_groups=None, seed=0,
                 strict=True, weighted=False, threads=None):
        self.model = model
        self.K = K
        self.n_groups = n_groups
        self.seed = seed
        self.strict = strict
        self.weighted = weighted
        self.threads = threads

    def fit(self, X, y=None):
        data = as_data_matrix(_stack_xy(X, y))
        model = _resolve_model(self.model, data.shape[1])
        data = as_data_matrix(data, model.data_dim)
        self.model_ = model
        self.shards_ = partition_shards(data, self.K, self.seed,
                                        n_groups=self.n_groups)
        self.fit_ = dgel_estimate(self.shards_, model, strict=self.strict,
                                  weighted=self.weighted,
                                  threads=self.threads)
        self.theta_ = self.fit_.theta_dgel
        self.local_fits_ = self.fit_.local_fits
        return self

    def test(self, theta0):
        if not hasattr(self, "shards_"):
            raise ArgumentError("call fit first")
        return dgel_test(self.shards_, self.model_, theta0,
                         threads=self.threads)


class TwoSampleGEL(BaseEstimator):
    """Two-sample difference test with a common group size m."""

    def __init__(self, model="mean", m=100, seed=0, trim=False):
        self.model = model
        self.m = m
        self.seed = seed
        self.trim = trim

    def fit(self, X, Y):
        X = as_data_matrix(X)
        model = _resolve_model(self.model, X.shape[1])
        self.model_ = model
        self.problem_ = make_two_sample_problem(
            X, Y, model, self.m, seed=self.seed, trim=self.trim)
        return self

    def test(self, pi0, **opts):
        if not hasattr(self, "problem_"):
            raise ArgumentError("call fit first")
        self.result_ = two_sample_test(self.problem_, pi0, **opts)
        return self.result_
