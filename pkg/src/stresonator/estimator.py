"""scikit-learn style wrapper around filtering, smoothing and fitting."""
from __future__ import annotations

from typing import Mapping

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .estimation import ParamVector, fit
from .inference import ObservationBatch, filter_pass, posterior_at, smooth_pass, stationary_prior
from .model import ModelSpec, assemble_system

__all__ = ["ResonatorRegressor"]


class ResonatorRegressor(RegressorMixin, BaseEstimator):
    """Posterior mean of a resonator field at arbitrary space-time points.

    Rows of ``X`` are ``(t, x1[, x2[, x3]])``; ``y`` holds the noisy field
    values.  Rows with equal ``t`` form one step.

    Parameters
    ----------
    model : ModelSpec or mapping
        Model (or its config mapping).  Its parameter values are used as
        given unless ``optimize`` is set, in which case they only fix the
        frozen parameters.
    optimize : bool, default=False
        Fit the hyperparameters by maximum marginal likelihood.
    restarts : int, default=10
        Random restarts for the optimizer.
    active : list of str, optional
        Parameters to optimize (see ``ParamVector.from_model``).
    random_state : int, default=0
        Seed for the restart initial points.
    t0 : float, optional
        Time of the stationary prior; defaults to the first observation time.
    fit_params : mapping, optional
        Extra keyword arguments for ``estimation.fit``.

    Attributes
    ----------
    model_ : ModelSpec
        Model used for prediction (fitted when ``optimize`` is set).
    fit_result_ : FitResult or None
    log_marginal_likelihood_ : float
    n_features_in_ : int
    """

    def __init__(self, model=None, optimize=False, restarts=10, active=None, random_state=0, t0=None,
                 fit_params=None):
        self.model = model
        self.optimize = optimize
        self.restarts = restarts
        self.active = active
        self.random_state = random_state
        self.t0 = t0
        self.fit_params = fit_params

    def _template(self) -> ModelSpec:
        if isinstance(self.model, ModelSpec):
            return self.model
        if isinstance(self.model, Mapping):
            return ModelSpec.from_config(self.model)
        raise ValueError("model must be a ModelSpec or a config mapping")

    def _check_X(self, X, y=None):
        if y is None:
            X = check_array(X, dtype=float)
        else:
            X, y = check_X_y(X, y, dtype=float, y_numeric=True)
        dim = self.model_.domain.coord_dim if hasattr(self, "model_") else self._template().domain.coord_dim
        if X.shape[1] != dim + 1:
            raise ValueError(f"X needs {dim + 1} columns (t and {dim} coordinates), got {X.shape[1]}")
        return X, y

    def fit(self, X, y):
        """Store the data and, with ``optimize``, fit the hyperparameters."""
        template = self._template()
        self.model_ = template
        X, y = self._check_X(X, y)
        self.n_features_in_ = X.shape[1]
        data = ObservationBatch.from_arrays(X[:, 0], X[:, 1:], y)
        template.domain.check_points(X[:, 1:])
        t0 = data.times[0] if self.t0 is None else float(self.t0)
        if t0 > data.times[0]:
            raise ValueError("t0 must not be after the first observation time")
        self.fit_result_ = None
        if self.optimize:
            params = ParamVector.from_model(template, self.active)
            res = fit(data, template, restarts=self.restarts, seed=self.random_state, params=params, t0=t0,
                      **(self.fit_params or {}))
            self.fit_result_ = res
            self.model_ = res.model(template)
        self.data_ = data
        self.t0_ = t0
        self.basis_ = self.model_.basis()
        system = assemble_system(self.model_, data.times, data.locations, self.basis_, t0=t0)
        prior = stationary_prior(self.model_, self.basis_, t0)
        self.log_marginal_likelihood_ = filter_pass(
            system, data, prior, noise_var=self.model_.noise_var, store=False
        ).loglik
        return self

    def _posterior(self, X, selector="all"):
        check_is_fitted(self, "data_")
        X, _ = self._check_X(X)
        t, pts = X[:, 0], X[:, 1:]
        if np.any(t < self.t0_):
            raise ValueError("cannot predict before the prior time t0")
        self.model_.domain.check_points(pts)
        batch = self.data_.with_times(np.unique(t))
        system = assemble_system(self.model_, batch.times, batch.locations, self.basis_, t0=self.t0_)
        prior = stationary_prior(self.model_, self.basis_, self.t0_)
        smoothed = smooth_pass(system, filter_pass(system, batch, prior, noise_var=self.model_.noise_var))
        mean = np.empty(t.size)
        var = np.empty(t.size)
        parts = np.empty((t.size, len(self.model_.components)))
        for tk in np.unique(t):
            rows = np.flatnonzero(t == tk)
            k = int(np.searchsorted(batch.times, tk))
            post = posterior_at([smoothed[k]], self.model_, self.basis_, pts[rows], selector)
            mean[rows] = post.total[0][0]
            var[rows] = post.total[1][0]
            for j, name in enumerate(self.model_.component_names):
                parts[rows, j] = post.components[name][0][0]
        return mean, var, parts

    def predict(self, X, return_std=False):
        """Smoothed posterior mean (and standard deviation) of the summed field."""
        mean, var, _ = self._posterior(X)
        if return_std:
            return mean, np.sqrt(np.clip(var, 0, None))
        return mean

    def transform(self, X):
        """Per-component posterior means, one column per component."""
        return self._posterior(X)[2]
