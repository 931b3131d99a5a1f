"""scikit-learn style front ends.

Rows of ``X`` are contents. Replication policies take a column of request
rates and ``transform`` it into replica counts; the loss models take two
columns, ``(lambda, replicas)``.
"""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .adaptive import EvictionRule, VirtualLossConfig
from .meanfield import fixed_point_solve, loss_rate_closed_form, _per_content_losses
from .model import (DEFAULT_CAP_FRACTION, Catalog, ReplicationProfile, SystemParams,
                    proportional_replication)
from .optimizer import greedy_marginal_allocation, optimized_replication
from .sim.engine import SimConfig, run


def _popularities(X):
    X = check_array(X, ensure_2d=False, dtype=np.float64)
    if X.ndim == 2:
        if X.shape[1] < 1:
            raise ValueError("X needs a column of request rates")
        X = X[:, 0]
    return Catalog(X)


def _instance(X):
    X = check_array(X, dtype=np.float64)
    if X.shape[1] != 2:
        raise ValueError(f"X must have two columns (lambda, replicas), got {X.shape[1]}")
    reps = X[:, 1]
    if np.any(reps != np.round(reps)):
        raise ValueError("replica counts must be integers")
    return Catalog(X[:, 0]), reps.astype(np.int64)


class _ReplicationPolicy(TransformerMixin, BaseEstimator):
    def _params(self, catalog):
        return SystemParams.from_catalog(catalog, self.m, self.d)

    def transform(self, X):
        check_is_fitted(self, "replicas_")
        cat = _popularities(X)
        if cat.n != self.replicas_.shape[0]:
            raise ValueError(f"fitted on {self.replicas_.shape[0]} contents, got {cat.n}")
        return self.replicas_.copy()

    def profile(self):
        check_is_fitted(self, "replicas_")
        return ReplicationProfile(self.replicas_, self.cap_fraction)


class ProportionalReplication(_ReplicationPolicy):
    """Replicas proportional to request rates, capped at ``cap_fraction * m``."""

    def __init__(self, m, d, cap_fraction=DEFAULT_CAP_FRACTION):
        self.m = m
        self.d = d
        self.cap_fraction = cap_fraction

    def fit(self, X, y=None):
        cat = _popularities(X)
        prof = proportional_replication(cat, self._params(cat), self.cap_fraction)
        self.replicas_ = np.array(prof.replicas)
        return self


class OptimizedReplication(_ReplicationPolicy):
    """Near-uniform replicas with a logarithmic popularity correction.

    ``theta_eff=None`` estimates the contention coefficient from the mean-field
    fixed point. After fitting, ``report_`` holds the coefficient and the
    predicted loss.
    """

    def __init__(self, m, d, theta_eff=None, passes=2, cap_fraction=DEFAULT_CAP_FRACTION):
        self.m = m
        self.d = d
        self.theta_eff = theta_eff
        self.passes = passes
        self.cap_fraction = cap_fraction

    def fit(self, X, y=None):
        cat = _popularities(X)
        self.report_ = optimized_replication(cat, self._params(cat), self.theta_eff,
                                             self.passes, self.cap_fraction)
        self.replicas_ = np.array(self.report_.profile.replicas)
        self.theta_eff_ = self.report_.theta_eff
        return self


class GreedyReplication(_ReplicationPolicy):
    """Marginal-gain allocation of the cache budget at a fixed ``theta_eff``."""

    def __init__(self, m, d, theta_eff=None, objective="exact",
                 cap_fraction=DEFAULT_CAP_FRACTION):
        self.m = m
        self.d = d
        self.theta_eff = theta_eff
        self.objective = objective
        self.cap_fraction = cap_fraction

    def fit(self, X, y=None):
        cat = _popularities(X)
        params = self._params(cat)
        theta = self.theta_eff
        if theta is None:
            ref = proportional_replication(cat, params, self.cap_fraction)
            theta = fixed_point_solve(cat, ref, params).theta_eff
        prof = greedy_marginal_allocation(cat, params, theta, self.objective,
                                          self.cap_fraction)
        self.theta_eff_ = theta
        self.replicas_ = np.array(prof.replicas)
        return self


class MeanFieldLossModel(BaseEstimator):
    """Mean-field loss rates of a replicated catalog.

    ``fit`` solves the fixed point for the instance in ``X``; ``predict``
    returns per-content loss rates at the fitted ``theta_eff_``.
    """

    def __init__(self, m, d, loss="exact", method="damped", tol=1e-10):
        self.m = m
        self.d = d
        self.loss = loss
        self.method = method
        self.tol = tol

    def fit(self, X, y=None):
        cat, reps = _instance(X)
        params = SystemParams.from_catalog(cat, self.m, self.d)
        prof = ReplicationProfile(reps, cap_fraction=1.0).validate(params)
        self.solution_ = fixed_point_solve(cat, prof, params, tol=self.tol,
                                           method=self.method, loss=self.loss)
        self.theta_eff_ = self.solution_.theta_eff
        self.rho_eff_ = self.solution_.rho_eff
        self.inefficiency_ = self.solution_.inefficiency
        self.n_iter_ = self.solution_.n_iter
        return self

    def predict(self, X):
        check_is_fitted(self, "solution_")
        cat, reps = _instance(X)
        if self.loss == "closed_form":
            return loss_rate_closed_form(cat.popularities, reps, self.theta_eff_)
        return _per_content_losses(cat.popularities, reps, self.theta_eff_, "exact")

    def score(self, X, y=None):
        """Negative inefficiency predicted for ``X`` (higher is better)."""
        cat, _ = _instance(X)
        return -float(self.predict(X).sum() / cat.total_rate)


class LossNetworkSimulator(BaseEstimator):
    """Discrete-event simulation wrapped as an estimator; results land in ``metrics_``."""

    def __init__(self, m, d, horizon=1e4, warmup=None, seed=0, rule=None, virtual=False,
                 tau=500.0, snapshot_every=None):
        self.m = m
        self.d = d
        self.horizon = horizon
        self.warmup = warmup
        self.seed = seed
        self.rule = rule
        self.virtual = virtual
        self.tau = tau
        self.snapshot_every = snapshot_every

    def fit(self, X, y=None):
        cat, reps = _instance(X)
        params = SystemParams.from_catalog(cat, self.m, self.d)
        prof = ReplicationProfile(reps, cap_fraction=1.0)
        rule = None if self.rule is None else EvictionRule(self.rule, tau=self.tau)
        cfg = SimConfig(horizon=self.horizon, warmup=self.warmup, seed=self.seed, rule=rule,
                        virtual=VirtualLossConfig(enabled=bool(self.virtual)),
                        snapshot_every=self.snapshot_every)
        self.metrics_ = run(cat, prof, params, cfg)
        self.inefficiency_ = self.metrics_.inefficiency
        return self

    def predict(self, X):
        """Measured per-content loss rates (``X`` must describe the fitted catalog)."""
        check_is_fitted(self, "metrics_")
        cat, _ = _instance(X)
        if cat.n != self.metrics_.n:
            raise ValueError("X does not match the simulated catalog")
        return self.metrics_.loss_rate
