"""Static replication that minimises the mean-field average loss rate."""

import heapq
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .meanfield import fixed_point_solve, loss_rate_closed_form, loss_rate_exact
from .model import (DEFAULT_CAP_FRACTION, InfeasibleProfileError, ReplicationProfile,
                    integer_budget_round, proportional_replication)


@dataclass(frozen=True)
class OptimizerReport:
    profile: ReplicationProfile
    gamma_bar_predicted: float
    mean_replicas: float
    coefficient: float
    theta_eff: float
    method: str

    def to_dict(self):
        return {
            "gamma_bar_predicted": self.gamma_bar_predicted,
            "coefficient": self.coefficient,
            "Dbar": self.mean_replicas,
            "theta_eff": self.theta_eff,
            "method": self.method,
        }


def popularity_coefficient(mean_replicas, theta_eff):
    """Replicas gained per unit of popularity above the mean."""
    if mean_replicas <= 1:
        raise ValueError("mean number of replicas must exceed 1")
    if theta_eff <= 0:
        raise ValueError("theta_eff must be positive")
    return math.log(mean_replicas) / (theta_eff * math.log1p(1.0 / theta_eff))


def _water_fill(offsets, budget, cap):
    """Targets ``clip(s + offsets, 0, cap)`` with the shift ``s`` chosen to hit ``budget``."""
    def excess(s):
        return np.clip(s + offsets, 0.0, cap).sum() - budget

    if offsets.size * cap < budget:
        raise InfeasibleProfileError(f"budget {budget} exceeds n*cap = {offsets.size * cap}")
    lo = -offsets.max()
    hi = cap - offsets.min()
    if excess(lo) >= 0:
        s = lo
    else:
        s = brentq(excess, lo, hi, xtol=1e-12, rtol=1e-15, maxiter=500)
    targets = np.clip(s + offsets, 0.0, cap)
    # absorb the bisection residue so the rounding step sees an exact budget
    free = ~((targets <= 0) | (targets >= cap))
    if free.any():
        targets[free] += (budget - targets.sum()) / free.sum()
    return np.clip(targets, 0.0, cap)


def optimized_targets(popularities, mean_replicas, lambda_bar, theta_eff, budget, cap):
    coef = popularity_coefficient(mean_replicas, theta_eff)
    offsets = (np.asarray(popularities, dtype=np.float64) - lambda_bar) * coef
    return _water_fill(offsets, budget, cap), coef


def optimized_replication(catalog, params, theta_eff=None, passes=2,
                          cap_fraction=DEFAULT_CAP_FRACTION, solver_opts=None):
    """Near-uniform replication with a logarithmic popularity adjustment.

    Each content gets ``Dbar + (lambda_c - lambda_bar) * coefficient`` replicas,
    where ``coefficient = ln(Dbar) / (theta ln(1 + 1/theta))``. Targets are
    clipped to ``[0, cap]`` and shifted together so the budget ``m*d`` is met,
    then rounded by largest remainder.

    When ``theta_eff`` is omitted it is taken from the mean-field fixed point at
    the proportional profile and, for ``passes=2``, refreshed once at the
    resulting optimized profile.
    """
    solver_opts = dict(solver_opts or {})
    cap = params.cap(cap_fraction)
    dbar = params.mean_replicas
    given = theta_eff is not None
    if not given:
        ref = proportional_replication(catalog, params, cap_fraction)
        theta_eff = fixed_point_solve(catalog, ref, params, **solver_opts).theta_eff
    for k in range(1 if given else max(1, passes)):
        targets, coef = optimized_targets(catalog.popularities, dbar, params.lambda_bar,
                                          theta_eff, params.budget, cap)
        profile = ReplicationProfile(integer_budget_round(targets, params.budget),
                                     cap_fraction)
        if not given and k + 1 < passes:
            theta_eff = fixed_point_solve(catalog, profile, params, **solver_opts).theta_eff
    gamma = loss_rate_closed_form(catalog.popularities, profile.replicas, theta_eff)
    return OptimizerReport(profile=profile, gamma_bar_predicted=float(np.mean(gamma)),
                           mean_replicas=dbar, coefficient=coef, theta_eff=theta_eff,
                           method="closed_form")


def predicted_optimal_inefficiency(params, theta_eff):
    """Order-of-magnitude inefficiency of the optimized replication.

    Loss rate of an imaginary average content,
    ``(1 + 1/theta)^(-Dbar) * Dbar^(lambda_bar/theta)``, divided by ``lambda_bar``.
    """
    dbar = params.mean_replicas
    if dbar <= 1:
        raise ValueError("mean number of replicas must exceed 1")
    log_gamma = (-dbar * math.log1p(1.0 / theta_eff)
                 + params.lambda_bar / theta_eff * math.log(dbar))
    return math.exp(log_gamma) / params.lambda_bar


def monotone_threshold(lambda_c, theta_eff):
    """Smallest replica count from which the closed-form loss stops increasing.

    Below it the asymptotic formula is outside its domain of validity
    (it grows with ``D`` and is absurdly small).
    """
    lam = np.asarray(lambda_c, dtype=np.float64)
    a = theta_eff * math.log1p(1.0 / theta_eff) / np.maximum(lam, 1e-300)
    return np.maximum(1, np.ceil(1.0 / np.expm1(a))).astype(np.int64)


def _loss_function(objective):
    if objective == "exact":
        return loss_rate_exact
    if objective == "closed_form":
        return loss_rate_closed_form
    raise ValueError(f"unknown objective {objective!r}")


def greedy_marginal_allocation(catalog, params, theta_eff, objective="exact",
                               cap_fraction=DEFAULT_CAP_FRACTION):
    """Spend the budget one replica at a time where the loss drops most.

    Exact for separable convex objectives. With ``objective="exact"`` the
    per-content loss is ``lambda * pi(Z = 0)`` of the birth-death law at the
    given ``theta_eff``. With ``"closed_form"`` every content starts at
    :func:`monotone_threshold` (if the budget allows), since below it the
    asymptotic formula is not a decreasing function of ``D``.
    Ties go to the lower content index.
    """
    loss = _loss_function(objective)
    lam = catalog.popularities
    n = catalog.n
    budget = params.budget
    cap = params.cap(cap_fraction)
    if n * cap < budget:
        raise InfeasibleProfileError(f"budget {budget} exceeds n*cap = {n * cap}")

    D = np.zeros(n, dtype=np.int64)
    if objective == "closed_form":
        start = np.minimum(monotone_threshold(lam, theta_eff), cap)
        if start.sum() <= budget:
            D = start
    current = np.array([loss(lam[c], D[c], theta_eff) for c in range(n)])

    heap = []
    for c in range(n):
        if D[c] < cap:
            nxt = loss(lam[c], D[c] + 1, theta_eff)
            heap.append((nxt - current[c], c, nxt))
    heapq.heapify(heap)
    left = budget - int(D.sum())
    while left > 0:
        _, c, val = heapq.heappop(heap)
        D[c] += 1
        current[c] = val
        left -= 1
        if D[c] < cap:
            nxt = loss(lam[c], D[c] + 1, theta_eff)
            heapq.heappush(heap, (nxt - val, c, nxt))
    return ReplicationProfile(D, cap_fraction)


def mean_loss(catalog, profile, theta_eff, objective="exact"):
    """Average per-content loss at a fixed contention coefficient."""
    loss = _loss_function(objective)
    if objective == "closed_form":
        return float(np.mean(loss(catalog.popularities, profile.replicas, theta_eff)))
    return float(np.mean([loss(l, k, theta_eff)
                          for l, k in zip(catalog.popularities, profile.replicas)]))
