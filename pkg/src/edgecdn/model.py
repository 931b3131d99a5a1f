"""Problem instances: system sizes, content popularities and replication profiles."""

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ._validation import check_popularities, check_positive_int, check_replicas

DEFAULT_CAP_FRACTION = 0.95


class InfeasibleProfileError(ValueError):
    """No replication profile satisfies the budget and cap constraints."""


@dataclass(frozen=True)
class SystemParams:
    """Sizes and load of an edge-assisted CDN.

    ``rho`` and ``lambda_bar`` are tied by ``rho = n * lambda_bar / m``; build
    instances with :meth:`from_load` or :meth:`from_catalog` rather than
    supplying both by hand.
    """

    n: int
    m: int
    d: int
    rho: float
    lambda_bar: float

    def __post_init__(self):
        check_positive_int(self.n, "n")
        check_positive_int(self.m, "m")
        check_positive_int(self.d, "d")
        if self.d > self.n:
            raise ValueError(f"d={self.d} exceeds the catalog size n={self.n}")
        if not 0 < self.rho < 1:
            raise ValueError(f"load rho must lie in (0, 1), got {self.rho}")
        implied = self.n * self.lambda_bar / self.m
        if not math.isclose(implied, self.rho, rel_tol=1e-12):
            raise ValueError(
                f"rho={self.rho} inconsistent with n*lambda_bar/m={implied}")

    @classmethod
    def from_load(cls, n, m, d, rho):
        return cls(n=n, m=m, d=d, rho=float(rho), lambda_bar=rho * m / n)

    @classmethod
    def from_catalog(cls, catalog, m, d):
        lam_bar = catalog.lambda_bar
        return cls(n=catalog.n, m=m, d=d, rho=catalog.n * lam_bar / m,
                   lambda_bar=lam_bar)

    @property
    def budget(self):
        """Total number of cache slots, m * d."""
        return self.m * self.d

    @property
    def mean_replicas(self):
        return self.m * self.d / self.n

    def cap(self, cap_fraction=DEFAULT_CAP_FRACTION):
        return int(math.floor(cap_fraction * self.m))

    def stability_margin(self):
        """m divided by rho / (1 - rho)^2; small values mean bursty overload."""
        return self.m / (self.rho / (1.0 - self.rho) ** 2)


@dataclass(frozen=True)
class Catalog:
    """Per-content request rates, indexed by content id."""

    popularities: np.ndarray

    def __post_init__(self):
        lam = check_popularities(self.popularities)
        if lam.size == 0:
            raise ValueError("catalog must contain at least one content")
        lam.setflags(write=False)
        object.__setattr__(self, "popularities", lam)

    @property
    def n(self):
        return self.popularities.shape[0]

    @property
    def lambda_bar(self):
        return float(self.popularities.mean())

    @property
    def total_rate(self):
        return float(self.popularities.sum())

    def popularity_order(self):
        """Content ids sorted from most to least popular (stable)."""
        return np.argsort(-self.popularities, kind="stable")


@dataclass(frozen=True)
class ReplicationProfile:
    """Replica count per content."""

    replicas: np.ndarray
    cap_fraction: float = DEFAULT_CAP_FRACTION

    def __post_init__(self):
        reps = check_replicas(self.replicas)
        reps.setflags(write=False)
        object.__setattr__(self, "replicas", reps)
        if not 0 < self.cap_fraction <= 1:
            raise ValueError("cap_fraction must lie in (0, 1]")

    @property
    def n(self):
        return self.replicas.shape[0]

    @property
    def total(self):
        return int(self.replicas.sum())

    def validate(self, params):
        """Raise ``InfeasibleProfileError`` unless the profile fits ``params``."""
        if self.n != params.n:
            raise InfeasibleProfileError(
                f"profile has {self.n} contents, instance has {params.n}")
        if self.total != params.budget:
            raise InfeasibleProfileError(
                f"sum of replicas {self.total} != m*d = {params.budget}")
        cap = params.cap(self.cap_fraction)
        if self.replicas.max() > cap:
            raise InfeasibleProfileError(
                f"a content has {self.replicas.max()} replicas, cap is {cap}")
        return self


@dataclass(frozen=True)
class ClassSpec:
    """Content classes as ``(size, rate)`` pairs, with optional replicas per class."""

    sizes: Sequence[int]
    rates: Sequence[float]
    replicas: Optional[Sequence[int]] = None

    def __post_init__(self):
        if len(self.sizes) == 0:
            raise ValueError("class spec is empty")
        if len(self.sizes) != len(self.rates):
            raise ValueError("sizes and rates differ in length")
        if any(int(s) < 1 for s in self.sizes):
            raise ValueError("class sizes must be >= 1")
        if any(r <= 0 for r in self.rates):
            raise ValueError("class rates must be positive")
        if self.replicas is not None and len(self.replicas) != len(self.sizes):
            raise ValueError("replicas and sizes differ in length")

    @property
    def n(self):
        return int(sum(self.sizes))

    def labels(self):
        """Class index of every content (class 0 first)."""
        return np.repeat(np.arange(len(self.sizes)), self.sizes)

    def profile(self, cap_fraction=DEFAULT_CAP_FRACTION):
        if self.replicas is None:
            raise ValueError("class spec carries no replica counts")
        return ReplicationProfile(np.repeat(np.asarray(self.replicas, dtype=np.int64),
                                            self.sizes), cap_fraction)


def zipf_catalog(n, alpha, lambda_bar):
    """Zipf popularities with mean ``lambda_bar``; content 0 has rank 1.

    Parameters
    ----------
    n : int
        Number of contents.
    alpha : float
        Zipf exponent, ``alpha >= 0``. ``alpha = 0`` gives a uniform catalog.
    lambda_bar : float
        Mean request rate per content.
    """
    check_positive_int(n, "n")
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if lambda_bar <= 0:
        raise ValueError("lambda_bar must be positive")
    weights = np.arange(1, n + 1, dtype=np.float64) ** (-float(alpha))
    return Catalog(weights / weights.sum() * (n * lambda_bar))


def class_catalog(spec, scale=1.0):
    """Catalog in which every content of class ``i`` has rate ``scale * rates[i]``."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    rates = np.repeat(np.asarray(spec.rates, dtype=np.float64), spec.sizes)
    return Catalog(rates * scale)


def integer_budget_round(targets, budget):
    """Round real targets to integers summing to ``budget`` exactly.

    Largest-remainder rule: every entry is floored, then the leftover units go
    to the largest fractional parts, ties going to the lower index.
    """
    t = np.asarray(targets, dtype=np.float64)
    if np.any(t < 0):
        raise ValueError("targets must be non-negative")
    if abs(t.sum() - budget) > 1e-6 * max(1.0, abs(budget)):
        raise ValueError(f"targets sum to {t.sum()}, budget is {budget}")
    floors = np.floor(t + 1e-9).astype(np.int64)
    floors = np.minimum(floors, np.ceil(t).astype(np.int64))
    remainders = t - floors
    left = int(budget - floors.sum())
    if left > 0:
        # lexsort: last key is primary; descending remainder, ascending index
        order = np.lexsort((np.arange(t.size), -remainders))
        floors[order[:left]] += 1
    return floors


def clamp_and_renormalize(weights, budget, cap):
    """Real targets proportional to ``weights``, capped, summing to ``budget``."""
    w = np.asarray(weights, dtype=np.float64)
    n = w.size
    if budget > n * cap:
        raise InfeasibleProfileError(
            f"budget {budget} exceeds n*cap = {n * cap}")
    clamped = np.zeros(n, dtype=bool)
    targets = np.zeros(n)
    while True:
        free = budget - cap * clamped.sum()
        wsum = w[~clamped].sum()
        if wsum <= 0:
            if free > 1e-9:
                raise InfeasibleProfileError(
                    "remaining budget cannot be spread over zero-weight contents")
            targets[~clamped] = 0.0
        else:
            targets[~clamped] = w[~clamped] * (free / wsum)
        targets[clamped] = cap
        over = (targets > cap) & ~clamped
        if not over.any():
            return targets
        clamped |= over


def proportional_replication(catalog, params, cap_fraction=DEFAULT_CAP_FRACTION):
    """Replicas proportional to popularity under the per-content cap."""
    if catalog.n != params.n:
        raise ValueError("catalog and params disagree on n")
    cap = params.cap(cap_fraction)
    targets = clamp_and_renormalize(catalog.popularities, params.budget, cap)
    return ReplicationProfile(integer_budget_round(targets, params.budget),
                              cap_fraction)


def write_profile_csv(path, catalog, profile):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["content_id", "lambda", "replicas"])
        for c, (lam, reps) in enumerate(zip(catalog.popularities, profile.replicas)):
            writer.writerow([c, repr(float(lam)), int(reps)])


def read_profile_csv(path, cap_fraction=DEFAULT_CAP_FRACTION):
    """Load ``(catalog, profile)`` from a ``content_id,lambda,replicas`` CSV."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"content_id", "lambda", "replicas"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        rows = sorted(reader, key=lambda r: int(r["content_id"]))
    ids = [int(r["content_id"]) for r in rows]
    if ids != list(range(len(ids))):
        raise ValueError(f"{path}: content ids must be 0..n-1")
    lam = np.array([float(r["lambda"]) for r in rows])
    reps = np.array([int(r["replicas"]) for r in rows], dtype=np.int64)
    return Catalog(lam), ReplicationProfile(reps, cap_fraction)
