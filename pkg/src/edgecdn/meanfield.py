"""Mean-field approximation of per-content loss rates.

Each content's number of available replicas ``Z`` is modelled as an
independent birth-death chain on ``0..D``: up-rate ``D - z`` (a busy server
holding the content finishes its job) and down-rate ``lambda + z * theta``
(a request for the content itself, or a request for a co-located content).
The contention coefficient ``theta`` depends on the effective load, which in
turn depends on the average loss rate, giving a scalar fixed point.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

PROB_FLOOR = 1e-300


class ConvergenceError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


def log_extended_binomial(k, x, l):
    if l < 0 or k < 0:
        raise ValueError("k and l must be non-negative")
    if l > k:
        raise ValueError(f"l={l} exceeds k={k}")
    if x < 0:
        raise ValueError("x must be non-negative")
    i = np.arange(k - l + 1, k + 1, dtype=np.float64)
    return float(np.log(i + x).sum() - math.lgamma(l + 1))


def extended_binomial(k, x, l):
    """Generalised binomial coefficient ``C(k + x, l)`` for real ``x >= 0``.

    Defined as ``prod_{i=k-l+1}^{k} (i + x) / l!``; reduces to the usual
    coefficient when ``x = 0``.
    """
    return math.exp(log_extended_binomial(k, x, l))


def theta_from_load(rho_eff, d):
    if d < 2:
        raise ValueError("d must be >= 2; with d = 1 there is no co-location contention")
    if not 0 <= rho_eff < 1:
        raise ValueError(f"effective load must lie in [0, 1), got {rho_eff}")
    return rho_eff / (1.0 - rho_eff) * (d - 1) / d


@dataclass(frozen=True)
class EffectiveParams:
    rho_eff: float
    theta_eff: float
    d: int

    @classmethod
    def from_loss(cls, rho, gamma_bar, lambda_bar, d):
        rho_eff = rho * (1.0 - gamma_bar / lambda_bar)
        return cls(rho_eff, theta_from_load(rho_eff, d), d)


@dataclass(frozen=True)
class AvailabilityDistribution:
    content: int
    probabilities: np.ndarray
    mean: float
    mode: int
    mode_approx: float

    @property
    def replicas(self):
        return self.probabilities.shape[0] - 1


def _log_unnormalised(lambda_c, D_c, theta_eff):
    # log pi(z) - log pi(0) = -sum_{i=1}^{z} log((lambda + i theta) / (D - i + 1))
    i = np.arange(1, D_c + 1, dtype=np.float64)
    steps = np.log(lambda_c + i * theta_eff) - np.log(D_c - i + 1)
    return np.concatenate(([0.0], -np.cumsum(steps)))


def availability_distribution(lambda_c, D_c, theta_eff, content=-1):
    """Stationary law of the number of available replicas of one content.

    Normalised by summing the local-balance recursion exactly.
    """
    D_c = int(D_c)
    if D_c < 0:
        raise ValueError("D_c must be non-negative")
    if theta_eff <= 0:
        raise ValueError("theta_eff must be positive")
    if D_c == 0:
        probs = np.ones(1)
    else:
        logp = _log_unnormalised(lambda_c, D_c, theta_eff)
        probs = np.exp(logp - logsumexp(logp))
    z = np.arange(D_c + 1)
    return AvailabilityDistribution(
        content=content,
        probabilities=probs,
        mean=float(z @ probs),
        mode=int(np.argmax(probs)),
        mode_approx=max(0.0, (D_c - lambda_c) / (1.0 + theta_eff)),
    )


def unavailability_exact(lambda_c, D_c, theta_eff):
    """``pi(Z = 0)`` from the exactly normalised birth-death law."""
    D_c = int(D_c)
    if D_c == 0:
        return 1.0
    return float(math.exp(-logsumexp(_log_unnormalised(lambda_c, D_c, theta_eff))))


def loss_rate_exact(lambda_c, D_c, theta_eff):
    return float(lambda_c) * unavailability_exact(lambda_c, D_c, theta_eff)


def log_loss_rate_closed_form(lambda_c, D_c, theta_eff):
    """Logarithm of :func:`loss_rate_closed_form` without the clamp at ``lambda``."""
    if np.any(np.asarray(theta_eff) <= 0):
        raise ValueError("theta_eff must be positive")
    lam, D = np.broadcast_arrays(np.asarray(lambda_c, dtype=np.float64),
                                 np.asarray(D_c, dtype=np.float64))
    x = lam / theta_eff
    out = (np.log(np.maximum(lam, PROB_FLOOR))
           - x * math.log1p(theta_eff) - gammaln(1.0 + x)
           - D * math.log1p(1.0 / theta_eff)
           + x * np.log(np.maximum(D, 1.0)))
    return float(out) if out.ndim == 0 else out


def loss_rate_closed_form(lambda_c, D_c, theta_eff):
    """Large-replication asymptotic loss rate.

    ``lambda * K * (1 + 1/theta)^(-D) * D^x`` with
    ``K = 1 / ((1 + theta)^x Gamma(1 + x))`` and ``x = lambda/theta``.
    ``D^x`` stands for ``exp(x (H_D - gamma_E))``, the large-``D`` form of
    ``C(D + x, D) Gamma(1 + x)``, so no separate Euler factor appears.
    Vectorised over ``lambda_c`` and ``D_c``; contents with no replica lose
    everything, and the result never exceeds ``lambda_c``.
    """
    lam, D = np.broadcast_arrays(np.asarray(lambda_c, dtype=np.float64),
                                 np.asarray(D_c, dtype=np.float64))
    out = np.minimum(np.exp(log_loss_rate_closed_form(lam, D, theta_eff)), lam)
    out = np.where(D <= 0, lam, out)
    out = np.where(lam <= 0, 0.0, out)
    return float(out) if out.ndim == 0 else out


def loss_derivative(lambda_c, D_c, theta_eff):
    """Dominant-order forward difference ``gamma(D + 1) - gamma(D)``."""
    if np.any(np.asarray(D_c) < 1):
        raise ValueError("D_c must be >= 1")
    gamma = loss_rate_closed_form(lambda_c, D_c, theta_eff)
    return -gamma / (1.0 + theta_eff) * (1.0 - np.asarray(lambda_c) / np.asarray(D_c))


def _per_content_losses(lam, D, theta, loss):
    if loss == "closed_form":
        return loss_rate_closed_form(lam, D, theta)
    if loss != "exact":
        raise ValueError(f"unknown loss model {loss!r}")
    # many contents share (lambda, D) in class and Zipf instances
    pairs, inverse = np.unique(np.column_stack([lam, D]), axis=0, return_inverse=True)
    vals = np.array([loss_rate_exact(l, int(k), theta) for l, k in pairs])
    return vals[inverse.reshape(-1)]


@dataclass(frozen=True)
class MeanFieldSolution:
    effective: EffectiveParams
    gamma: np.ndarray
    gamma_bar: float
    lambda_bar: float
    n_iter: int
    residual: float
    method: str
    loss: str

    @property
    def inefficiency(self):
        return self.gamma_bar / self.lambda_bar

    @property
    def theta_eff(self):
        return self.effective.theta_eff

    @property
    def rho_eff(self):
        return self.effective.rho_eff


class FixedPointMap:
    """``gamma_bar -> mean per-content loss`` at the induced ``theta_eff``."""

    def __init__(self, popularities, replicas, rho, d, loss="exact"):
        self.lam = np.asarray(popularities, dtype=np.float64)
        self.D = np.asarray(replicas, dtype=np.int64)
        self.rho = rho
        self.d = d
        self.loss = loss
        self.lambda_bar = float(self.lam.mean())

    def effective(self, gamma_bar):
        return EffectiveParams.from_loss(self.rho, gamma_bar, self.lambda_bar, self.d)

    def gammas(self, gamma_bar):
        eff = self.effective(gamma_bar)
        if eff.theta_eff == 0:
            return self.lam * (self.D == 0)
        return _per_content_losses(self.lam, self.D, eff.theta_eff, self.loss)

    def __call__(self, gamma_bar):
        return float(self.gammas(gamma_bar).mean())


def _relative_residual(g_in, g_out):
    return abs(g_out - g_in) / max(g_out, PROB_FLOOR)


def _bisect(fmap, tol, max_iter):
    lo, hi = 0.0, fmap.lambda_bar
    g_lo = fmap(lo)
    if g_lo == 0:
        return 0.0, 1, 0.0
    # h(g) = F(g) - g is strictly decreasing with h(0) > 0 >= h(lambda_bar)
    for it in range(1, max_iter + 1):
        mid = 0.5 * (lo + hi)
        if fmap(mid) > mid:
            lo = mid
        else:
            hi = mid
        g = 0.5 * (lo + hi)
        if hi - lo <= tol * g:
            g_out = fmap(g)
            res = _relative_residual(g, g_out)
            if res <= tol:
                return g, it, res
    g = 0.5 * (lo + hi)
    raise ConvergenceError("bisection did not converge", _relative_residual(g, fmap(g)))


def _damped(fmap, tol, max_iter, damping=0.5, patience=20):
    g = 0.0
    best = math.inf
    stalled = 0
    for it in range(1, max_iter + 1):
        g_out = fmap(g)
        res = _relative_residual(g, g_out)
        if res <= tol:
            return g_out, it, res
        if res < best:
            best, stalled = res, 0
        else:
            stalled += 1
            if stalled >= patience:
                return None, it, res
        g = (1.0 - damping) * g + damping * g_out
    return None, max_iter, res


def fixed_point_solve(catalog, profile, params, tol=1e-10, max_iter=10_000,
                      method="damped", loss="exact"):
    """Solve the mean-field fixed point in the average loss rate.

    Parameters
    ----------
    catalog, profile, params
        The instance. ``params.d`` must be at least 2.
    tol : float
        Relative residual ``|F(g) - g| / F(g)`` at which to stop.
    method : {"damped", "bisection"}
        ``"damped"`` averages input and output and falls back to bisection on
        ``[0, lambda_bar]`` when the residual stops shrinking.
    loss : {"exact", "closed_form"}
        How ``pi(Z = 0)`` is evaluated for each content.

    Returns
    -------
    MeanFieldSolution
    """
    if params.d < 2:
        raise ValueError("d must be >= 2 for the mean-field model")
    if catalog.n != params.n or profile.n != params.n:
        raise ValueError("catalog, profile and params disagree on n")
    fmap = FixedPointMap(catalog.popularities, profile.replicas, params.rho,
                         params.d, loss)
    used = method
    if method == "damped":
        g, it, res = _damped(fmap, tol, max_iter)
        if g is None:
            used = "bisection"
            g, it2, res = _bisect(fmap, tol, max_iter)
            it += it2
    elif method == "bisection":
        g, it, res = _bisect(fmap, tol, max_iter)
    else:
        raise ValueError(f"unknown method {method!r}")
    eff = fmap.effective(g)
    gammas = fmap.gammas(g)
    return MeanFieldSolution(effective=eff, gamma=gammas, gamma_bar=float(gammas.mean()),
                             lambda_bar=fmap.lambda_bar, n_iter=it, residual=res,
                             method=used, loss=loss)


def availability_means(popularities, replicas, theta_eff):
    """Exact ``E[Z_c]`` and argmax mode for every content."""
    lam = np.asarray(popularities, dtype=np.float64)
    D = np.asarray(replicas, dtype=np.int64)
    pairs, inverse = np.unique(np.column_stack([lam, D]), axis=0, return_inverse=True)
    stats = [availability_distribution(l, int(k), theta_eff) for l, k in pairs]
    inverse = inverse.reshape(-1)
    means = np.array([s.mean for s in stats])[inverse]
    modes = np.array([s.mode for s in stats])[inverse]
    return means, modes
