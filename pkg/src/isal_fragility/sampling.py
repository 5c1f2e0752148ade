"""Instrumental densities for importance-sampled active learning.

The optimal (p-independent) weight ``g(x) = sqrt(f (1-f)^4 + (1-f) f^4)`` is
mixed with the marginal ``p`` as ``q = eps p + (1 - eps) p g / Z`` which keeps
``p / q < 1 / eps``.  Two marginals are supported: an empirical pool with
uniform weights (the usual case: candidate ground motions) and an analytic
Gaussian over ``x = log IM``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import integrate, stats

from ._kernels import instrumental_factor
from .model import FragilityParams

__all__ = [
    "AnalyticGaussian",
    "PoolEmpirical",
    "DefensiveDensity",
    "DrawRecord",
    "DegeneratePoolWarning",
    "optimal_weight",
    "defensive_weights",
    "draw",
    "G_MAX",
]

#: supremum of ``optimal_weight`` over f in [0, 1] (reached at f (1-f) = 1/6)
G_MAX = 1.0 / math.sqrt(12.0)

# relative floor on the instrumental factor; keeps p/q strictly below 1/eps
# in floating point for points deep in the tails of the fitted curve
_G_FLOOR = 1e-10


class DegeneratePoolWarning(RuntimeWarning):
    """The fitted curve is flat over the whole pool; sampling falls back to p."""


@dataclass(frozen=True)
class AnalyticGaussian:
    mean: float
    variance: float

    def __post_init__(self):
        if not self.variance > 0:
            raise ValueError("variance must be positive")

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)

    def pdf(self, x):
        return stats.norm.pdf(x, self.mean, self.std)

    def sample(self, rng, size=None):
        return rng.normal(self.mean, self.std, size=size)


@dataclass(frozen=True, eq=False)
class PoolEmpirical:
    """Uniform distribution over a finite pool of log-IM values."""

    x: np.ndarray

    def __post_init__(self):
        x = np.ascontiguousarray(self.x, dtype=float)
        if x.ndim != 1 or x.size == 0:
            raise ValueError("pool must be a nonempty 1-D array")
        if not np.all(np.isfinite(x)):
            raise ValueError("pool contains non-finite values")
        object.__setattr__(self, "x", x)

    @property
    def size(self) -> int:
        return self.x.size

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.size, 1.0 / self.size)


def optimal_weight(theta, x):
    """p-independent factor of the optimal instrumental density."""
    alpha, beta = (theta.alpha, theta.beta) if isinstance(theta, FragilityParams) else theta
    xa = np.atleast_1d(np.asarray(x, dtype=float))
    g = instrumental_factor(np.ascontiguousarray(xa), math.log(alpha), float(beta))
    return float(g[0]) if np.ndim(x) == 0 else g


@dataclass(frozen=True, eq=False)
class DefensiveDensity:
    """Frozen defensive mixture ``q_{theta, eps}`` over a marginal.

    For a pool marginal ``weights`` holds the categorical probabilities and
    ``likelihood_ratios`` the per-point ``p / q``.  For an analytic marginal
    both are ``None`` and :meth:`ratio` evaluates ``p / q`` pointwise.
    """

    theta: FragilityParams
    epsilon: float
    marginal: PoolEmpirical | AnalyticGaussian
    norm_const: float
    g_floor: float
    weights: np.ndarray | None = None
    likelihood_ratios: np.ndarray | None = None
    degenerate: bool = False

    def _factor(self, x):
        g = optimal_weight(self.theta, np.atleast_1d(x))
        return np.maximum(g, self.g_floor)

    def ratio(self, x):
        """``p(x) / q(x)`` for arbitrary log-IM values."""
        xa = np.atleast_1d(np.asarray(x, dtype=float))
        if self.degenerate or self.epsilon == 1.0:
            out = np.ones_like(xa)
        else:
            t = self._factor(xa) / self.norm_const
            out = 1.0 / (self.epsilon + (1.0 - self.epsilon) * t)
        return float(out[0]) if np.ndim(x) == 0 else out


def defensive_weights(pool_x, theta: FragilityParams, epsilon: float, marginal=None) -> DefensiveDensity:
    """Build the defensive mixture for the current parameter estimate.

    ``pool_x`` is ignored when ``marginal`` is an :class:`AnalyticGaussian`.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if marginal is None:
        marginal = PoolEmpirical(np.asarray(pool_x, dtype=float))
    floor_rel = _G_FLOOR if epsilon > 0 else 0.0

    if isinstance(marginal, PoolEmpirical):
        x = marginal.x
        n = x.size
        g = optimal_weight(theta, x)
        floor = floor_rel * float(g.max())
        g = np.maximum(g, floor)
        total = float(g.sum())
        if total == 0.0:
            warnings.warn("instrumental weight vanishes over the pool; using q = p", DegeneratePoolWarning)
            w = np.full(n, 1.0 / n)
            return DefensiveDensity(theta, epsilon, marginal, 1.0, 0.0, w, np.ones(n), True)
        # mean of g over the pool plays the role of Z = E_p[g]
        z = total / n
        w = epsilon / n + (1.0 - epsilon) * g / total
        with np.errstate(divide="ignore"):  # q = 0 only when epsilon = 0
            ratios = 1.0 / (epsilon + (1.0 - epsilon) * g / z)
        if epsilon == 1.0:
            ratios = np.ones(n)
        return DefensiveDensity(theta, epsilon, marginal, z, floor, w, ratios, False)

    if isinstance(marginal, AnalyticGaussian):
        floor = floor_rel * G_MAX
        mu, sd = marginal.mean, marginal.std

        def integrand(t):
            return marginal.pdf(t) * max(optimal_weight(theta, t), floor)

        z, _ = integrate.quad(integrand, mu - 8 * sd, mu + 8 * sd, epsrel=1e-8, epsabs=0.0, limit=200)
        if z <= 0.0:
            warnings.warn("instrumental weight vanishes under p; using q = p", DegeneratePoolWarning)
            return DefensiveDensity(theta, epsilon, marginal, 1.0, 0.0, degenerate=True)
        return DefensiveDensity(theta, epsilon, marginal, float(z), floor)

    raise TypeError(f"unsupported marginal {type(marginal).__name__}")


@dataclass(frozen=True)
class DrawRecord:
    index: int | None
    x: float
    likelihood_ratio: float
    theta_at_draw: FragilityParams


def draw(density: DefensiveDensity, rng: np.random.Generator) -> DrawRecord:
    """Draw one point from ``density``; the likelihood ratio is frozen here."""
    m = density.marginal
    if isinstance(m, PoolEmpirical):
        cw = np.cumsum(density.weights)
        idx = int(np.searchsorted(cw, rng.random() * cw[-1], side="right"))
        idx = min(idx, m.size - 1)
        return DrawRecord(idx, float(m.x[idx]), float(density.likelihood_ratios[idx]), density.theta)

    # analytic: mixture component then rejection from p with envelope G_MAX
    eps = density.epsilon
    if density.degenerate or rng.random() < eps:
        x = float(m.sample(rng))
    else:
        while True:
            x = float(m.sample(rng))
            if rng.random() * G_MAX <= max(optimal_weight(density.theta, x), density.g_floor):
                break
    return DrawRecord(None, x, density.ratio(x), density.theta)
