"""Lognormal fragility model, quadratic loss and the ``beta_reg / beta`` penalty.

The covariate throughout is ``x = log(IM)``; the model is
``f(x) = Phi((x - log alpha) / beta)``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import ndtr

__all__ = [
    "FragilityParams",
    "ParamBounds",
    "LossBundle",
    "RegularizerConfig",
    "fragility_prob",
    "fragility_derivs",
    "quad_loss",
    "loss_terms",
    "regularizer",
]

_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class FragilityParams:
    """Median capacity ``alpha`` (IM units) and log-standard deviation ``beta``."""

    alpha: float
    beta: float

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError(f"alpha and beta must be positive, got {self.alpha}, {self.beta}")

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha, self.beta], dtype=float)

    @classmethod
    def from_array(cls, a) -> "FragilityParams":
        a = np.asarray(a, dtype=float)
        return cls(float(a[0]), float(a[1]))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FragilityParams":
        return cls(float(d["alpha"]), float(d["beta"]))


@dataclass(frozen=True)
class ParamBounds:
    """Compact parameter box for ``(alpha, beta)``."""

    alpha_lo: float = 1e-3
    alpha_hi: float = 1e2
    beta_lo: float = 0.05
    beta_hi: float = 2.0

    def __post_init__(self):
        if not (0 < self.alpha_lo < self.alpha_hi < np.inf):
            raise ValueError("need 0 < alpha_lo < alpha_hi < inf")
        if not (0 < self.beta_lo < self.beta_hi < np.inf):
            raise ValueError("need 0 < beta_lo < beta_hi < inf")

    @property
    def lo(self) -> np.ndarray:
        return np.array([self.alpha_lo, self.beta_lo])

    @property
    def hi(self) -> np.ndarray:
        return np.array([self.alpha_hi, self.beta_hi])

    def log_box(self) -> tuple[np.ndarray, np.ndarray]:
        return np.log(self.lo), np.log(self.hi)

    def contains(self, theta: FragilityParams) -> bool:
        return (self.alpha_lo <= theta.alpha <= self.alpha_hi
                and self.beta_lo <= theta.beta <= self.beta_hi)

    def clip(self, theta: FragilityParams) -> FragilityParams:
        return FragilityParams.from_array(np.clip(theta.as_array(), self.lo, self.hi))

    def on_boundary(self, theta: FragilityParams, rtol: float = 1e-6) -> bool:
        t = theta.as_array()
        tol = rtol * (self.hi - self.lo)
        return bool(np.any(t - self.lo <= tol) or np.any(self.hi - t <= tol))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ParamBounds":
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass
class LossBundle:
    value: float | np.ndarray
    grad: np.ndarray
    hess: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class RegularizerConfig:
    beta_reg: float = 0.0
    degenerate: bool = False

    def __post_init__(self):
        if self.beta_reg < 0:
            raise ValueError("beta_reg must be nonnegative")


def _as_theta(theta) -> tuple[float, float]:
    if isinstance(theta, FragilityParams):
        return theta.alpha, theta.beta
    a = np.asarray(theta, dtype=float)
    return float(a[0]), float(a[1])


def fragility_prob(theta, x):
    """Probability of failure ``Phi((x - log alpha) / beta)`` at log-IM ``x``."""
    alpha, beta = _as_theta(theta)
    return ndtr((np.asarray(x, dtype=float) - np.log(alpha)) / beta)


def fragility_derivs(theta, x):
    """Return ``f``, its theta-gradient ``(n, 2)`` and theta-Hessian ``(n, 2, 2)``."""
    alpha, beta = _as_theta(theta)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    z = (x - np.log(alpha)) / beta
    f = ndtr(z)
    phi = _INV_SQRT2PI * np.exp(-0.5 * z * z)
    za = np.full_like(z, -1.0 / (alpha * beta))
    zb = -z / beta
    zaa = 1.0 / (alpha * alpha * beta)
    zab = 1.0 / (alpha * beta * beta)
    zbb = 2.0 * z / (beta * beta)
    grad = np.stack([phi * za, phi * zb], axis=-1)
    hess = np.empty(x.shape + (2, 2))
    hess[:, 0, 0] = phi * (zaa - z * za * za)
    hess[:, 0, 1] = hess[:, 1, 0] = phi * (zab - z * za * zb)
    hess[:, 1, 1] = phi * (zbb - z * zb * zb)
    return f, grad, hess


def loss_terms(theta, x, s):
    """Vectorised quadratic loss with analytic theta-derivatives.

    Returns ``(value (n,), grad (n, 2), hess (n, 2, 2))``.
    """
    alpha, beta = _as_theta(theta)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    s = np.broadcast_to(np.asarray(s, dtype=float), x.shape)
    f, df, d2f = fragility_derivs((alpha, beta), x)
    # 1 - f from the upper tail keeps precision when f -> 1
    fb = ndtr(-(x - np.log(alpha)) / beta)
    r = np.where(s > 0.5, fb, -f)
    value = r * r
    grad = -2.0 * r[:, None] * df
    hess = 2.0 * df[:, :, None] * df[:, None, :] - 2.0 * r[:, None, None] * d2f
    return value, grad, hess


def quad_loss(theta, x, s) -> LossBundle:
    """Quadratic loss ``(s - f(x))**2`` with exact gradient and Hessian in theta."""
    value, grad, hess = loss_terms(theta, x, s)
    if np.ndim(x) == 0:
        return LossBundle(float(value[0]), grad[0], hess[0])
    return LossBundle(value, grad, hess)


def regularizer(theta, cfg: RegularizerConfig) -> LossBundle:
    """Penalty ``beta_reg / beta`` and its derivatives."""
    _, beta = _as_theta(theta)
    r = cfg.beta_reg
    hess = np.zeros((2, 2))
    hess[1, 1] = 2.0 * r / beta**3
    return LossBundle(r / beta, np.array([0.0, -r / beta**2]), hess)
