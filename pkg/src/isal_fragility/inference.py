"""Asymptotic inference for IS-AL estimates.

Plug-in sandwich covariance ``G = H^-1 V H^-T`` built from the frozen
draw-time likelihood ratios, the two-run convergence statistic ``W_n``,
chi-square confidence ellipsoids and the averaged two-run estimator.
All matrices are in ``theta = (alpha, beta)`` coordinates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import FragilityParams, loss_terms
from .sampling import PoolEmpirical, defensive_weights

__all__ = [
    "SingularHessian",
    "CovariancePack",
    "Ellipsoid",
    "ConvergenceVerdict",
    "hessian_plug_in",
    "score_outer_plug_in",
    "risk_gradient",
    "g_hat",
    "sandwich",
    "chi2_quantile",
    "chi2_cdf",
    "ellipsoid",
    "contains",
    "volume",
    "w_statistic",
    "combine_runs",
]

COND_MAX = 1e12


class SingularHessian(ArithmeticError):
    """A 2x2 matrix needed for inference is (numerically) singular."""


@dataclass(frozen=True, eq=False)
class CovariancePack:
    r_ddot_hat: np.ndarray
    v_hat: np.ndarray
    g_hat: np.ndarray
    n: int
    theta: FragilityParams | None = None

    def recompute(self) -> np.ndarray:
        return sandwich(self.r_ddot_hat, self.v_hat)


@dataclass(frozen=True, eq=False)
class Ellipsoid:
    """``{theta : (theta - c)^T shape^-1 (theta - c) < chi2_threshold}``."""

    center: FragilityParams
    shape: np.ndarray
    xi: float
    chi2_threshold: float

    def quadratic_form(self, theta) -> float:
        t = theta.as_array() if isinstance(theta, FragilityParams) else np.asarray(theta, dtype=float)
        d = t - self.center.as_array()
        return float(d @ _inv2(self.shape) @ d)

    def contains(self, theta) -> bool:
        return self.quadratic_form(theta) < self.chi2_threshold

    @property
    def volume(self) -> float:
        return float(np.linalg.det(self.shape))


@dataclass(frozen=True)
class ConvergenceVerdict:
    w_n: float
    threshold: float
    reject: bool


def _check_cond(m: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(m)):
        raise SingularHessian(f"{what} has non-finite entries")
    ev = np.abs(np.linalg.eigvals(m))
    if ev.min() == 0.0 or ev.max() / ev.min() > COND_MAX:
        raise SingularHessian(f"{what} is singular (condition number above {COND_MAX:g})")


def _inv2(m: np.ndarray) -> np.ndarray:
    """Inverse of a 2x2 matrix through its adjugate."""
    det = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
    if det == 0.0 or not np.isfinite(det):
        raise SingularHessian("matrix is singular")
    return np.array([[m[1, 1], -m[0, 1]], [-m[1, 0], m[0, 0]]]) / det


def sandwich(h: np.ndarray, v: np.ndarray) -> np.ndarray:
    hi = _inv2(np.asarray(h, dtype=float))
    return hi @ np.asarray(v, dtype=float) @ hi.T


def _data(traj):
    """(x, s, draw-time ratios) of a trajectory or weighted dataset."""
    w = getattr(traj, "ratio", None)
    if w is None:
        w = traj.w
    return np.asarray(traj.x, dtype=float), np.asarray(traj.s, dtype=float), np.asarray(w, dtype=float)


def _as_theta(theta) -> FragilityParams:
    return theta if isinstance(theta, FragilityParams) else FragilityParams.from_array(theta)


def hessian_plug_in(traj, theta) -> np.ndarray:
    """``(1/n) sum_i ratio_i * Hessian of the loss at theta``; ratios are the draw-time ones."""
    x, s, w = _data(traj)
    if np.unique(x).size < 2:
        raise SingularHessian("fewer than two distinct design points")
    _, _, hess = loss_terms(_as_theta(theta), x, s)
    h = np.einsum("i,ijk->jk", w, hess) / x.size
    h = 0.5 * (h + h.T)
    _check_cond(h, "loss Hessian")
    return h


def _eval_ratio(traj, theta, epsilon) -> np.ndarray | float:
    """``p / q_{theta, eps}`` at the design points, with the density rebuilt at ``theta``."""
    if epsilon == 1.0:
        return 1.0
    marginal = getattr(traj, "marginal", None)
    if marginal is None:
        raise ValueError("trajectory carries no marginal; cannot evaluate q at a new theta")
    pool_x = marginal.x if isinstance(marginal, PoolEmpirical) else None
    dens = defensive_weights(pool_x, theta, epsilon, marginal)
    return dens.ratio(np.asarray(traj.x, dtype=float))


def score_outer_plug_in(traj, theta, epsilon: float | None = None) -> np.ndarray:
    """``(1/n) sum_i ratio_i * (p/q_{theta,eps})(X_i) * score score^T``.

    The first ratio is frozen at draw time; the second uses the defensive
    density at the evaluation point ``theta``.
    """
    theta = _as_theta(theta)
    eps = getattr(traj, "epsilon", 1.0) if epsilon is None else epsilon
    x, s, w = _data(traj)
    _, grad, _ = loss_terms(theta, x, s)
    c = w * _eval_ratio(traj, theta, eps)
    v = np.einsum("i,ij,ik->jk", c, grad, grad) / x.size
    return 0.5 * (v + v.T)


def risk_gradient(traj, theta, beta_reg: float | None = None) -> np.ndarray:
    """Gradient in theta of ``(1/n) sum w loss + beta_reg / (n beta)``."""
    theta = _as_theta(theta)
    br = getattr(traj, "beta_reg", 0.0) if beta_reg is None else beta_reg
    x, s, w = _data(traj)
    _, grad, _ = loss_terms(theta, x, s)
    g = (w @ grad) / x.size
    g[1] -= br / (x.size * theta.beta ** 2)
    return g


def g_hat(traj, theta=None, epsilon: float | None = None) -> CovariancePack:
    """Plug-in estimate of the asymptotic covariance of ``sqrt(n) (theta_hat - theta*)``."""
    theta = traj.theta_hat if theta is None else _as_theta(theta)
    h = hessian_plug_in(traj, theta)
    v = score_outer_plug_in(traj, theta, epsilon)
    return CovariancePack(h, v, sandwich(h, v), len(traj.x), theta)


def chi2_quantile(dof: int, prob: float) -> float:
    """Quantile of the chi-square distribution with 2 degrees of freedom."""
    if dof != 2:
        raise NotImplementedError("only dof = 2 is supported")
    if not 0.0 < prob < 1.0:
        raise ValueError(f"probability must lie in (0, 1), got {prob}")
    return -2.0 * math.log1p(-prob)


def chi2_cdf(dof: int, q: float) -> float:
    if dof != 2:
        raise NotImplementedError("only dof = 2 is supported")
    return -math.expm1(-0.5 * q) if q > 0 else 0.0


def ellipsoid(center, pack: CovariancePack | np.ndarray, xi: float = 0.9, n: int | None = None) -> Ellipsoid:
    """Asymptotic confidence ellipsoid of level ``xi`` with shape ``G / n``."""
    g = pack.g_hat if isinstance(pack, CovariancePack) else np.asarray(pack, dtype=float)
    if n is None:
        if not isinstance(pack, CovariancePack):
            raise ValueError("n is required when passing a bare matrix")
        n = pack.n
    shape = g / n
    _inv2(shape)
    return Ellipsoid(_as_theta(center), shape, xi, chi2_quantile(2, xi))


def contains(e: Ellipsoid, theta) -> bool:
    return e.contains(theta)


def volume(e: Ellipsoid) -> float:
    """``det(G / n)``: the customary ellipsoid volume proxy, without the pi factor."""
    return e.volume


def w_statistic(run1, run2, epsilon: float | None = None, xi: float = 0.1) -> ConvergenceVerdict:
    """Two-run cross-gradient statistic; ``reject`` when above the ``1 - xi`` chi2(2) quantile."""
    n = len(run1.x)
    if len(run2.x) != n:
        raise ValueError("runs must have the same length")
    t1, t2 = run1.theta_hat, run2.theta_hat
    delta = risk_gradient(run1, t2) - risk_gradient(run2, t1)
    v12 = 0.5 * (score_outer_plug_in(run1, t1, epsilon) + score_outer_plug_in(run2, t2, epsilon))
    _check_cond(v12, "averaged score covariance")
    w = max(n / 8.0 * float(delta @ _inv2(v12) @ delta), 0.0)
    thr = chi2_quantile(2, 1.0 - xi)
    return ConvergenceVerdict(w, thr, w > thr)


def combine_runs(run1, run2, epsilon: float | None = None
                 ) -> tuple[FragilityParams, CovariancePack, Callable[[float], Ellipsoid]]:
    """Midpoint of two independent runs with its covariance; ellipsoids use ``2n``."""
    n = len(run1.x)
    if len(run2.x) != n:
        raise ValueError("runs must have the same length")
    t1, t2 = run1.theta_hat, run2.theta_hat
    theta12 = FragilityParams.from_array(0.5 * (t1.as_array() + t2.as_array()))
    h = 0.5 * (hessian_plug_in(run1, t1) + hessian_plug_in(run2, t2))
    v = 0.5 * (score_outer_plug_in(run1, t1, epsilon) + score_outer_plug_in(run2, t2, epsilon))
    pack = CovariancePack(h, v, sandwich(h, v), 2 * n, theta12)

    def factory(xi: float = 0.9) -> Ellipsoid:
        return ellipsoid(theta12, pack, xi, 2 * n)

    return theta12, pack, factory
