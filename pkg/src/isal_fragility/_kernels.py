"""Compiled inner loops shared by the estimators and the sampler.

Everything here works in log-coordinates ``u = (log alpha, log beta)``;
the public modules convert to and from ``theta = (alpha, beta)``.
"""
import math

import numpy as np
from numba import njit

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

LOSS_QUAD = 0
LOSS_NLL = 1

NLL_CLAMP = 1e-12


@njit(cache=True)
def _cdf_pair(z):
    # (Phi(z), Phi(-z)) computed separately so both tails keep full precision
    return 0.5 * math.erfc(-z * _INV_SQRT2), 0.5 * math.erfc(z * _INV_SQRT2)


@njit(cache=True)
def _point_derivs(c, beta, x):
    """Fragility value and its u-derivatives at a single point."""
    z = (x - c) / beta
    f, fb = _cdf_pair(z)
    phi = _INV_SQRT2PI * math.exp(-0.5 * z * z)
    z1 = -1.0 / beta
    z2 = -z
    f1 = phi * z1
    f2 = phi * z2
    # d2z/du1^2 = 0, d2z/du1du2 = 1/beta, d2z/du2^2 = z
    f11 = phi * (-z * z1 * z1)
    f12 = phi * (-z * z1 * z2 + 1.0 / beta)
    f22 = phi * (-z * z2 * z2 + z)
    return f, fb, f1, f2, f11, f12, f22


@njit(cache=True)
def objective_vgh(kind, u, x, s, w, beta_reg, m):
    """Value, u-gradient and u-Hessian of a per-point loss averaged over ``m``.

    ``kind`` selects the weighted quadratic risk (plus ``beta_reg / (m beta)``)
    or the clamped Bernoulli negative log-likelihood.
    """
    c = u[0]
    beta = math.exp(u[1])
    val = 0.0
    g = np.zeros(2)
    H = np.zeros((2, 2))
    for i in range(x.shape[0]):
        f, fb, f1, f2, f11, f12, f22 = _point_derivs(c, beta, x[i])
        if kind == LOSS_QUAD:
            r = fb if s[i] > 0.5 else -f
            wi = w[i]
            val += wi * r * r
            # l = r^2, dr/du = -df/du
            g[0] += wi * (-2.0 * r * f1)
            g[1] += wi * (-2.0 * r * f2)
            H[0, 0] += wi * (2.0 * f1 * f1 - 2.0 * r * f11)
            H[0, 1] += wi * (2.0 * f1 * f2 - 2.0 * r * f12)
            H[1, 1] += wi * (2.0 * f2 * f2 - 2.0 * r * f22)
        else:
            if s[i] > 0.5:
                if f < NLL_CLAMP:
                    val += -math.log(NLL_CLAMP)
                    continue
                val += -math.log(f)
                inv = 1.0 / f
                sgn = -1.0
            else:
                if fb < NLL_CLAMP:
                    val += -math.log(NLL_CLAMP)
                    continue
                val += -math.log(fb)
                inv = 1.0 / fb
                sgn = 1.0
            g[0] += sgn * f1 * inv
            g[1] += sgn * f2 * inv
            H[0, 0] += sgn * f11 * inv + f1 * f1 * inv * inv
            H[0, 1] += sgn * f12 * inv + f1 * f2 * inv * inv
            H[1, 1] += sgn * f22 * inv + f2 * f2 * inv * inv
    if kind == LOSS_QUAD and beta_reg > 0.0:
        # Omega = beta_reg * exp(-u2)
        om = beta_reg / beta
        val += om
        g[1] += -om
        H[1, 1] += om
    val /= m
    g /= m
    H /= m
    H[1, 0] = H[0, 1]
    return val, g, H


@njit(cache=True)
def objective_value(kind, u, x, s, w, beta_reg, m):
    c = u[0]
    beta = math.exp(u[1])
    val = 0.0
    for i in range(x.shape[0]):
        z = (x[i] - c) / beta
        f, fb = _cdf_pair(z)
        if kind == LOSS_QUAD:
            r = fb if s[i] > 0.5 else f
            val += w[i] * r * r
        else:
            p = f if s[i] > 0.5 else fb
            if p < NLL_CLAMP:
                p = NLL_CLAMP
            val += -math.log(p)
    if kind == LOSS_QUAD and beta_reg > 0.0:
        val += beta_reg / beta
    return val / m


@njit(cache=True)
def _projected_grad_norm(u, g, lo, hi):
    out = 0.0
    for k in range(2):
        gk = g[k]
        if u[k] <= lo[k] and gk > 0.0:
            gk = 0.0
        elif u[k] >= hi[k] and gk < 0.0:
            gk = 0.0
        out = max(out, abs(gk))
    return out


@njit(cache=True)
def local_minimize(kind, u0, lo, hi, x, s, w, beta_reg, m, maxiter, ftol):
    """Box-constrained modified Newton descent with projected backtracking.

    Indefinite Hessians are shifted to be positive definite; coordinates held
    at a bound by an outward gradient are frozen for the step.
    Returns ``(u, value, n_iter, converged)``.
    """
    u = np.minimum(np.maximum(u0.copy(), lo), hi)
    val, g, H = objective_vgh(kind, u, x, s, w, beta_reg, m)
    converged = False
    it = 0
    for it in range(1, maxiter + 1):
        free = np.ones(2, dtype=np.bool_)
        for k in range(2):
            if (u[k] <= lo[k] and g[k] > 0.0) or (u[k] >= hi[k] and g[k] < 0.0):
                free[k] = False
        if not free[0] and not free[1]:
            converged = True
            break
        d = np.zeros(2)
        if free[0] and free[1]:
            a = H[0, 0]
            b = H[0, 1]
            cc = H[1, 1]
            tr = a + cc
            det = a * cc - b * b
            disc = math.sqrt(max(0.25 * tr * tr - det, 0.0))
            lmin = 0.5 * tr - disc
            lmax = 0.5 * tr + disc
            delta = 1e-8 * max(abs(lmax), 1e-8)
            if lmin < delta:
                shift = delta - lmin
                a += shift
                cc += shift
                det = a * cc - b * b
            d[0] = -(cc * g[0] - b * g[1]) / det
            d[1] = -(-b * g[0] + a * g[1]) / det
        else:
            k = 0 if free[0] else 1
            hk = H[k, k]
            if hk <= 1e-8 * max(abs(hk), 1e-8):
                hk = max(abs(hk), 1e-8)
            d[k] = -g[k] / hk
        # trust cap in log-coordinates
        dn = max(abs(d[0]), abs(d[1]))
        if dn > 2.0:
            d *= 2.0 / dn
        slope = g[0] * d[0] + g[1] * d[1]
        if slope >= 0.0:
            d[0] = -g[0] if free[0] else 0.0
            d[1] = -g[1] if free[1] else 0.0
            dn = max(abs(d[0]), abs(d[1]))
            if dn == 0.0:
                converged = True
                break
            if dn > 2.0:
                d *= 2.0 / dn
        t = 1.0
        accepted = False
        un = u.copy()
        vn = val
        while t > 1e-14:
            for k in range(2):
                un[k] = min(max(u[k] + t * d[k], lo[k]), hi[k])
            vn = objective_value(kind, un, x, s, w, beta_reg, m)
            lin = g[0] * (un[0] - u[0]) + g[1] * (un[1] - u[1])
            if vn <= val + 1e-4 * lin:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            converged = True
            break
        step = max(abs(un[0] - u[0]), abs(un[1] - u[1]))
        dec = val - vn
        u = un
        val, g, H = objective_vgh(kind, u, x, s, w, beta_reg, m)
        if dec <= ftol * (abs(val) + ftol) and step < 1e-9:
            converged = True
            break
        if _projected_grad_norm(u, g, lo, hi) < 1e-13:
            converged = True
            break
    return u, val, it, converged


@njit(cache=True)
def multistart_minimize(kind, starts, lo, hi, x, s, w, beta_reg, m, maxiter, ftol):
    best_u = starts[0].copy()
    best_v = np.inf
    all_conv = True
    for j in range(starts.shape[0]):
        u, v, _, conv = local_minimize(kind, starts[j], lo, hi, x, s, w, beta_reg, m, maxiter, ftol)
        if v < best_v:
            best_v = v
            best_u = u
            all_conv = conv
    return best_u, best_v, all_conv


@njit(cache=True)
def instrumental_factor(x, c, beta):
    """sqrt(f (1-f)^4 + (1-f) f^4) evaluated pointwise."""
    out = np.empty(x.shape[0])
    for i in range(x.shape[0]):
        f, fb = _cdf_pair((x[i] - c) / beta)
        out[i] = math.sqrt(f * fb ** 4 + fb * f ** 4)
    return out
