"""IS-AL, random sampling and maximum likelihood fitting of fragility curves.

The functional layer (``minimize_regularized_risk``, ``isal_run``, ``rs_run``,
``mle_fit``, ``loo_select_beta_reg``) is what the benchmark harness drives.
The scikit-learn style classes at the bottom wrap it for use in pipelines.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import _kernels as K
from .model import FragilityParams, ParamBounds, RegularizerConfig, fragility_prob
from .sampling import (
    AnalyticGaussian,
    DrawRecord,
    PoolEmpirical,
    defensive_weights,
    draw,
)
from .utils.validation import check_labels, check_log_im, check_random_generator

__all__ = [
    "LabeledPoint",
    "WeightedDataset",
    "FitResult",
    "IsalTrajectory",
    "PassiveTrajectory",
    "CachedOracle",
    "OracleError",
    "DEFAULT_BETA_REG_GRID",
    "risk_objective",
    "minimize_regularized_risk",
    "mle_fit",
    "loo_select_beta_reg",
    "draw_from_marginal",
    "isal_run",
    "rs_run",
    "LeastSquaresFragility",
    "MLEFragility",
    "ISALFragility",
]

DEFAULT_BETA_REG_GRID = tuple(float(v) for v in np.logspace(-4, -1, 7))

_MAXITER = 200
_FTOL = 1e-14
# fixed Latin-hypercube design on the log-box (one point per row and column)
_LHS_FRACTIONS = np.array([[0.125, 0.625], [0.375, 0.125], [0.625, 0.875], [0.875, 0.375]])


@dataclass(frozen=True)
class LabeledPoint:
    x: float
    s: int
    w: float = 1.0


@dataclass
class WeightedDataset:
    """Labelled points with importance weights ``p / q`` frozen at draw time."""

    x: np.ndarray
    s: np.ndarray
    w: np.ndarray
    provenance: str = "RS"

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=float)
        self.s = np.ascontiguousarray(self.s, dtype=float)
        self.w = np.ascontiguousarray(np.broadcast_to(self.w, self.x.shape), dtype=float)
        if not (self.x.shape == self.s.shape == self.w.shape) or self.x.ndim != 1:
            raise ValueError("x, s and w must be 1-D arrays of equal length")
        if np.any(self.w <= 0):
            raise ValueError("weights must be positive")

    @classmethod
    def from_points(cls, points: Sequence[LabeledPoint], provenance: str = "RS") -> "WeightedDataset":
        return cls(np.array([p.x for p in points], dtype=float),
                   np.array([p.s for p in points], dtype=float),
                   np.array([p.w for p in points], dtype=float), provenance)

    def __len__(self) -> int:
        return self.x.size

    @property
    def points(self) -> list[LabeledPoint]:
        return [LabeledPoint(float(a), int(b), float(c)) for a, b, c in zip(self.x, self.s, self.w)]

    def subset(self, idx) -> "WeightedDataset":
        return WeightedDataset(self.x[idx], self.s[idx], self.w[idx], self.provenance)

    def head(self, k: int) -> "WeightedDataset":
        return self.subset(slice(0, k))

    @property
    def single_label(self) -> bool:
        return len(self) == 0 or bool(np.all(self.s == self.s[0]))


@dataclass(frozen=True)
class FitResult:
    theta_hat: FragilityParams
    risk_value: float
    n: int
    converged: bool = True
    boundary: bool = False


class OracleError(RuntimeError):
    def __init__(self, index, cause):
        super().__init__(f"labelling failed for pool index {index}: {cause!r}")
        self.index = index
        self.cause = cause


class CachedOracle:
    """Memoising wrapper around an expensive labelling function.

    ``fn`` receives a pool index (or a log-IM value for analytic marginals)
    and returns a 0/1 failure label.  ``n_calls`` counts distinct evaluations.
    """

    def __init__(self, fn: Callable):
        self.fn = fn
        self.cache: dict = {}
        self.n_queries = 0

    @property
    def n_calls(self) -> int:
        return len(self.cache)

    def __call__(self, key) -> int:
        self.n_queries += 1
        if key in self.cache:
            return self.cache[key]
        try:
            label = int(self.fn(key))
        except Exception as exc:  # noqa: BLE001 - re-raised with the index attached
            raise OracleError(key, exc) from exc
        if label not in (0, 1):
            raise OracleError(key, ValueError(f"label {label} not in {{0, 1}}"))
        self.cache[key] = label
        return label


def _as_oracle(oracle) -> CachedOracle:
    return oracle if isinstance(oracle, CachedOracle) else CachedOracle(oracle)


def _theta_from_u(u) -> FragilityParams:
    return FragilityParams(float(math.exp(u[0])), float(math.exp(u[1])))


def _u_from_theta(theta: FragilityParams) -> np.ndarray:
    return np.array([math.log(theta.alpha), math.log(theta.beta)])


def _starts(bounds: ParamBounds, init: FragilityParams | None) -> np.ndarray:
    lo, hi = bounds.log_box()
    lhs = lo + _LHS_FRACTIONS * (hi - lo)
    if init is None:
        return np.ascontiguousarray(lhs)
    u0 = np.clip(_u_from_theta(init), lo, hi)
    return np.ascontiguousarray(np.vstack([u0, lhs]))


def risk_objective(data: WeightedDataset, cfg: RegularizerConfig, theta) -> float:
    """Weighted quadratic risk ``mean(w * loss) + beta_reg / (m beta)``."""
    if isinstance(theta, FragilityParams):
        theta = theta.as_array()
    u = np.log(np.asarray(theta, dtype=float))
    return float(K.objective_value(K.LOSS_QUAD, u, data.x, data.s, data.w, cfg.beta_reg, float(len(data))))


def _fit(kind, data, beta_reg, bounds, init, starts=None) -> FitResult:
    if len(data) == 0:
        raise ValueError("cannot fit an empty dataset")
    lo, hi = bounds.log_box()
    if starts is None:
        starts = _starts(bounds, init)
    if data.single_label:
        # the objective is monotone in alpha: all failures favour the smallest
        # median, all survivals the largest, so pin alpha there and fit beta
        edge = lo[0] if data.s[0] > 0.5 else hi[0]
        lo, hi = np.array([edge, lo[1]]), np.array([edge, hi[1]])
        starts = np.ascontiguousarray(np.clip(starts, lo, hi))
    u, _, conv = K.multistart_minimize(kind, starts, lo, hi, data.x, data.s, data.w,
                                       float(beta_reg), float(len(data)), _MAXITER, _FTOL)
    theta = bounds.clip(_theta_from_u(u))
    value = float(K.objective_value(kind, np.log(theta.as_array()), data.x, data.s, data.w,
                                    float(beta_reg), float(len(data))))
    return FitResult(theta, value, len(data), bool(conv), bounds.on_boundary(theta))


def minimize_regularized_risk(data: WeightedDataset, cfg: RegularizerConfig = RegularizerConfig(),
                              bounds: ParamBounds = ParamBounds(),
                              init: FragilityParams | None = None) -> FitResult:
    """Minimise the weighted regularised quadratic risk over the parameter box.

    Five starts (``init`` plus a fixed Latin-hypercube design on the log-box)
    each run a projected modified-Newton descent with analytic derivatives.
    Single-label data yield a boundary fit with ``boundary=True``.
    """
    return _fit(K.LOSS_QUAD, data, cfg.beta_reg, bounds, init)


def mle_fit(data: WeightedDataset, bounds: ParamBounds = ParamBounds(),
            init: FragilityParams | None = None) -> FitResult:
    """Bernoulli maximum likelihood; ``risk_value`` is the mean negative log-likelihood."""
    if not np.all(data.w == 1.0):
        raise ValueError("MLE expects unit-weight data")
    return _fit(K.LOSS_NLL, data, 0.0, bounds, init)


def loo_select_beta_reg(init_set: WeightedDataset, grid: Sequence[float] = DEFAULT_BETA_REG_GRID,
                        bounds: ParamBounds = ParamBounds()) -> RegularizerConfig:
    """Pick ``beta_reg`` minimising the leave-one-out quadratic loss.

    Ties go to the smallest value.  When every held-out fit is degenerate
    (e.g. a single label) the middle grid value is returned, flagged.
    """
    grid = np.sort(np.asarray(grid, dtype=float))
    if grid.size == 0:
        raise ValueError("empty beta_reg grid")
    if grid.size == 1:
        return RegularizerConfig(float(grid[0]))
    m = len(init_set)
    if m < 3:
        raise ValueError("leave-one-out needs at least 3 points")
    mid = RegularizerConfig(float(grid[grid.size // 2]), degenerate=True)
    if init_set.single_label:
        return mid
    lo, hi = bounds.log_box()
    scores = np.empty(grid.size)
    all_boundary = True
    keep = np.ones(m, dtype=bool)
    for k, br in enumerate(grid):
        total = 0.0
        for j in range(m):
            keep[:] = True
            keep[j] = False
            fit = _fit(K.LOSS_QUAD, init_set.subset(keep), br, bounds, None)
            all_boundary &= fit.boundary
            f = fragility_prob(fit.theta_hat, init_set.x[j])
            total += init_set.w[j] * (init_set.s[j] - f) ** 2
        scores[k] = total / m
    if all_boundary:
        return mid
    return RegularizerConfig(float(grid[int(np.argmin(scores))]))


def _marginal_of(pool) -> PoolEmpirical | AnalyticGaussian:
    if isinstance(pool, (PoolEmpirical, AnalyticGaussian)):
        return pool
    return PoolEmpirical(np.asarray(pool, dtype=float))


def draw_from_marginal(pool, k: int, rng: np.random.Generator, theta: FragilityParams | None = None) -> list[DrawRecord]:
    """``k`` i.i.d. draws from ``p`` (likelihood ratio 1)."""
    marginal = _marginal_of(pool)
    th = theta if theta is not None else FragilityParams(1.0, 1.0)
    if isinstance(marginal, PoolEmpirical):
        idx = rng.integers(0, marginal.size, size=k)
        return [DrawRecord(int(i), float(marginal.x[i]), 1.0, th) for i in idx]
    xs = marginal.sample(rng, size=k)
    return [DrawRecord(None, float(v), 1.0, th) for v in xs]


def _label(oracle: CachedOracle, rec: DrawRecord) -> int:
    return oracle(rec.index if rec.index is not None else rec.x)


@dataclass
class IsalTrajectory:
    """Draws and refits of one IS-AL run.

    ``fits[i]`` is the estimate after ``i`` labels (``fits[0]`` is the
    initial guess); draw ``i`` (1-based) used the density at ``fits[i-1]``.
    """

    x: np.ndarray
    s: np.ndarray
    ratio: np.ndarray
    index: np.ndarray
    theta_at_draw: np.ndarray
    fits: list
    n0: int
    epsilon: float
    beta_reg: float
    marginal: PoolEmpirical | AnalyticGaussian = field(repr=False)
    bounds: ParamBounds = ParamBounds()
    oracle_calls: int = 0

    @property
    def n(self) -> int:
        return self.x.size

    @property
    def theta_hat(self) -> FragilityParams:
        return self.fits[-1].theta_hat

    @property
    def draws(self) -> list[DrawRecord]:
        return [DrawRecord(None if i < 0 else int(i), float(x), float(r), FragilityParams.from_array(t))
                for i, x, r, t in zip(self.index, self.x, self.ratio, self.theta_at_draw)]

    def dataset(self, k: int | None = None) -> WeightedDataset:
        k = self.n if k is None else k
        return WeightedDataset(self.x[:k], self.s[:k], self.ratio[:k], "ISAL")

    def prefix(self, k: int) -> "IsalTrajectory":
        """The run as it stood after ``k`` labels."""
        if not 1 <= k <= self.n:
            raise ValueError(f"prefix length {k} outside [1, {self.n}]")
        return IsalTrajectory(self.x[:k], self.s[:k], self.ratio[:k], self.index[:k],
                              self.theta_at_draw[:k], self.fits[:k + 1], min(self.n0, k),
                              self.epsilon, self.beta_reg, self.marginal, self.bounds, self.oracle_calls)


def isal_run(pool, oracle, theta0: FragilityParams, n: int, n0: int = 20, epsilon: float = 1e-3,
             cfg: RegularizerConfig = RegularizerConfig(), rng=None, *,
             bounds: ParamBounds = ParamBounds(),
             warmup: Sequence[DrawRecord] | None = None, penalty_scale: str = "step") -> IsalTrajectory:
    """Importance-sampling active learning.

    Draws ``n`` labelled points.  The first ``n0`` come from the defensive
    density at ``theta0`` (or are the supplied ``warmup`` records, e.g. draws
    from ``p``) and trigger no refit; every later draw uses the density at
    the latest estimate, which is refitted after each new label on the
    ``1/i``-normalised weighted risk.  The penalty at step ``i`` is
    ``beta_reg / (i beta)`` (``penalty_scale="step"``, so every prefix is a
    valid shorter run) or ``beta_reg / (n beta)`` (``"final"``).
    """
    rng = check_random_generator(rng)
    if warmup is not None:
        n0 = len(warmup)
    if not n >= n0 >= 1:
        raise ValueError(f"need n >= n0 >= 1, got n={n}, n0={n0}")
    if not bounds.contains(theta0):
        raise ValueError("theta0 outside the parameter bounds")
    if penalty_scale not in ("step", "final"):
        raise ValueError("penalty_scale must be 'step' or 'final'")
    marginal = _marginal_of(pool)
    oracle = _as_oracle(oracle)
    pool_x = marginal.x if isinstance(marginal, PoolEmpirical) else None

    xs = np.empty(n)
    ss = np.empty(n)
    ws = np.empty(n)
    idx = np.full(n, -1, dtype=np.int64)
    tdraw = np.empty((n, 2))
    fits = [FitResult(theta0, float("nan"), 0, True, bounds.on_boundary(theta0))]

    current = theta0
    density = defensive_weights(pool_x, current, epsilon, marginal)
    lo, hi = bounds.log_box()
    for i in range(n):
        if warmup is not None and i < n0:
            rec = warmup[i]
        else:
            rec = draw(density, rng)
        xs[i] = rec.x
        ss[i] = _label(oracle, rec)
        ws[i] = rec.likelihood_ratio
        idx[i] = -1 if rec.index is None else rec.index
        tdraw[i] = rec.theta_at_draw.as_array()
        m = i + 1
        if m < n0:
            fits.append(fits[-1])
            continue
        data = WeightedDataset(xs[:m], ss[:m], ws[:m], "ISAL")
        starts = np.ascontiguousarray(np.vstack([np.clip(_u_from_theta(current), lo, hi),
                                                 _starts(bounds, None)]))
        br = cfg.beta_reg if penalty_scale == "step" else cfg.beta_reg * m / n
        fit = _fit(K.LOSS_QUAD, data, br, bounds, None, starts)
        fits.append(fit)
        current = fit.theta_hat
        if m < n:
            density = defensive_weights(pool_x, current, epsilon, marginal)
    return IsalTrajectory(xs, ss, ws, idx, tdraw, fits, n0, float(epsilon), float(cfg.beta_reg),
                          marginal, bounds, oracle.n_calls)


@dataclass
class PassiveTrajectory:
    """Random-sampling data with fits at the requested sample sizes."""

    x: np.ndarray
    s: np.ndarray
    index: np.ndarray
    fits: dict
    beta_reg: float
    oracle_calls: int = 0

    @property
    def n(self) -> int:
        return self.x.size

    def dataset(self, k: int | None = None) -> WeightedDataset:
        k = self.n if k is None else k
        return WeightedDataset(self.x[:k], self.s[:k], np.ones(k), "RS")


def rs_run(pool, oracle, n: int, cfg: RegularizerConfig = RegularizerConfig(), rng=None, *,
           bounds: ParamBounds = ParamBounds(), init: Sequence[DrawRecord] | None = None,
           checkpoints: Sequence[int] | None = None, estimator: str = "rs") -> PassiveTrajectory:
    """Random sampling from ``p``: the ``init`` records followed by ``n`` new draws.

    ``estimator`` is ``"rs"`` (regularised least squares) or ``"mle"``.  Fits
    are computed at each size in ``checkpoints`` (default: the final size).
    """
    rng = check_random_generator(rng)
    oracle = _as_oracle(oracle)
    records = list(init or []) + draw_from_marginal(pool, n, rng)
    total = len(records)
    xs = np.array([r.x for r in records], dtype=float)
    ss = np.array([_label(oracle, r) for r in records], dtype=float)
    idx = np.array([-1 if r.index is None else r.index for r in records], dtype=np.int64)
    sizes = sorted(set(checkpoints)) if checkpoints else [total]
    fits = {}
    prev = None
    for k in sizes:
        if not 1 <= k <= total:
            raise ValueError(f"checkpoint {k} outside [1, {total}]")
        data = WeightedDataset(xs[:k], ss[:k], np.ones(k), estimator.upper())
        if estimator == "mle":
            fit = mle_fit(data, bounds, prev)
        else:
            fit = minimize_regularized_risk(data, cfg, bounds, prev)
        fits[k] = fit
        prev = fit.theta_hat
    return PassiveTrajectory(xs, ss, idx, fits, float(cfg.beta_reg), oracle.n_calls)


# ----------------------------------------------------------------------------
# scikit-learn style wrappers


class _FragilityBase(ClassifierMixin, BaseEstimator):
    classes_ = np.array([0, 1])

    def _theta(self) -> FragilityParams:
        check_is_fitted(self, "theta_")
        return self.theta_

    def predict_proba(self, X):
        """Columns ``[P(S=0), P(S=1)]`` at log-IM values ``X``."""
        x = check_log_im(X)
        f = fragility_prob(self._theta(), x)
        return np.column_stack([1.0 - f, f])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)

    def fragility(self, X):
        return self.predict_proba(X)[:, 1]

    def _store(self, fit: FitResult):
        self.theta_ = fit.theta_hat
        self.alpha_ = fit.theta_hat.alpha
        self.beta_ = fit.theta_hat.beta
        self.fit_result_ = fit
        self.n_features_in_ = 1
        return self


class LeastSquaresFragility(_FragilityBase):
    """Regularised least-squares lognormal fit.

    Parameters
    ----------
    beta_reg : float or "loo"
        Penalty weight on ``1 / beta``; ``"loo"`` selects it by leave-one-out
        over ``beta_reg_grid`` on the training data.
    """

    def __init__(self, beta_reg=0.0, beta_reg_grid=DEFAULT_BETA_REG_GRID, bounds=None):
        self.beta_reg = beta_reg
        self.beta_reg_grid = beta_reg_grid
        self.bounds = bounds

    def fit(self, X, y, sample_weight=None):
        x = check_log_im(X)
        s = check_labels(y, x.size)
        w = np.ones_like(x) if sample_weight is None else np.asarray(sample_weight, dtype=float)
        data = WeightedDataset(x, s, w)
        bounds = self.bounds or ParamBounds()
        if self.beta_reg == "loo":
            cfg = loo_select_beta_reg(data, self.beta_reg_grid, bounds)
        else:
            cfg = RegularizerConfig(float(self.beta_reg))
        self.beta_reg_ = cfg.beta_reg
        return self._store(minimize_regularized_risk(data, cfg, bounds))


class MLEFragility(_FragilityBase):
    def __init__(self, bounds=None):
        self.bounds = bounds

    def fit(self, X, y):
        x = check_log_im(X)
        s = check_labels(y, x.size)
        return self._store(mle_fit(WeightedDataset(x, s, np.ones_like(x), "MLE"), self.bounds or ParamBounds()))


class ISALFragility(_FragilityBase):
    """Active learner: ``fit`` takes the *unlabelled* pool and a labelling oracle.

    ``oracle(i)`` must return the 0/1 failure label of pool point ``i``.
    When ``theta0`` is None the first ``n0`` points are drawn from the pool
    uniformly, fitted by least squares, and reused as the warm-up sample.
    """

    def __init__(self, n=120, n0=20, epsilon=1e-3, beta_reg="loo", beta_reg_grid=DEFAULT_BETA_REG_GRID,
                 theta0=None, bounds=None, random_state=None):
        self.n = n
        self.n0 = n0
        self.epsilon = epsilon
        self.beta_reg = beta_reg
        self.beta_reg_grid = beta_reg_grid
        self.theta0 = theta0
        self.bounds = bounds
        self.random_state = random_state

    def fit(self, X, y=None, *, oracle):
        pool = PoolEmpirical(check_log_im(X))
        rng = check_random_generator(self.random_state)
        bounds = self.bounds or ParamBounds()
        oracle = _as_oracle(oracle)
        warm = None
        if self.theta0 is None:
            warm = draw_from_marginal(pool, self.n0, rng)
            init = WeightedDataset([r.x for r in warm], [_label(oracle, r) for r in warm], 1.0)
            cfg = self._cfg(init, bounds)
            theta0 = minimize_regularized_risk(init, cfg, bounds).theta_hat
        else:
            theta0 = self.theta0 if isinstance(self.theta0, FragilityParams) else FragilityParams(*self.theta0)
            cfg = None
        if cfg is None:
            # warm-up from q at theta0, then choose beta_reg on it
            dens = defensive_weights(pool.x, theta0, self.epsilon, pool)
            warm = [draw(dens, rng) for _ in range(self.n0)]
            init = WeightedDataset([r.x for r in warm], [_label(oracle, r) for r in warm],
                                   [r.likelihood_ratio for r in warm], "ISAL")
            cfg = self._cfg(init, bounds)
        traj = isal_run(pool, oracle, theta0, self.n, epsilon=self.epsilon, cfg=cfg, rng=rng,
                        bounds=bounds, warmup=warm)
        self.trajectory_ = traj
        self.beta_reg_ = cfg.beta_reg
        self.oracle_calls_ = oracle.n_calls
        return self._store(traj.fits[-1])

    def _cfg(self, init, bounds):
        if self.beta_reg == "loo":
            return loo_select_beta_reg(init, self.beta_reg_grid, bounds)
        return RegularizerConfig(float(self.beta_reg))
