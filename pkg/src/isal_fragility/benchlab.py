"""Replication harness and benchmark metrics.

Two test cases are provided: a synthetic case with a known lognormal
fragility curve and Gaussian log-IM marginal, and the elasto-plastic
oscillator driven by the synthetic signal pool.  Each replication runs
IS-AL, random sampling (RS) and maximum likelihood (MLE) from its own
seeded streams, so results do not depend on scheduling.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import integrate
from sklearn.cluster import KMeans

from .dynamics import SignalPool
from .estimators import (
    DEFAULT_BETA_REG_GRID,
    FitResult,
    IsalTrajectory,
    WeightedDataset,
    draw_from_marginal,
    isal_run,
    loo_select_beta_reg,
    minimize_regularized_risk,
    mle_fit,
    risk_objective,
)
from .inference import (
    CovariancePack,
    Ellipsoid,
    SingularHessian,
    _inv2,
    chi2_quantile,
    g_hat,
)
from .model import FragilityParams, ParamBounds, RegularizerConfig, fragility_prob
from .sampling import AnalyticGaussian, DrawRecord, PoolEmpirical, defensive_weights, draw

__all__ = [
    "STRATEGIES",
    "ZeroMean",
    "TooManyDegenerate",
    "SyntheticCase",
    "OscillatorCase",
    "RunSummary",
    "ReplicationResult",
    "ReplicationSet",
    "MetricsTable",
    "ReferenceCurve",
    "CoverageResult",
    "BootstrapResult",
    "test_risk",
    "rsd",
    "rb",
    "efficiency",
    "metrics_table",
    "coverage_probability",
    "cev",
    "bootstrap_mle_cov",
    "nonparametric_reference",
    "fragility_ci_from_asymptotics",
    "synthetic_replication",
    "oscillator_replication",
    "replication_seed",
]

STRATEGIES = ("ISAL", "RS", "MLE")


class ZeroMean(ZeroDivisionError):
    """Relative standard deviation of values with zero mean."""


class TooManyDegenerate(RuntimeError):
    """More than half of the bootstrap resamples were unusable."""


# --- metrics -------------------------------------------------------------------

def test_risk(theta, cfg: RegularizerConfig, x, s) -> float:
    """Mean quadratic loss on an i.i.d. test set plus ``beta_reg / (n_t beta)``."""
    data = WeightedDataset(np.asarray(x, dtype=float), np.asarray(s, dtype=float), 1.0)
    return risk_objective(data, cfg, theta)


test_risk.__test__ = False  # not a pytest test despite the name


def rsd(values) -> float:
    """Sample standard deviation over mean; NaN for fewer than two values."""
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return float("nan")
    m = v.mean()
    if m == 0.0:
        raise ZeroMean("relative standard deviation of zero-mean values")
    return float(v.std(ddof=1) / m)


def rb(values, b: float) -> float:
    v = np.asarray(values, dtype=float)
    return float(abs(b - v.mean()) / b)


def efficiency(values, reference) -> float:
    """Variance ratio ``Var(values) / Var(reference)``."""
    a = np.asarray(values, dtype=float)
    r = np.asarray(reference, dtype=float)
    if a.size < 2 or r.size < 2:
        return float("nan")
    vr = r.var(ddof=1)
    return float(a.var(ddof=1) / vr) if vr > 0 else float("nan")


@dataclass(frozen=True)
class CoverageResult:
    cp: float
    se: float
    n_used: int
    n_missing: int = 0


def coverage_probability(ellipsoids: Iterable[Ellipsoid | None], theta_star) -> CoverageResult:
    """Fraction of ellipsoids containing ``theta_star``; ``None`` entries are missing."""
    hits = []
    missing = 0
    for e in ellipsoids:
        if e is None:
            missing += 1
            continue
        hits.append(e.contains(theta_star))
    if not hits:
        return CoverageResult(float("nan"), float("nan"), 0, missing)
    cp = float(np.mean(hits))
    return CoverageResult(cp, math.sqrt(cp * (1.0 - cp) / len(hits)), len(hits), missing)


def cev(cov: CovariancePack | np.ndarray, n: int | None = None) -> float:
    """``det(cov / n)``; NaN when the matrix is singular or missing."""
    if cov is None:
        return float("nan")
    if isinstance(cov, CovariancePack):
        m, n = cov.g_hat, (cov.n if n is None else n)
    else:
        m = np.asarray(cov, dtype=float)
    if n is None:
        raise ValueError("n is required for a bare matrix")
    d = float(np.linalg.det(m / n))
    return d if np.isfinite(d) and d > 0 else float("nan")


# --- bootstrap -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BootstrapResult:
    cov: np.ndarray
    theta_hat: FragilityParams
    n: int
    n_kept: int
    n_dropped: int

    def ellipsoid(self, xi: float = 0.9) -> Ellipsoid:
        shape = self.cov / self.n
        _inv2(shape)
        return Ellipsoid(self.theta_hat, shape, xi, chi2_quantile(2, xi))


def bootstrap_mle_cov(data: WeightedDataset, B: int = 200, bounds: ParamBounds = ParamBounds(),
                      rng=None, theta_hat: FragilityParams | None = None) -> BootstrapResult:
    """Nonparametric bootstrap of the MLE: ``(1/B) sum n (theta_b - theta_hat)(...)^T``.

    Single-label resamples are dropped; more than half dropped raises
    :class:`TooManyDegenerate`.
    """
    rng = np.random.default_rng(rng)
    n = len(data)
    if theta_hat is None:
        theta_hat = mle_fit(data, bounds).theta_hat
    t0 = theta_hat.as_array()
    acc = np.zeros((2, 2))
    kept = dropped = 0
    for _ in range(B):
        idx = rng.integers(0, n, size=n)
        sub = data.subset(idx)
        if sub.single_label:
            dropped += 1
            continue
        d = mle_fit(sub, bounds, theta_hat).theta_hat.as_array() - t0
        acc += np.outer(d, d)
        kept += 1
    if dropped > 0.5 * B:
        raise TooManyDegenerate(f"{dropped} of {B} bootstrap resamples were single-label")
    return BootstrapResult(n * acc / kept, theta_hat, n, kept, dropped)


# --- nonparametric reference ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ReferenceCurve:
    centers: np.ndarray
    fractions: np.ndarray
    counts: np.ndarray

    @property
    def standard_errors(self) -> np.ndarray:
        f = self.fractions
        return np.sqrt(f * (1.0 - f) / np.maximum(self.counts, 1))


def nonparametric_reference(x, labels, k: int = 30, n_init: int = 10, seed: int = 0) -> ReferenceCurve:
    """1-D k-means on log-IM values and the failure fraction of each cluster."""
    x = np.asarray(x, dtype=float).reshape(-1, 1)
    s = np.asarray(labels, dtype=float)
    k = min(k, np.unique(x).size)
    km = KMeans(n_clusters=k, n_init=n_init, random_state=seed).fit(x)
    order = np.argsort(km.cluster_centers_[:, 0])
    centers = km.cluster_centers_[order, 0]
    remap = np.empty(k, dtype=int)
    remap[order] = np.arange(k)
    lab = remap[km.labels_]
    counts = np.bincount(lab, minlength=k)
    sums = np.bincount(lab, weights=s, minlength=k)
    return ReferenceCurve(centers, sums / counts, counts)


def fragility_ci_from_asymptotics(theta_hat: FragilityParams, pack: CovariancePack | np.ndarray, n: int,
                                  grid, draws: int = 500, band: tuple[float, float] = (0.05, 0.95),
                                  bounds: ParamBounds = ParamBounds(), rng=None):
    """Pointwise band of fragility curves under ``N(theta_hat, G / n)``.

    Parameter draws are clipped to the box.  The band is widened where needed
    so that it always contains the point-estimate curve.
    Returns ``(point, lower, upper)`` over ``grid`` (log-IM values).
    """
    g = pack.g_hat if isinstance(pack, CovariancePack) else np.asarray(pack, dtype=float)
    if not np.all(np.isfinite(g)):
        raise SingularHessian("covariance has non-finite entries")
    rng = np.random.default_rng(rng)
    grid = np.asarray(grid, dtype=float)
    cov = 0.5 * (g + g.T) / n
    w, v = np.linalg.eigh(cov)
    root = v * np.sqrt(np.clip(w, 0.0, None))
    samples = theta_hat.as_array() + rng.standard_normal((draws, 2)) @ root.T
    samples = np.clip(samples, bounds.lo, bounds.hi)
    curves = np.array([fragility_prob(t, grid) for t in samples])
    point = fragility_prob(theta_hat, grid)
    lo, hi = np.quantile(curves, band, axis=0)
    return point, np.minimum(lo, point), np.maximum(hi, point)


# --- test cases -----------------------------------------------------------------------

def replication_seed(base_seed: int, r: int) -> int:
    return int(base_seed) + int(r)


@dataclass(frozen=True)
class SyntheticCase:
    """Known lognormal truth with a Gaussian log-IM marginal."""

    alpha_star: float = 0.3
    beta_star: float = 0.4
    x_mean: float = math.log(0.3 / 5.0)
    x_var: float = 1.69
    pool_size: int = 20000
    test_size: int = 10000

    @property
    def theta_star(self) -> FragilityParams:
        return FragilityParams(self.alpha_star, self.beta_star)

    @property
    def marginal(self) -> AnalyticGaussian:
        return AnalyticGaussian(self.x_mean, self.x_var)

    def b_exact(self) -> float:
        """Bayes risk ``E[f*(X) (1 - f*(X))]`` by quadrature."""
        m = self.marginal
        val, _ = integrate.quad(lambda t: m.pdf(t) * (lambda f: f * (1.0 - f))(fragility_prob(self.theta_star, t)),
                                m.mean - 12 * m.std, m.mean + 12 * m.std, epsabs=1e-13, epsrel=1e-11, limit=400)
        return float(val)

    def sample(self, size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        x = self.marginal.sample(rng, size=size)
        s = (rng.random(size) < fragility_prob(self.theta_star, x)).astype(float)
        return x, s

    def test_set(self, seed: int) -> tuple[np.ndarray, np.ndarray]:
        return self.sample(self.test_size, np.random.default_rng(np.random.SeedSequence([int(seed), 7919])))


@dataclass(eq=False)
class OscillatorCase:
    """Signal pool with all labels available, plus the IS-AL initial guess.

    ``theta_init`` is the least-squares fit to the linear-surrogate labels over
    the whole pool; ``theta_ref`` is the fit to the true labels over the pool,
    used as the reference parameter and for the Bayes-risk estimate.
    """

    pool: SignalPool
    im: str = "pga"
    bounds: ParamBounds = field(default_factory=ParamBounds)

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.pool.log_im(self.im))
        self.labels = self.pool.labels().astype(float)
        self.marginal = PoolEmpirical(self.x)
        self.theta_init = minimize_regularized_risk(
            WeightedDataset(self.x, self.pool.linear_labels(), 1.0), RegularizerConfig(), self.bounds).theta_hat
        self.theta_ref = minimize_regularized_risk(
            WeightedDataset(self.x, self.labels, 1.0), RegularizerConfig(), self.bounds).theta_hat

    def b_estimate(self) -> float:
        f = fragility_prob(self.theta_ref, self.x)
        return float(np.mean(f * (1.0 - f)))

    def oracle(self, i) -> int:
        return int(self.labels[int(i)])


# --- replications ---------------------------------------------------------------------

@dataclass(frozen=True)
class RunSummary:
    theta: FragilityParams
    train_risk: float
    test_risk: float
    boundary: bool
    converged: bool


@dataclass(eq=False)
class ReplicationResult:
    """One replication: summaries per strategy and size, plus IS-AL inference data."""

    index: int
    seed: int
    beta_reg: dict
    summaries: dict  # strategy -> {n: RunSummary}
    packs: dict  # n -> CovariancePack | None (IS-AL)
    oracle_calls: dict
    max_ratio: float
    isal: IsalTrajectory | None = None
    passive: WeightedDataset | None = None

    def isal_prefix(self, n: int) -> IsalTrajectory:
        return self.isal.prefix(n)


@dataclass(eq=False)
class ReplicationSet:
    strategy_results: list
    base_seed: int
    sizes: tuple

    @property
    def R(self) -> int:
        return len(self.strategy_results)

    def values(self, strategy: str, n: int, attr: str = "test_risk") -> np.ndarray:
        return np.array([getattr(r.summaries[strategy][n], attr) for r in self.strategy_results
                         if strategy in r.summaries and n in r.summaries[strategy]])

    def thetas(self, strategy: str, n: int) -> np.ndarray:
        return np.array([r.summaries[strategy][n].theta.as_array() for r in self.strategy_results
                         if strategy in r.summaries and n in r.summaries[strategy]])


@dataclass
class MetricsTable:
    rows: list

    COLUMNS = ("strategy", "n", "R", "mean_train", "mean_test", "rsd_train", "rsd_test", "rb_train", "rb_test",
               "nu_train", "nu_test", "q10_test", "q90_test")

    def get(self, strategy: str, n: int) -> dict:
        for row in self.rows:
            if row["strategy"] == strategy and row["n"] == n:
                return row
        raise KeyError((strategy, n))

    def to_csv(self) -> str:
        lines = [",".join(self.COLUMNS)]
        for row in self.rows:
            lines.append(",".join(_fmt(row[c]) for c in self.COLUMNS))
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(float(v))
    return str(v)


def metrics_table(reps: ReplicationSet, b: float, strategies: Sequence[str] = STRATEGIES) -> MetricsTable:
    """RSD, RB and efficiency (variance ratio against IS-AL) per strategy and size."""
    rows = []
    for n in reps.sizes:
        ref_tr = reps.values("ISAL", n, "train_risk")
        ref_te = reps.values("ISAL", n, "test_risk")
        for st in strategies:
            tr = reps.values(st, n, "train_risk")
            te = reps.values(st, n, "test_risk")
            if te.size == 0:
                continue
            rows.append({
                "strategy": st, "n": int(n), "R": int(te.size),
                "mean_train": float(tr.mean()), "mean_test": float(te.mean()),
                "rsd_train": rsd(tr), "rsd_test": rsd(te),
                "rb_train": rb(tr, b), "rb_test": rb(te, b),
                "nu_train": efficiency(tr, ref_tr), "nu_test": efficiency(te, ref_te),
                "q10_test": float(np.quantile(te, 0.1)), "q90_test": float(np.quantile(te, 0.9)),
            })
    return MetricsTable(rows)


def _streams(seed: int, k: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(k)]


def _pack_or_none(traj, theta=None):
    try:
        return g_hat(traj, theta)
    except SingularHessian:
        return None


def _passive_summaries(x, s, sizes, cfg, bounds, test_x, test_s, with_mle=True):
    rs, mle = {}, {}
    prev_rs = prev_mle = None
    for k in sizes:
        data = WeightedDataset(x[:k], s[:k], 1.0, "RS")
        fit = minimize_regularized_risk(data, cfg, bounds, prev_rs)
        prev_rs = fit.theta_hat
        rs[k] = RunSummary(fit.theta_hat, fit.risk_value, test_risk(fit.theta_hat, cfg, test_x, test_s),
                           fit.boundary, fit.converged)
        if with_mle:
            mf = mle_fit(WeightedDataset(x[:k], s[:k], 1.0, "MLE"), bounds, prev_mle)
            prev_mle = mf.theta_hat
            mle[k] = RunSummary(mf.theta_hat, risk_objective(data, cfg, mf.theta_hat),
                                test_risk(mf.theta_hat, cfg, test_x, test_s), mf.boundary, mf.converged)
    return rs, mle


def _isal_summaries(traj, sizes, cfg, test_x, test_s, with_packs):
    out, packs = {}, {}
    for k in sizes:
        fit: FitResult = traj.fits[k]
        out[k] = RunSummary(fit.theta_hat, fit.risk_value, test_risk(fit.theta_hat, cfg, test_x, test_s),
                            fit.boundary, fit.converged)
        if with_packs:
            packs[k] = _pack_or_none(traj.prefix(k))
    return out, packs


def synthetic_replication(case: SyntheticCase, r: int, base_seed: int, sizes: Sequence[int], *,
                          epsilon: float = 1e-3, n0: int = 20, grid=DEFAULT_BETA_REG_GRID,
                          bounds: ParamBounds = ParamBounds(), test: tuple | None = None,
                          strategies: Sequence[str] = STRATEGIES, with_packs: bool = True,
                          keep_data: bool = True) -> ReplicationResult:
    """One synthetic replication.

    A fresh pool of ``case.pool_size`` points with Bernoulli labels is drawn
    from the truth.  ``n0`` draws from ``p`` form the shared initial set: it
    sets ``beta_reg`` (leave-one-out), the IS-AL starting point (a plain
    least-squares fit) and the first ``n0`` points of every strategy.
    """
    sizes = tuple(sorted(int(k) for k in sizes))
    seed = replication_seed(base_seed, r)
    pool_rng, init_rng, isal_rng, rs_rng = _streams(seed, 4)
    test_x, test_s = test if test is not None else case.test_set(base_seed)
    pool_x, pool_s = case.sample(case.pool_size, pool_rng)
    marginal = PoolEmpirical(pool_x)
    calls = {}

    init = draw_from_marginal(marginal, n0, init_rng)
    init_x = np.array([d.x for d in init])
    init_s = pool_s[[d.index for d in init]]
    init_data = WeightedDataset(init_x, init_s, 1.0)
    cfg = loo_select_beta_reg(init_data, grid, bounds)
    summaries, packs = {}, {}
    traj = None
    max_ratio = float("nan")
    nmax = sizes[-1]

    if "ISAL" in strategies:
        theta0 = minimize_regularized_risk(init_data, cfg, bounds).theta_hat
        seen = set()

        def oracle(i):
            seen.add(i)
            return pool_s[i]

        traj = isal_run(marginal, oracle, theta0, nmax, n0, epsilon, cfg, isal_rng, bounds=bounds, warmup=init)
        summaries["ISAL"], packs = _isal_summaries(traj, sizes, cfg, test_x, test_s, with_packs)
        max_ratio = float(traj.ratio.max())
        calls["ISAL"] = len(seen)

    passive = None
    if "RS" in strategies or "MLE" in strategies:
        extra = draw_from_marginal(marginal, nmax - n0, rs_rng)
        idx = np.array([d.index for d in init] + [d.index for d in extra])
        px, ps = pool_x[idx], pool_s[idx]
        rs, mle = _passive_summaries(px, ps, sizes, cfg, bounds, test_x, test_s, "MLE" in strategies)
        if "RS" in strategies:
            summaries["RS"] = rs
        if "MLE" in strategies:
            summaries["MLE"] = mle
        calls["RS"] = int(np.unique(idx).size)
        passive = WeightedDataset(px, ps, 1.0, "RS")

    return ReplicationResult(r, seed, {"ISAL": cfg.beta_reg, "RS": cfg.beta_reg}, summaries, packs, calls,
                             max_ratio, traj if keep_data else None, passive if keep_data else None)


def oscillator_replication(case: OscillatorCase, r: int, base_seed: int, sizes: Sequence[int], *,
                           epsilon: float = 1e-3, n0: int = 20, grid=DEFAULT_BETA_REG_GRID,
                           strategies: Sequence[str] = STRATEGIES, with_packs: bool = True,
                           keep_data: bool = True) -> ReplicationResult:
    """One oscillator replication over the shared signal pool.

    IS-AL starts from the linear-surrogate fit, takes ``n0`` warm-up draws
    from the defensive density there and selects ``beta_reg`` on that
    weighted warm-up.  RS and MLE share one uniform sample whose first ``n0``
    points select the RS penalty.  The test set is the whole pool.
    """
    sizes = tuple(sorted(int(k) for k in sizes))
    seed = replication_seed(base_seed, r)
    warm_rng, isal_rng, rs_rng = _streams(seed, 3)
    bounds = case.bounds
    marginal = case.marginal
    summaries, packs, calls, betas = {}, {}, {}, {}
    traj = None
    max_ratio = float("nan")
    nmax = sizes[-1]

    if "ISAL" in strategies:
        dens = defensive_weights(None, case.theta_init, epsilon, marginal)
        warm: list[DrawRecord] = [draw(dens, warm_rng) for _ in range(n0)]
        wdata = WeightedDataset([d.x for d in warm], [case.oracle(d.index) for d in warm],
                                [d.likelihood_ratio for d in warm], "ISAL")
        cfg = loo_select_beta_reg(wdata, grid, bounds)
        seen = set()

        def oracle(i):
            seen.add(i)
            return case.oracle(i)

        traj = isal_run(marginal, oracle, case.theta_init, nmax, n0, epsilon, cfg, isal_rng,
                        bounds=bounds, warmup=warm)
        summaries["ISAL"], packs = _isal_summaries(traj, sizes, cfg, case.x, case.labels, with_packs)
        max_ratio = float(traj.ratio.max())
        calls["ISAL"] = len(seen)
        betas["ISAL"] = cfg.beta_reg

    passive = None
    if "RS" in strategies or "MLE" in strategies:
        idx = np.array([d.index for d in draw_from_marginal(marginal, nmax, rs_rng)])
        px, ps = case.x[idx], case.labels[idx]
        cfg_rs = loo_select_beta_reg(WeightedDataset(px[:n0], ps[:n0], 1.0), grid, bounds)
        rs, mle = _passive_summaries(px, ps, sizes, cfg_rs, bounds, case.x, case.labels, "MLE" in strategies)
        if "RS" in strategies:
            summaries["RS"] = rs
        if "MLE" in strategies:
            summaries["MLE"] = mle
        calls["RS"] = int(np.unique(idx).size)
        betas["RS"] = cfg_rs.beta_reg
        passive = WeightedDataset(px, ps, 1.0, "RS")

    return ReplicationResult(r, seed, betas, summaries, packs, calls, max_ratio,
                             traj if keep_data else None, passive if keep_data else None)
