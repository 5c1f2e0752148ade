"""Study execution and on-disk artifacts.

A study directory holds plain CSV tables plus ``manifest.json``.  Every
table starts with a ``# manifest=...`` comment naming the manifest and the
config digest.  Wall-clock timings are logged, never written, so a rerun of
the same config and seed reproduces the directory byte for byte whatever the
number of worker processes.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .benchlab import (
    BootstrapResult,
    MetricsTable,
    OscillatorCase,
    ReplicationSet,
    SyntheticCase,
    TooManyDegenerate,
    bootstrap_mle_cov,
    cev,
    coverage_probability,
    fragility_ci_from_asymptotics,
    metrics_table,
    nonparametric_reference,
    oscillator_replication,
    synthetic_replication,
)
from .config import StudyConfig
from .dynamics import SignalPool, generate_pool
from .estimators import WeightedDataset
from .inference import SingularHessian, combine_runs, ellipsoid, w_statistic
from .model import FragilityParams

log = logging.getLogger(__name__)

__all__ = [
    "MissingInput",
    "StudyAborted",
    "StudyResult",
    "write_pool",
    "read_pool",
    "build_case",
    "run_replications",
    "run_study",
    "write_study",
    "make_report",
    "STUDY_FILES",
]

STUDY_FILES = ("manifest.json", "config.json", "metrics.csv", "replications.csv", "packs.csv",
               "coverage.csv", "w_series.csv", "trajectories.csv")


class MissingInput(FileNotFoundError):
    """A required input file or directory does not exist."""


class StudyAborted(RuntimeError):
    """Too many replications failed."""


def _f(v) -> str:
    if v is None:
        return "nan"
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "nan" if math.isnan(v) else repr(v)


def _write_csv(path: Path, header: list[str], rows, tag: str) -> None:
    buf = io.StringIO()
    buf.write(f"# manifest=manifest.json {tag}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([x if isinstance(x, str) else _f(x) for x in row])
    path.write_text(buf.getvalue())


def _read_csv(path: Path) -> list[dict]:
    if not path.exists():
        raise MissingInput(str(path))
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


# --- pools ----------------------------------------------------------------------

def write_pool(pool: SignalPool, out: Path, write_signals: bool = False, tag: str = "") -> Path:
    """IM table (``ims.csv``), ``manifest.json`` and optionally one ``.npz`` per signal."""
    from .dynamics import write_accelerogram

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    if write_signals:
        (out / "signals").mkdir(exist_ok=True)
        for i in range(len(pool)):
            rel = f"signals/signal_{i:06d}.npz"
            write_accelerogram(out / rel, pool.signal(i))
            files.append(rel)
    rows = []
    for i in range(len(pool)):
        d = pool.d_nonlinear[i]
        lab = "" if np.isnan(d) else str(int(d > pool.capacity))
        rows.append([str(i), files[i] if files else "", pool.pga[i], pool.sa[i], pool.d_linear[i], d, lab])
    _write_csv(out / "ims.csv", ["index", "file", "pga", "sa", "d_linear", "d_nonlinear", "label"], rows, tag)
    manifest = {
        "kind": "signal-pool",
        "version": __version__,
        "seed": int(pool.seed),
        "n": len(pool),
        "capacity": pool.capacity,
        "sa_freq": pool.sa_freq,
        "sa_zeta": pool.sa_zeta,
        "substeps": pool.substeps,
        "ground_motion": pool.params.to_dict(),
        "oscillator": {k: getattr(pool.spec, k) for k in ("f_L", "zeta", "Y", "a", "mass")},
        "linear_q90": float(np.quantile(pool.d_linear, 0.9)) if len(pool) else None,
        "signals_written": bool(write_signals),
        "tables": ["ims.csv"],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def read_pool(path: Path) -> SignalPool:
    from .dynamics import GroundMotionParams, OscillatorSpec

    path = Path(path)
    man = path / "manifest.json"
    if not man.exists():
        raise MissingInput(f"{man} (run gen-pool first)")
    m = json.loads(man.read_text())
    rows = _read_csv(path / "ims.csv")

    def col(name):
        return np.array([float(r[name]) for r in rows])

    return SignalPool(GroundMotionParams(**m["ground_motion"]), OscillatorSpec(**m["oscillator"]), int(m["seed"]),
                      col("pga"), col("sa"), col("d_linear"), col("d_nonlinear"), float(m["capacity"]),
                      float(m["sa_freq"]), float(m["sa_zeta"]), int(m["substeps"]))


def pool_for_config(cfg: StudyConfig, seed: int, threads: int = 1, labels: bool = True) -> SignalPool:
    return generate_pool(cfg.pool_size, cfg.ground_motion_params, cfg.oscillator_spec, seed,
                         capacity=cfg.capacity, capacity_quantile=cfg.capacity_quantile,
                         sa_freq=cfg.sa_freq, sa_zeta=cfg.sa_zeta, precompute_labels=labels, threads=threads)


# --- replications -----------------------------------------------------------------

def build_case(cfg: StudyConfig, pool: SignalPool | None = None):
    if cfg.case == "synthetic":
        return SyntheticCase(cfg.alpha_star, cfg.beta_star, cfg.x_mean, cfg.x_var, cfg.pool_size, cfg.test_size)
    if pool is None:
        raise MissingInput("oscillator study needs a signal pool")
    if len(pool) == 0:
        raise MissingInput("signal pool is empty")
    return OscillatorCase(pool, cfg.im, cfg.param_bounds)


def isal_label(cfg: StudyConfig, eps: float) -> str:
    return "ISAL" if eps == cfg.epsilons[0] else f"ISAL@{eps!r}"


@dataclass(eq=False)
class RepOutcome:
    """Everything one replication contributes to the study."""

    index: int
    seed: int
    result: object = None  # ReplicationResult of the primary epsilon
    isal: dict = field(default_factory=dict)  # label -> IsalTrajectory
    boots: dict = field(default_factory=dict)  # n -> BootstrapResult | None
    error: str | None = None


def _one_replication(cfg: StudyConfig, case, r: int, test) -> RepOutcome:
    kw = dict(n0=cfg.n0, grid=cfg.beta_reg_grid)
    sizes = cfg.sizes
    out = RepOutcome(r, cfg.seed + r)
    try:
        main = None
        for eps in cfg.epsilons:
            label = isal_label(cfg, eps)
            strategies = ("ISAL", "RS", "MLE") if label == "ISAL" else ("ISAL",)
            if cfg.case == "synthetic":
                res = synthetic_replication(case, r, cfg.seed, sizes, epsilon=eps, bounds=cfg.param_bounds,
                                            test=test, strategies=strategies, **kw)
            else:
                res = oscillator_replication(case, r, cfg.seed, sizes, epsilon=eps, strategies=strategies, **kw)
            if main is None:
                main = res
            else:
                main.summaries[label] = res.summaries["ISAL"]
                main.packs.update({(label, k): v for k, v in res.packs.items()})
                main.oracle_calls[label] = res.oracle_calls["ISAL"]
                main.beta_reg[label] = res.beta_reg["ISAL"]
            out.isal[label] = res.isal
        main.packs = {(k if isinstance(k, tuple) else ("ISAL", k)): v for k, v in main.packs.items()}
        out.result = main
        if cfg.bootstrap_B > 0 and main.passive is not None:
            brng = np.random.default_rng(np.random.SeedSequence([cfg.seed + r, 2]))
            for k in cfg.bootstrap_sizes:
                data = WeightedDataset(main.passive.x[:k], main.passive.s[:k], 1.0, "MLE")
                try:
                    out.boots[k] = bootstrap_mle_cov(data, cfg.bootstrap_B, cfg.param_bounds, brng,
                                                     main.summaries["MLE"][k].theta)
                except TooManyDegenerate:
                    out.boots[k] = None
    except Exception as exc:  # noqa: BLE001 - recorded, counted and excluded
        out.error = f"{type(exc).__name__}: {exc}"
        out.result = None
    return out


_WORKER = {}


def _init_worker(cfg, case, test):
    _WORKER.update(cfg=cfg, case=case, test=test)


def _worker(r):
    return _one_replication(_WORKER["cfg"], _WORKER["case"], r, _WORKER["test"])


def run_replications(cfg: StudyConfig, case, threads: int = 1) -> list[RepOutcome]:
    """Run all replications; order and content are independent of ``threads``."""
    test = case.test_set(cfg.seed) if isinstance(case, SyntheticCase) else None
    idx = range(cfg.R)
    if threads > 1 and cfg.R > 1:
        with ProcessPoolExecutor(max_workers=threads, initializer=_init_worker,
                                 initargs=(cfg, case, test)) as ex:
            return list(ex.map(_worker, idx, chunksize=1))
    return [_one_replication(cfg, case, r, test) for r in idx]


# --- aggregation ----------------------------------------------------------------------

@dataclass(eq=False)
class StudyResult:
    cfg: StudyConfig
    case: object
    outcomes: list
    b: float
    theta_ref: FragilityParams

    @property
    def ok(self) -> list[RepOutcome]:
        return [o for o in self.outcomes if o.error is None]

    @property
    def labels(self) -> list[str]:
        return [isal_label(self.cfg, e) for e in self.cfg.epsilons]

    def replication_set(self) -> ReplicationSet:
        return ReplicationSet([o.result for o in self.ok], self.cfg.seed, self.cfg.sizes)

    def metrics(self) -> MetricsTable:
        return metrics_table(self.replication_set(), self.b, self.labels + ["RS", "MLE"])

    def coverage_rows(self) -> list[list]:
        cfg = self.cfg
        rows = []
        for k in cfg.sizes:
            for label in self.labels:
                packs = [o.result.packs.get((label, k)) for o in self.ok]
                ells = [None if p is None else ellipsoid(p.theta, p, cfg.xi) for p in packs]
                cp = coverage_probability(ells, self.theta_ref)
                cevs = np.array([cev(p) for p in packs])
                rows.append([label, k, cp.cp, cp.se, cp.n_used, cp.n_missing, _nanmedian(cevs)])
                pairs = self._pairs(label)
                ells12 = []
                for a, b in pairs:
                    try:
                        _, _, fac = combine_runs(a.prefix(k), b.prefix(k))
                        ells12.append(fac(cfg.xi))
                    except SingularHessian:
                        ells12.append(None)
                if ells12:
                    cp12 = coverage_probability(ells12, self.theta_ref)
                    rows.append([label + "12", k, cp12.cp, cp12.se, cp12.n_used, cp12.n_missing,
                                 _nanmedian(np.array([np.nan if e is None else e.volume for e in ells12]))])
            if k in cfg.bootstrap_sizes and cfg.bootstrap_B > 0:
                boots = [o.boots.get(k) for o in self.ok]
                ells = []
                for bt in boots:
                    try:
                        ells.append(None if bt is None else bt.ellipsoid(cfg.xi))
                    except SingularHessian:
                        ells.append(None)
                cp = coverage_probability(ells, self.theta_ref)
                cevs = np.array([np.nan if bt is None else cev(bt.cov, k) for bt in boots])
                rows.append(["MLE", k, cp.cp, cp.se, cp.n_used, cp.n_missing, _nanmedian(cevs)])
        return rows

    def _pairs(self, label):
        ok = [o for o in self.ok if o.isal.get(label) is not None]
        return [(ok[2 * j].isal[label], ok[2 * j + 1].isal[label]) for j in range(len(ok) // 2)]

    def w_rows(self) -> list[list]:
        rows = []
        for label in self.labels:
            for j, (a, b) in enumerate(self._pairs(label)):
                for k in self.cfg.sizes:
                    try:
                        v = w_statistic(a.prefix(k), b.prefix(k), xi=self.cfg.w_level)
                        rows.append([label, j, k, v.w_n, v.threshold, v.reject])
                    except SingularHessian:
                        rows.append([label, j, k, float("nan"), float("nan"), ""])
        return rows


def _nanmedian(a) -> float:
    a = np.asarray(a, dtype=float)
    a = a[np.isfinite(a)]
    return float(np.median(a)) if a.size else float("nan")


def run_study(cfg: StudyConfig, threads: int = 1, pool: SignalPool | None = None) -> StudyResult:
    case = build_case(cfg, pool)
    t0 = time.perf_counter()
    outcomes = run_replications(cfg, case, threads)
    log.info("replications finished in %.1f s", time.perf_counter() - t0)
    failed = [o for o in outcomes if o.error is not None]
    for o in failed:
        log.warning("replication %d failed: %s", o.index, o.error)
    if len(failed) > 0.1 * len(outcomes):
        raise StudyAborted(f"{len(failed)} of {len(outcomes)} replications failed; first: {failed[0].error}")
    if isinstance(case, SyntheticCase):
        b, ref = case.b_exact(), case.theta_star
    else:
        b, ref = case.b_estimate(), case.theta_ref
    return StudyResult(cfg, case, outcomes, b, ref)


def write_study(res: StudyResult, out: Path) -> Path:
    """Persist a study; the directory content depends only on (config, seed)."""
    cfg = res.cfg
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    tag = f"config_sha256={cfg.digest()}"
    (out / "config.json").write_text(cfg.to_json())

    table = res.metrics()
    _write_csv(out / "metrics.csv", list(MetricsTable.COLUMNS),
               [[row[c] if isinstance(row[c], str) else row[c] for c in MetricsTable.COLUMNS] for row in table.rows],
               tag)

    reps = []
    for o in res.ok:
        r = o.result
        for st, per_n in r.summaries.items():
            for k, s in per_n.items():
                reps.append([str(o.index), str(o.seed), st, k, s.theta.alpha, s.theta.beta, s.train_risk,
                             s.test_risk, s.boundary, s.converged,
                             r.beta_reg.get(st, r.beta_reg.get("RS", float("nan")))])
    _write_csv(out / "replications.csv", ["rep", "seed", "strategy", "n", "alpha", "beta", "train_risk", "test_risk",
                                          "boundary", "converged", "beta_reg"], reps, tag)

    packs = []
    for o in res.ok:
        for (label, k), p in sorted(o.result.packs.items(), key=lambda kv: (kv[0][0], kv[0][1])):
            if p is None:
                packs.append([str(o.index), label, k] + [float("nan")] * 13)
                continue
            e = ellipsoid(p.theta, p, cfg.xi)
            packs.append([str(o.index), label, k, p.theta.alpha, p.theta.beta,
                          *p.r_ddot_hat[[0, 0, 1], [0, 1, 1]], *p.v_hat[[0, 0, 1], [0, 1, 1]],
                          *p.g_hat[[0, 0, 1], [0, 1, 1]], e.volume, e.contains(res.theta_ref)])
        for k, bt in sorted(o.boots.items()):
            if bt is None:
                packs.append([str(o.index), "MLE-bootstrap", k] + [float("nan")] * 13)
                continue
            try:
                cov_in = bt.ellipsoid(cfg.xi).contains(res.theta_ref)
            except SingularHessian:
                cov_in = float("nan")
            packs.append([str(o.index), "MLE-bootstrap", k, bt.theta_hat.alpha, bt.theta_hat.beta,
                          *([float("nan")] * 6), *bt.cov[[0, 0, 1], [0, 1, 1]], cev(bt.cov, k), cov_in])
    _write_csv(out / "packs.csv", ["rep", "strategy", "n", "alpha", "beta", "h_aa", "h_ab", "h_bb", "v_aa", "v_ab",
                                   "v_bb", "g_aa", "g_ab", "g_bb", "cev", "covers"], packs, tag)

    _write_csv(out / "coverage.csv", ["strategy", "n", "cp", "se", "n_used", "n_missing", "median_cev"],
               res.coverage_rows(), tag)
    _write_csv(out / "w_series.csv", ["strategy", "pair", "n", "w", "threshold", "reject"], res.w_rows(), tag)

    traj = []
    for o in res.ok:
        for label, t in o.isal.items():
            if t is None:
                continue
            for i in range(t.n):
                traj.append([str(o.index), label, i + 1, int(t.index[i]), t.x[i], int(t.s[i]), t.ratio[i],
                             t.theta_at_draw[i, 0], t.theta_at_draw[i, 1]])
    _write_csv(out / "trajectories.csv", ["rep", "strategy", "step", "pool_index", "x", "s", "ratio",
                                          "alpha_at_draw", "beta_at_draw"], traj, tag)

    files = list(STUDY_FILES)
    if isinstance(res.case, OscillatorCase):
        ref = nonparametric_reference(res.case.x, res.case.labels, seed=cfg.seed)
        _write_csv(out / "reference.csv", ["center_log_im", "fraction", "count", "se"],
                   [[c, f, int(n), se] for c, f, n, se in zip(ref.centers, ref.fractions, ref.counts,
                                                               ref.standard_errors)], tag)
        files.append("reference.csv")

    manifest = {
        "kind": "study",
        "version": __version__,
        "config_sha256": cfg.digest(),
        "case": cfg.case,
        "b": res.b,
        "b_source": "analytic" if cfg.case == "synthetic" else "large-pool fit",
        "theta_ref": res.theta_ref.to_dict(),
        "replications": [{"rep": o.index, "seed": o.seed,
                          "oracle_calls": None if o.result is None else o.result.oracle_calls,
                          "error": o.error} for o in res.outcomes],
        "n_failed": sum(o.error is not None for o in res.outcomes),
        "files": sorted(files),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


# --- report ---------------------------------------------------------------------------

def make_report(study_dir: Path, out: Path | None = None) -> Path:
    """Summary text plus per-figure CSV data derived from a study directory."""
    study_dir = Path(study_dir)
    missing = [f for f in STUDY_FILES if not (study_dir / f).exists()]
    if missing:
        raise MissingInput(f"{study_dir}: missing {', '.join(missing)}")
    man = json.loads((study_dir / "manifest.json").read_text())
    cfg = StudyConfig.from_json((study_dir / "config.json").read_text())
    out = Path(out) if out is not None else study_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    tag = f"config_sha256={man['config_sha256']}"

    reps = _read_csv(study_dir / "replications.csv")
    metrics = _read_csv(study_dir / "metrics.csv")
    coverage = _read_csv(study_dir / "coverage.csv")
    wrows = _read_csv(study_dir / "w_series.csv")
    packs = _read_csv(study_dir / "packs.csv")

    groups: dict = {}
    for r in reps:
        groups.setdefault((r["strategy"], int(r["n"])), []).append(r)
    loss, params = [], []
    for (st, k), rs in sorted(groups.items()):
        for kind in ("train_risk", "test_risk"):
            v = np.array([float(r[kind]) for r in rs])
            loss.append([st, k, kind, *np.quantile(v, [0.1, 0.5, 0.9]), v.mean()])
        for p in ("alpha", "beta"):
            v = np.array([float(r[p]) for r in rs])
            params.append([st, k, p, *np.quantile(v, [0.1, 0.5, 0.9])])
    _write_csv(out / "fig_loss_bands.csv", ["strategy", "n", "risk", "q10", "q50", "q90", "mean"], loss, tag)
    _write_csv(out / "fig_param_bands.csv", ["strategy", "n", "param", "q10", "q50", "q90"], params, tag)

    wsum = {}
    for r in wrows:
        if r["w"] != "nan":
            wsum.setdefault((r["strategy"], int(r["n"])), []).append(float(r["w"]))
    wfig = [[st, k, len(v), float(np.median(v)), float(np.quantile(v, 0.9)),
             float(np.mean(np.array(v) > -2.0 * math.log(cfg.w_level)))] for (st, k), v in sorted(wsum.items())]
    _write_csv(out / "fig_w_series.csv", ["strategy", "n", "pairs", "median_w", "q90_w", "rejection_rate"], wfig, tag)

    _write_csv(out / "fig_cp.csv", ["strategy", "n", "cp", "se"],
               [[c["strategy"], c["n"], c["cp"], c["se"]] for c in coverage], tag)
    _write_csv(out / "fig_cev.csv", ["strategy", "n", "median_cev"],
               [[c["strategy"], c["n"], c["median_cev"]] for c in coverage], tag)

    # fragility band of the first replication's IS-AL estimate at the largest size
    nmax = max(cfg.sizes)
    first = [p for p in packs if p["strategy"] == "ISAL" and int(p["n"]) == nmax and p["g_aa"] != "nan"]
    if cfg.case == "synthetic":
        lo_x, hi_x = cfg.x_mean - 3 * math.sqrt(cfg.x_var), cfg.x_mean + 3 * math.sqrt(cfg.x_var)
    else:
        ref_rows = _read_csv(study_dir / "reference.csv")
        c = [float(r["center_log_im"]) for r in ref_rows]
        lo_x, hi_x = min(c), max(c)
    grid = np.linspace(lo_x, hi_x, 61)
    band_rows = []
    if first:
        p = first[0]
        g = np.array([[float(p["g_aa"]), float(p["g_ab"])], [float(p["g_ab"]), float(p["g_bb"])]])
        th = FragilityParams(float(p["alpha"]), float(p["beta"]))
        point, lo, hi = fragility_ci_from_asymptotics(th, g, nmax, grid, bounds=cfg.param_bounds,
                                                      rng=np.random.default_rng(cfg.seed))
        truth = (FragilityParams(cfg.alpha_star, cfg.beta_star) if cfg.case == "synthetic"
                 else FragilityParams.from_dict(man["theta_ref"]))
        from .model import fragility_prob

        ref = fragility_prob(truth, grid)
        band_rows = [[x, y, a, b_, r] for x, y, a, b_, r in zip(grid, point, lo, hi, ref)]
    _write_csv(out / "fig_fragility_ci.csv", ["log_im", "point", "lower", "upper", "reference"], band_rows, tag)

    lines = [f"study: {cfg.name} ({cfg.case}), R = {cfg.R}, sizes = {list(cfg.sizes)}, "
             f"epsilons = {list(cfg.epsilons)}, seed = {cfg.seed}",
             f"b = {man['b']:.4f} ({man['b_source']})",
             f"reference theta: alpha = {man['theta_ref']['alpha']:.4f}, beta = {man['theta_ref']['beta']:.4f}",
             f"failed replications: {man['n_failed']}", "",
             "metrics (test risk):",
             f"{'strategy':<14}{'n':>5}{'mean':>10}{'RSD%':>8}{'RB%':>8}{'nu':>8}"]
    for m in metrics:
        lines.append(f"{m['strategy']:<14}{int(m['n']):>5}{float(m['mean_test']):>10.5f}"
                     f"{100 * float(m['rsd_test']):>8.2f}{100 * float(m['rb_test']):>8.2f}{float(m['nu_test']):>8.2f}")
    lines += ["", "coverage (xi = %g):" % cfg.xi]
    for c in coverage:
        lines.append(f"{c['strategy']:<14}{int(c['n']):>5}  CP = {float(c['cp']):.3f} +/- {float(c['se']):.3f}"
                     f"  median CEV = {float(c['median_cev']):.3e}")
    if wfig:
        lines += ["", f"convergence statistic (reject above {-2.0 * math.log(cfg.w_level):.3f}):"]
        for st, k, npairs, med, q90, rate in wfig:
            lines.append(f"{st:<14}{k:>5}  pairs = {npairs}  median W = {med:.3f}  rejection rate = {rate:.3f}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    return out
