"""Synthetic ground motions and the elasto-plastic single-degree-of-freedom oscillator.

Signals are envelope-modulated, band-pass filtered white noise with a fixed
(stationary) filter.  Structures are integrated with the average-acceleration
Newmark scheme; the bilinear kinematic-hardening force uses an elastic
predictor / plastic corrector return mapping inside a Newton loop.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

__all__ = [
    "Accelerogram",
    "OscillatorSpec",
    "SimOutcome",
    "GroundMotionParams",
    "DEFAULT_GROUND_MOTION",
    "DEFAULT_SUBSTEPS",
    "Instability",
    "generate_signal",
    "pga",
    "spectral_accel",
    "simulate_linear",
    "simulate_nonlinear",
    "integrate_response",
    "restoring_force_path",
    "capacity_from_quantile",
    "read_accelerogram",
    "write_accelerogram",
    "SignalPool",
    "generate_pool",
]

DEFAULT_SUBSTEPS = 8


class Instability(RuntimeError):
    """Displacement grew beyond the divergence guard."""


@dataclass(frozen=True, eq=False)
class Accelerogram:
    samples: np.ndarray
    dt: float

    def __post_init__(self):
        s = np.ascontiguousarray(self.samples, dtype=float)
        if s.ndim != 1 or s.size == 0:
            raise ValueError("samples must be a nonempty 1-D array")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not np.all(np.isfinite(s)):
            raise ValueError("samples must be finite")
        object.__setattr__(self, "samples", s)

    @property
    def duration(self) -> float:
        return self.dt * (self.samples.size - 1)

    @property
    def time(self) -> np.ndarray:
        return self.dt * np.arange(self.samples.size)

    def scaled(self, c: float) -> "Accelerogram":
        return Accelerogram(c * self.samples, self.dt)


@dataclass(frozen=True)
class OscillatorSpec:
    """Unit-mass bilinear oscillator; defaults are the 5 Hz / 2 % test structure."""

    f_L: float = 5.0
    zeta: float = 0.02
    Y: float = 5e-3
    a: float = 0.2
    mass: float = 1.0

    def __post_init__(self):
        if not self.f_L > 0:
            raise ValueError("f_L must be positive")
        if not 0 < self.zeta < 1:
            raise ValueError("zeta must lie in (0, 1)")
        if not self.Y > 0:
            raise ValueError("Y must be positive")
        if not 0 <= self.a <= 1:
            raise ValueError("a must lie in [0, 1]")
        if self.mass != 1.0:
            raise ValueError("only unit mass is supported")

    @property
    def omega(self) -> float:
        return 2.0 * math.pi * self.f_L

    @property
    def stiffness(self) -> float:
        return self.omega ** 2


@dataclass
class SimOutcome:
    D: float
    failure: int
    im_values: dict = field(default_factory=dict)
    dissipation: float = 0.0


@dataclass(frozen=True)
class GroundMotionParams:
    """Modulated filtered white-noise generator settings.

    ``scale`` is the RMS of the signal at the envelope peak; per-signal
    amplitude and filter-frequency variability are lognormal with the
    given log-standard deviations (0 gives a fixed-parameter process).
    """

    dt: float = 0.005
    duration: float = 20.0
    peak_time: float = 4.0
    envelope_shape: float = 2.0
    filter_freq: float = 5.0
    filter_damping: float = 0.6
    highpass_freq: float = 0.2
    scale: float = 1.0
    scale_log_std: float = 0.0
    freq_log_std: float = 0.0

    def __post_init__(self):
        for name in ("dt", "duration", "peak_time", "envelope_shape", "filter_freq",
                     "filter_damping", "highpass_freq"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.scale < 0 or self.scale_log_std < 0 or self.freq_log_std < 0:
            raise ValueError("scale and dispersions must be nonnegative")
        if self.peak_time >= self.duration:
            raise ValueError("peak_time must fall inside the record")

    @property
    def n_samples(self) -> int:
        return int(round(self.duration / self.dt)) + 1

    def envelope(self) -> np.ndarray:
        t = self.dt * np.arange(self.n_samples)
        r = t / self.peak_time
        with np.errstate(divide="ignore"):
            env = np.exp(self.envelope_shape * (np.log(np.where(r > 0, r, 1.0)) + 1.0 - r))
        env[0] = 0.0
        return env

    def to_dict(self) -> dict:
        return asdict(self)


# Default generator for the reference oscillator: amplitude scale tuned once so the 90 % quantile of
# the linear peak displacement sits near 2Y = 0.01 m (checked in the tests).
DEFAULT_GROUND_MOTION = GroundMotionParams(scale=0.53, scale_log_std=0.55, freq_log_std=0.35)


def _transfer(freqs: np.ndarray, f_f: float, zeta_f: float, f_hp: float) -> np.ndarray:
    r = freqs / f_f
    h = 1.0 / (1.0 - r * r + 2j * zeta_f * r)
    q = (freqs / f_hp) ** 2
    return h * q / np.sqrt(1.0 + q * q)


def generate_signal(params: GroundMotionParams, rng: np.random.Generator) -> Accelerogram:
    """One accelerogram: filtered noise normalised to unit variance, times the envelope."""
    n = params.n_samples
    amp = params.scale
    f_f = params.filter_freq
    if params.scale_log_std > 0:
        amp *= math.exp(params.scale_log_std * rng.standard_normal())
    if params.freq_log_std > 0:
        f_f *= math.exp(params.freq_log_std * rng.standard_normal())
    noise = rng.standard_normal(n)
    freqs = np.fft.rfftfreq(n, params.dt)
    H = _transfer(freqs, f_f, params.filter_damping, params.highpass_freq)
    # circular filtering keeps the process exactly stationary; the
    # normaliser is its per-sample variance (1/n) sum over the full spectrum
    power = np.abs(H) ** 2
    full = power[0] + 2.0 * power[1:].sum() - (power[-1] if n % 2 == 0 else 0.0)
    y = np.fft.irfft(H * np.fft.rfft(noise), n) / math.sqrt(full / n)
    s = amp * params.envelope() * y
    if amp > 0:
        s -= s.mean()
    return Accelerogram(s, params.dt)


def pga(acc: Accelerogram) -> float:
    return float(np.max(np.abs(acc.samples)))


@njit(cache=True)
def _restoring(z, zp, chi, k, H, fy, linear):
    """Return-mapped force, tangent and updated (zp, chi) at trial displacement z."""
    f_tr = k * (z - zp)
    if linear:
        return f_tr, k, zp, chi
    xi = f_tr - chi
    if abs(xi) <= fy:
        return f_tr, k, zp, chi
    sgn = 1.0 if xi > 0 else -1.0
    dg = (abs(xi) - fy) / (k + H)
    return f_tr - k * dg * sgn, k * H / (k + H), zp + dg * sgn, chi + H * dg * sgn


@njit(cache=True)
def _newmark(s, dt, omega, zeta, Y, a, linear, substeps, z0, v0, guard, record):
    """Average-acceleration Newmark on a unit-mass bilinear oscillator.

    Returns (peak |z|, total plastic dissipation, diverged flag, z history,
    cumulative dissipation history); histories are empty unless ``record``.
    """
    k = omega * omega
    c = 2.0 * zeta * omega
    lin = linear or a >= 1.0
    H = 0.0 if lin else (k * a / (1.0 - a) if a > 0.0 else 0.0)
    fy = k * Y
    h = dt / substeps
    c0 = 4.0 / (h * h)
    c1 = 4.0 / h
    c2 = 2.0 / h
    n = s.shape[0]
    nsteps = (n - 1) * substeps
    zh = np.zeros(nsteps + 1 if record else 0)
    eh = np.zeros(nsteps + 1 if record else 0)
    z = z0
    v = v0
    zp = 0.0
    chi = 0.0
    f, kt, zp, chi = _restoring(z, zp, chi, k, H, fy, lin)
    acc = -s[0] - c * v - f
    peak = abs(z)
    diss = 0.0
    if record:
        zh[0] = z
    step = 0
    for i in range(n - 1):
        for j in range(substeps):
            step += 1
            ext = s[i] + (s[i + 1] - s[i]) * (j + 1) / substeps
            rhs_const = c0 * z + c1 * v + acc + c * (c2 * z + v) - ext
            if lin:
                zn = rhs_const / (c0 + c * c2 + k)
                fn = k * zn
                zpn = zp
                chin = chi
            else:
                zn = z
                fn = 0.0
                zpn = zp
                chin = chi
                tol = 1e-12 * (fy + abs(ext) + abs(rhs_const) * h * h)
                for _ in range(50):
                    fn, kt, zpn, chin = _restoring(zn, zp, chi, k, H, fy, False)
                    res = (c0 + c * c2) * zn + fn - rhs_const
                    if abs(res) <= tol:
                        break
                    zn -= res / (c0 + c * c2 + kt)
                diss += (fn - chin) * (zpn - zp)
            an = c0 * (zn - z) - c1 * v - acc
            v = c2 * (zn - z) - v
            acc = an
            z = zn
            zp = zpn
            chi = chin
            az = abs(z)
            if az > peak:
                peak = az
            if record:
                zh[step] = z
                eh[step] = diss
            if az > guard:
                return peak, diss, True, zh, eh
    return peak, diss, False, zh, eh


def integrate_response(acc: Accelerogram, spec: OscillatorSpec, *, linear: bool = False,
                       substeps: int = DEFAULT_SUBSTEPS, z0: float = 0.0, v0: float = 0.0,
                       record: bool = False):
    """Run the integrator; returns ``(D, dissipation, z_history, dissipation_history)``.

    Raises :class:`Instability` when ``|z|`` exceeds ``1000 Y``.
    """
    if acc.dt / substeps > 1.0 / (20.0 * spec.f_L):
        raise ValueError("time step too coarse for the oscillator frequency (need dt <= 1/(20 f_L))")
    peak, diss, diverged, zh, eh = _newmark(acc.samples, acc.dt, spec.omega, spec.zeta, spec.Y, spec.a,
                                            linear, int(substeps), float(z0), float(v0), 1e3 * spec.Y, record)
    if diverged:
        raise Instability(f"|z| exceeded {1e3 * spec.Y:g} m")
    return peak, diss, zh, eh


def restoring_force_path(spec: OscillatorSpec, z_path, *, linear: bool = False) -> np.ndarray:
    """Restoring force (per unit mass) along a quasi-static displacement path."""
    k = spec.stiffness
    lin = linear or spec.a >= 1.0
    H = 0.0 if lin else spec.a * k / (1.0 - spec.a)
    zp = chi = 0.0
    out = np.empty(len(z_path))
    for i, z in enumerate(np.asarray(z_path, dtype=float)):
        out[i], _, zp, chi = _restoring(float(z), zp, chi, k, H, k * spec.Y, lin)
    return out


def _outcome(acc, spec, linear, capacity, substeps):
    D, diss, _, _ = integrate_response(acc, spec, linear=linear, substeps=substeps)
    C = 2.0 * spec.Y if capacity is None else capacity
    return SimOutcome(D, int(D > C), {"pga": pga(acc)}, diss)


def simulate_nonlinear(acc: Accelerogram, spec: OscillatorSpec = OscillatorSpec(),
                       capacity: float | None = None, substeps: int = DEFAULT_SUBSTEPS) -> SimOutcome:
    """Peak displacement and failure label (``D > C``, default ``C = 2Y``)."""
    return _outcome(acc, spec, False, capacity, substeps)


def simulate_linear(acc: Accelerogram, spec: OscillatorSpec = OscillatorSpec(),
                    capacity: float | None = None, substeps: int = DEFAULT_SUBSTEPS) -> SimOutcome:
    """Same as :func:`simulate_nonlinear` with the restoring force kept elastic."""
    return _outcome(acc, spec, True, capacity, substeps)


def spectral_accel(acc: Accelerogram, f: float = 5.0, zeta: float = 0.02,
                   substeps: int = DEFAULT_SUBSTEPS) -> float:
    """Pseudo-spectral acceleration ``omega**2 * max|z|`` of a linear oscillator."""
    if not f > 0 or not 0 < zeta < 1:
        raise ValueError("need f > 0 and 0 < zeta < 1")
    spec = OscillatorSpec(f_L=f, zeta=zeta, Y=1.0, a=1.0)
    # resolution guard: refine internally rather than reject high frequencies
    substeps = max(substeps, int(math.ceil(acc.dt * 20.0 * f)))
    D, _, _, _ = integrate_response(acc, spec, linear=True, substeps=substeps)
    return spec.omega ** 2 * D


def capacity_from_quantile(displacements, q: float = 0.9, override: float | None = None) -> float:
    """Empirical (type 7) quantile of linear peak displacements, or ``override``."""
    if override is not None:
        return float(override)
    d = np.asarray(displacements, dtype=float)
    if d.size == 0:
        raise ValueError("empty displacement pool")
    return float(np.quantile(d, q, method="linear"))


# --- accelerogram files ------------------------------------------------------

def write_accelerogram(path, acc: Accelerogram) -> Path:
    """Write ``(t, s)`` columns; ``.npz`` gives a binary file, anything else text."""
    path = Path(path)
    if path.suffix == ".npz":
        np.savez(path, samples=acc.samples, dt=np.float64(acc.dt))
    else:
        data = np.column_stack([acc.time, acc.samples])
        np.savetxt(path, data, fmt="%.17g", header=f"dt = {acc.dt!r}\nt s", comments="# ")
    return path


def read_accelerogram(path) -> Accelerogram:
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path) as z:
            return Accelerogram(z["samples"], float(z["dt"]))
    dt = None
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            body = line.lstrip("#").strip()
            if body.startswith("dt"):
                dt = float(body.split("=", 1)[1])
    if dt is None:
        raise ValueError(f"{path}: missing 'dt = ...' header")
    data = np.loadtxt(path, comments="#", ndmin=2)
    return Accelerogram(data[:, 1], dt)


# --- signal pools ------------------------------------------------------------

@dataclass(eq=False)
class SignalPool:
    """Seeded pool of synthetic accelerograms with precomputed IMs.

    Signal ``i`` is regenerated on demand from ``(seed, i)``.  Nonlinear peak
    displacements are filled lazily by :meth:`label` unless precomputed.
    """

    params: GroundMotionParams
    spec: OscillatorSpec
    seed: int
    pga: np.ndarray
    sa: np.ndarray
    d_linear: np.ndarray
    d_nonlinear: np.ndarray
    capacity: float
    sa_freq: float = 5.0
    sa_zeta: float = 0.02
    substeps: int = DEFAULT_SUBSTEPS
    n_simulations: int = 0

    def __len__(self) -> int:
        return self.pga.size

    def signal(self, i: int) -> Accelerogram:
        return generate_signal(self.params, np.random.default_rng(np.random.SeedSequence([self.seed, int(i)])))

    def im(self, name: str) -> np.ndarray:
        name = name.lower()
        if name == "pga":
            return self.pga
        if name in ("sa", "psa"):
            return self.sa
        raise ValueError(f"unknown intensity measure {name!r}")

    def log_im(self, name: str) -> np.ndarray:
        return np.log(self.im(name))

    def displacement(self, i: int) -> float:
        if np.isnan(self.d_nonlinear[i]):
            out = simulate_nonlinear(self.signal(i), self.spec, self.capacity, self.substeps)
            self.d_nonlinear[i] = out.D
            self.n_simulations += 1
        return float(self.d_nonlinear[i])

    def label(self, i: int) -> int:
        return int(self.displacement(i) > self.capacity)

    def labels(self) -> np.ndarray:
        """Labels for the whole pool (simulating what is missing)."""
        for i in np.flatnonzero(np.isnan(self.d_nonlinear)):
            self.displacement(int(i))
        return (self.d_nonlinear > self.capacity).astype(int)

    def linear_labels(self) -> np.ndarray:
        return (self.d_linear > self.capacity).astype(int)

    def subset(self, idx) -> "SignalPool":
        """View on a subset of signals (keeps the original seeds)."""
        idx = np.asarray(idx)
        sub = _IndexedPool(self.params, self.spec, self.seed, self.pga[idx], self.sa[idx],
                           self.d_linear[idx], self.d_nonlinear[idx].copy(), self.capacity,
                           self.sa_freq, self.sa_zeta, self.substeps)
        sub.source_index = idx
        return sub


@dataclass(eq=False)
class _IndexedPool(SignalPool):
    source_index: np.ndarray = None

    def signal(self, i: int) -> Accelerogram:
        return super().signal(int(self.source_index[i]))


def _pool_chunk(params, spec, seed, start, stop, sa_freq, sa_zeta, substeps, labels):
    k = stop - start
    out = np.full((4, k), np.nan)
    for j in range(k):
        acc = generate_signal(params, np.random.default_rng(np.random.SeedSequence([seed, start + j])))
        out[0, j] = pga(acc)
        out[1, j] = spectral_accel(acc, sa_freq, sa_zeta, substeps)
        out[2, j] = integrate_response(acc, spec, linear=True, substeps=substeps)[0]
        if labels:
            out[3, j] = integrate_response(acc, spec, linear=False, substeps=substeps)[0]
    return out


def generate_pool(n: int, params: GroundMotionParams = DEFAULT_GROUND_MOTION,
                  spec: OscillatorSpec = OscillatorSpec(), seed: int = 0, *,
                  capacity: float | None = None, capacity_quantile: float | None = None,
                  sa_freq: float = 5.0, sa_zeta: float = 0.02, substeps: int = DEFAULT_SUBSTEPS,
                  precompute_labels: bool = False, threads: int = 1) -> SignalPool:
    """Generate ``n`` signals and their PGA, SA and linear peak displacement.

    The failure threshold is ``capacity`` if given, else the
    ``capacity_quantile`` of the linear displacements if given, else ``2Y``.
    Signal ``i`` depends only on ``(seed, i)``, so ``threads`` (worker
    processes) does not change the result.
    """
    if n < 0:
        raise ValueError("pool size must be nonnegative")
    chunk = 250
    bounds = [(a, min(a + chunk, n)) for a in range(0, n, chunk)]
    args = (params, spec, seed)
    tail = (sa_freq, sa_zeta, substeps, precompute_labels)
    if threads > 1 and len(bounds) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=threads) as ex:
            futs = [ex.submit(_pool_chunk, *args, a, b, *tail) for a, b in bounds]
            parts = [f.result() for f in futs]
    else:
        parts = [_pool_chunk(*args, a, b, *tail) for a, b in bounds]
    data = np.concatenate(parts, axis=1) if parts else np.zeros((4, 0))
    pgas, sas, dlin, dnl = (np.ascontiguousarray(row) for row in data)
    if capacity is None:
        capacity = (capacity_from_quantile(dlin, capacity_quantile) if capacity_quantile is not None
                    else 2.0 * spec.Y)
    pool = SignalPool(params, spec, seed, pgas, sas, dlin, dnl, float(capacity), sa_freq, sa_zeta, substeps)
    if precompute_labels:
        pool.n_simulations = n
    return pool
