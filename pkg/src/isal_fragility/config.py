"""Study configuration: a validated, JSON-serialisable description of one experiment."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .dynamics import DEFAULT_GROUND_MOTION, GroundMotionParams, OscillatorSpec
from .estimators import DEFAULT_BETA_REG_GRID
from .model import ParamBounds

__all__ = ["ConfigError", "StudyConfig", "PRESETS", "load_config", "preset"]


class ConfigError(ValueError):
    """Invalid or unreadable study configuration."""


@dataclass(frozen=True)
class StudyConfig:
    name: str = "custom"
    case: str = "synthetic"
    im: str = "pga"
    sa_freq: float = 5.0
    sa_zeta: float = 0.02
    sizes: tuple = (120,)
    n0: int = 20
    R: int = 200
    epsilons: tuple = (1e-3,)
    beta_reg_grid: tuple = DEFAULT_BETA_REG_GRID
    xi: float = 0.9
    w_level: float = 0.1
    bounds: dict = field(default_factory=lambda: ParamBounds().to_dict())
    seed: int = 0
    pool_size: int = 20000
    test_size: int = 10000
    bootstrap_B: int = 200
    bootstrap_sizes: tuple = ()
    # synthetic truth
    alpha_star: float = 0.3
    beta_star: float = 0.4
    x_mean: float = math.log(0.3 / 5.0)
    x_var: float = 1.69
    # oscillator
    oscillator: dict = field(default_factory=lambda: dataclasses.asdict(OscillatorSpec()))
    ground_motion: dict = field(default_factory=lambda: DEFAULT_GROUND_MOTION.to_dict())
    capacity: float | None = None
    capacity_quantile: float | None = None

    def __post_init__(self):
        for name in ("sizes", "epsilons", "beta_reg_grid", "bootstrap_sizes"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "sizes", tuple(sorted(int(k) for k in self.sizes)))
        object.__setattr__(self, "bootstrap_sizes", tuple(sorted(int(k) for k in self.bootstrap_sizes)))
        self.validate()

    # ------------------------------------------------------------------
    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.case in ("synthetic", "oscillator"), f"case must be 'synthetic' or 'oscillator', got {self.case!r}")
        need(self.im in ("pga", "sa"), f"im must be 'pga' or 'sa', got {self.im!r}")
        need(self.sa_freq > 0 and 0 < self.sa_zeta < 1, "need sa_freq > 0 and 0 < sa_zeta < 1")
        need(len(self.sizes) > 0, "sizes must be nonempty")
        need(self.n0 >= 1, "n0 must be at least 1")
        need(all(k >= self.n0 for k in self.sizes), f"every size must be >= n0 = {self.n0}")
        need(self.n0 >= 3, "n0 must be at least 3 for leave-one-out selection")
        need(self.R >= 1, "R must be at least 1")
        need(len(self.epsilons) > 0, "epsilons must be nonempty")
        need(all(0 < e <= 1 for e in self.epsilons), "every epsilon must lie in (0, 1]")
        need(len(set(self.epsilons)) == len(self.epsilons), "epsilons must be distinct")
        need(len(self.beta_reg_grid) > 0 and all(g >= 0 for g in self.beta_reg_grid),
             "beta_reg_grid must be nonempty and nonnegative")
        need(0 < self.xi < 1, "xi must lie in (0, 1)")
        need(0 < self.w_level < 1, "w_level must lie in (0, 1)")
        need(self.pool_size >= 0 and self.test_size >= 1, "pool_size >= 0 and test_size >= 1 required")
        need(self.bootstrap_B >= 0, "bootstrap_B must be nonnegative")
        need(set(self.bootstrap_sizes) <= set(self.sizes), "bootstrap_sizes must be a subset of sizes")
        need(self.alpha_star > 0 and self.beta_star > 0 and self.x_var > 0, "synthetic truth must be positive")
        if self.capacity is not None:
            need(self.capacity > 0, "capacity must be positive")
        if self.capacity_quantile is not None:
            need(0 < self.capacity_quantile < 1, "capacity_quantile must lie in (0, 1)")
        try:
            b = self.param_bounds
            need(b.alpha_lo < self.alpha_star < b.alpha_hi, "alpha_star outside bounds")
            need(b.beta_lo < self.beta_star < b.beta_hi, "beta_star outside bounds")
            self.oscillator_spec
            self.ground_motion_params
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    @property
    def n(self) -> int:
        return self.sizes[-1]

    @property
    def param_bounds(self) -> ParamBounds:
        return ParamBounds.from_dict(self.bounds)

    @property
    def oscillator_spec(self) -> OscillatorSpec:
        return OscillatorSpec(**self.oscillator)

    @property
    def ground_motion_params(self) -> GroundMotionParams:
        return GroundMotionParams(**self.ground_motion)

    # ------------------------------------------------------------------
    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StudyConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "StudyConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def replace(self, **changes) -> "StudyConfig":
        return dataclasses.replace(self, **changes)


PRESETS = {
    "synthetic-paper": StudyConfig(
        name="synthetic-paper", case="synthetic", sizes=(40, 60, 80, 100, 120), n0=20, R=200,
        epsilons=(1e-3,), pool_size=20000, test_size=10000, bootstrap_sizes=(120,)),
    "oscillator-paper": StudyConfig(
        name="oscillator-paper", case="oscillator", im="pga", sizes=(100, 120, 200, 300, 400, 500), n0=20,
        R=50, epsilons=(1e-3,), pool_size=10000, test_size=10000, bootstrap_sizes=(100, 120, 200, 300, 400, 500),
        capacity=2 * OscillatorSpec().Y),
    "oscillator-eps-sweep": StudyConfig(
        name="oscillator-eps-sweep", case="oscillator", im="pga", sizes=(100, 200, 300, 400, 500), n0=20,
        R=50, epsilons=(1e-1, 1e-2, 1e-3), pool_size=10000, test_size=10000, bootstrap_sizes=(),
        capacity=2 * OscillatorSpec().Y),
}


def preset(name: str) -> StudyConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}") from None


def load_config(spec: str | Path) -> StudyConfig:
    """A preset name, or the path of a JSON file (which may name a ``preset`` to extend)."""
    if isinstance(spec, str) and spec in PRESETS:
        return PRESETS[spec]
    path = Path(spec)
    if not path.exists():
        raise ConfigError(f"config {str(spec)!r} is neither a preset nor an existing file")
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    base = d.pop("preset", None)
    if base is not None:
        merged = preset(base).to_dict()
        merged.update(d)
        d = merged
    return StudyConfig.from_dict(d)
