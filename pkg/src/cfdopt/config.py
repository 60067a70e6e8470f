"""Run configuration: every tunable with its default, loaded from JSON."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass


class ConfigError(ValueError):
    pass


@dataclass
class ProfileConfig:
    max_segments: int = 9
    min_segment_len: float = 10.0
    bin: float = 1.0
    kde_threshold: float = 0.10
    sse_gain_threshold: float = 0.01


@dataclass
class PSOConfig:
    swarm: int = 120
    patience: int = 50
    max_iter: int = 500
    inertia: float = 0.729
    c1: float = 1.49445
    c2: float = 1.49445
    v_clamp: float = 0.5
    tol: float = 1e-6

    def __post_init__(self):
        if self.swarm < 2:
            raise ConfigError("pso.swarm must be >= 2")
        if self.patience < 1:
            raise ConfigError("pso.patience must be >= 1")


@dataclass
class LostTime:
    startup: float = 3.0
    unused_yellow: float = 1.0


@dataclass
class QueueRule:
    stop_speed: float = 2.0
    min_stop_duration: float = 2.0


@dataclass
class InitialPlan:
    """Greens of the plan in force while trajectories were collected."""

    C: float = 100.0
    dphi: float = 0.0
    greens: list = field(default_factory=lambda: [15.0, 25.0, 15.0, 25.0, 15.0, 25.0, 15.0, 25.0])


@dataclass
class RunConfig:
    d0: float = 7.0
    g_min: float = 5.0
    y: float = 3.0
    r_a: float = 2.0
    C_min: float = 40.0
    C_max: float = 160.0
    delta: float = 1e4
    lanes: dict = field(default_factory=lambda: {k: 1 for k in range(1, 9)})
    redistribution_weight: float = 0.5
    a3_variant: str = "corrected"
    profile: ProfileConfig = field(default_factory=ProfileConfig)
    pso: PSOConfig = field(default_factory=PSOConfig)
    lost_time: LostTime = field(default_factory=LostTime)
    queue_rule: QueueRule = field(default_factory=QueueRule)
    initial_plan: InitialPlan = field(default_factory=InitialPlan)
    coarse_step: float = 5.0
    refine_radius: float = 4.0

    def __post_init__(self):
        self.lanes = {int(k): int(v) for k, v in self.lanes.items()}
        if self.d0 <= 0:
            raise ConfigError("d0 must be positive")
        if self.g_min < 0:
            raise ConfigError("g_min must be non-negative")
        if self.C_min > self.C_max:
            raise ConfigError("C_min exceeds C_max")
        if self.a3_variant not in ("printed", "corrected"):
            raise ConfigError("a3_variant must be 'printed' or 'corrected'")
        if any(z < 1 for z in self.lanes.values()):
            raise ConfigError("lane counts must be >= 1")

    @property
    def min_feasible_cycle(self) -> float:
        return 4 * (self.y + self.r_a) + 4 * self.g_min

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "")

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lanes"] = {str(k): v for k, v in self.lanes.items()}
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _build(cls, d, prefix):
    if not isinstance(d, dict):
        raise ConfigError(f"{prefix or 'config'} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(prefix + k for k in unknown))}")
    kwargs = {}
    for name, value in d.items():
        default = known[name].default_factory() if callable(known[name].default_factory) else None
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{prefix}{name}.")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
