"""Dual-ring fixed-time plan search.

The upper level enumerates cycle length (and optionally the reference
shift); the lower level runs a particle swarm over a five-dimensional
split vector that always decodes to a feasible dual-ring plan.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .arrival_profile import ArrivalProfile, ArrivalProfileEstimator
from .cfd import (
    ArrivalExceedsJamCapacity,
    DischargeFit,
    StackedWaves,
    WaveProfile,
    build_wave_profile,
    performance_arrays,
)
from .config import PSOConfig, RunConfig

logger = logging.getLogger(__name__)

RING1 = (1, 2, 3, 4)
RING2 = (5, 6, 7, 8)
PHASES = RING1 + RING2


class CycleInfeasible(ValueError):
    pass


class NoFeasibleCycle(RuntimeError):
    pass


@dataclass
class DualRingPlan:
    C: float
    dphi: float
    g_s: np.ndarray  # indexed by phase - 1
    g_e: np.ndarray
    y: float = 3.0
    r_a: float = 2.0

    @property
    def greens(self) -> np.ndarray:
        return self.g_e - self.g_s

    def check(self, g_min=0.0, C_min=-math.inf, C_max=math.inf, tol=1e-9) -> list[str]:
        """Names of violated structural constraints (empty when feasible)."""
        bad = []
        g = self.greens
        ring_green = self.C - 4 * (self.y + self.r_a)
        if abs(g[:4].sum() - ring_green) > tol or abs(g[4:].sum() - ring_green) > tol:
            bad.append("ring_total")
        if abs(g[0] + g[1] - g[4] - g[5]) > tol:
            bad.append("barrier")
        for k in (1, 2, 3, 5, 6, 7):
            if abs(self.g_e[k - 1] + self.y + self.r_a - self.g_s[k]) > tol:
                bad.append(f"sequence_{k}")
        if np.any(g < g_min - tol):
            bad.append("min_green")
        if not C_min - tol <= self.C <= C_max + tol:
            bad.append("cycle_bounds")
        if not 0 <= self.dphi < self.C:
            bad.append("reference_shift")
        return bad

    def to_dict(self) -> dict:
        return {
            "C": float(self.C),
            "dphi": float(self.dphi),
            "y": float(self.y),
            "r_a": float(self.r_a),
            "phases": [
                {"k": k, "g_s": round(float(self.g_s[k - 1]), 6), "g_e": round(float(self.g_e[k - 1]), 6)}
                for k in PHASES
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DualRingPlan":
        ph = sorted(d["phases"], key=lambda p: p["k"])
        return cls(
            C=float(d["C"]),
            dphi=float(d.get("dphi", 0.0)),
            g_s=np.array([p["g_s"] for p in ph], float),
            g_e=np.array([p["g_e"] for p in ph], float),
            y=float(d.get("y", 3.0)),
            r_a=float(d.get("r_a", 2.0)),
        )

    @classmethod
    def from_greens(cls, greens, C=None, dphi=0.0, y=3.0, r_a=2.0) -> "DualRingPlan":
        """Sequence eight green durations into a dual-ring plan."""
        greens = np.asarray(greens, float)
        g_s, g_e = _sequence(greens[None, :], y, r_a)
        if C is None:
            C = greens[:4].sum() + 4 * (y + r_a)
        return cls(float(C), float(dphi), g_s[0], g_e[0], y, r_a)


def _sequence(greens, y, r_a):
    """Start/end times for arrays of greens, shape ``(P, 8)``."""
    step = y + r_a
    g_s = np.zeros_like(greens)
    for ring in (slice(0, 4), slice(4, 8)):
        g = greens[:, ring]
        starts = np.concatenate([np.zeros((g.shape[0], 1)), np.cumsum(g + step, axis=1)[:, :-1]], axis=1)
        g_s[:, ring] = starts
    return g_s, g_s + greens


def decode_greens(vec, C, y, r_a, g_min):
    """Map split vectors in ``[0, 1]^5`` to green durations, shape ``(P, 8)``."""
    vec = np.clip(np.atleast_2d(np.asarray(vec, float)), 0.0, 1.0)
    G = C - 4 * (y + r_a)
    if G < 4 * g_min - 1e-9:
        raise CycleInfeasible(f"C={C:g}: ring green {G:g} s < 4 x g_min = {4 * g_min:g} s")
    B1 = 2 * g_min + vec[:, 0] * (G - 4 * g_min)
    B2 = G - B1
    g1 = g_min + vec[:, 1] * (B1 - 2 * g_min)
    g5 = g_min + vec[:, 2] * (B1 - 2 * g_min)
    g3 = g_min + vec[:, 3] * (B2 - 2 * g_min)
    g7 = g_min + vec[:, 4] * (B2 - 2 * g_min)
    return np.column_stack([g1, B1 - g1, g3, B2 - g3, g5, B1 - g5, g7, B2 - g7])


def decode_and_repair(vec, C, y=3.0, r_a=2.0, g_min=5.0, dphi=0.0) -> DualRingPlan:
    greens = decode_greens(vec, C, y, r_a, g_min)[0]
    return DualRingPlan.from_greens(greens, C=C, dphi=dphi, y=y, r_a=r_a)


@dataclass
class PhaseModel:
    """Estimated inputs of one phase for the optimizer."""

    phase_id: int
    z: int
    lambda0: float
    fit: DischargeFit
    arrival_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    penetration: float | None = None
    profile: ArrivalProfile | None = None  # fixed profile overrides refitting

    def profile_for(self, C, dphi, cfg: RunConfig) -> ArrivalProfile:
        if self.profile is not None:
            if not math.isclose(self.profile.C, C):
                raise ValueError("fixed profile does not match the candidate cycle")
            return self.profile
        pc = cfg.profile
        est = ArrivalProfileEstimator(
            C=C,
            dphi=dphi,
            bin_width=pc.bin,
            max_segments=max(1, min(pc.max_segments, int(C // pc.min_segment_len))),
            min_segment_len=pc.min_segment_len,
            sse_gain_threshold=pc.sse_gain_threshold,
            kde_threshold=pc.kde_threshold,
        )
        return est.fit(self.arrival_times, penetration=self.penetration).profile_


@dataclass
class ObjectiveValue:
    f_green: float
    f_delay: float
    delta: float

    @property
    def f_hybrid(self) -> float:
        return self.f_delay + self.delta * self.f_green

    def to_dict(self) -> dict:
        return {"f_green": self.f_green, "f_delay": self.f_delay, "f_hybrid": self.f_hybrid}


INFEASIBLE = ObjectiveValue(math.inf, math.inf, 1.0)


class CandidateModel:
    """Wave profiles of all phases for one ``(C, dphi)`` candidate."""

    def __init__(self, phases: list[PhaseModel], C, dphi, cfg: RunConfig):
        self.C = float(C)
        self.dphi = float(dphi)
        self.cfg = cfg
        self.phases = {p.phase_id: p for p in phases}
        self.waves: dict[int, WaveProfile] = {}
        for p in phases:
            prof = p.profile_for(C, dphi, cfg)
            self.waves[p.phase_id] = build_wave_profile(prof, p.lambda0, cfg.d0, p.fit.v)
        ids = sorted(self.phases)
        self._cols = np.array([k - 1 for k in ids])
        self._z = np.array([float(self.phases[k].z) for k in ids])
        self._stack = StackedWaves([self.waves[k] for k in ids], [self.phases[k].fit for k in ids])

    def evaluate_greens(self, greens):
        """``(z-weighted G_exceed, f_delay)`` arrays for greens of shape ``(P, 8)``."""
        cfg = self.cfg
        g_s, g_e = _sequence(greens, cfg.y, cfg.r_a)
        lt = cfg.lost_time
        cols = self._cols
        t_egs = g_s[:, cols] + lt.startup
        g_end = g_e[:, cols]
        t_ege = np.minimum(g_end + cfg.y - lt.unused_yellow, self.C)
        res = self._stack.evaluate(t_egs, t_ege, g_end, cfg.a3_variant)
        zD = res["D_total"] @ self._z
        zV = res["V_total"] @ self._z
        zG = res["G_exceed"] @ self._z
        with np.errstate(invalid="ignore", divide="ignore"):
            f_delay = np.where(zV > 0, zD / np.where(zV > 0, zV, 1.0), 0.0)
        return zG, f_delay

    def evaluate_plan(self, plan: DualRingPlan) -> ObjectiveValue:
        zG, f_delay = self.evaluate_greens(plan.greens[None, :])
        return ObjectiveValue(float(zG[0]), float(f_delay[0]), self.cfg.delta)

    def performance(self, plan: DualRingPlan) -> dict:
        """Per-phase performance dicts under ``plan``."""
        cfg, lt = self.cfg, self.cfg.lost_time
        out = {}
        for k, p in self.phases.items():
            t_egs = plan.g_s[k - 1] + lt.startup
            t_ege = min(plan.g_e[k - 1] + cfg.y - lt.unused_yellow, self.C)
            res = performance_arrays(self.waves[k], t_egs, t_ege, plan.g_e[k - 1], p.fit, cfg.a3_variant)
            out[k] = {name: float(v[0]) for name, v in res.items()}
        return out


def plan_objective(plan: DualRingPlan, phases: list[PhaseModel], cfg: RunConfig) -> ObjectiveValue:
    return CandidateModel(phases, plan.C, plan.dphi, cfg).evaluate_plan(plan)


def pso_minimize(fitness, dim, pso: PSOConfig, rng: np.random.Generator):
    """Synchronous global-best PSO on ``[0, 1]^dim``.

    ``fitness`` maps a ``(swarm, dim)`` array to a ``(swarm,)`` array.
    Returns ``(best_position, best_value, iterations)``.
    """
    x = rng.random((pso.swarm, dim))
    vel = rng.uniform(-pso.v_clamp, pso.v_clamp, (pso.swarm, dim))
    f = fitness(x)
    p_best, p_val = x.copy(), f.copy()
    g_idx = int(np.argmin(p_val))
    g_best, g_val = p_best[g_idx].copy(), float(p_val[g_idx])
    stale = 0
    it = 0
    for it in range(1, pso.max_iter + 1):
        r1 = rng.random((pso.swarm, dim))
        r2 = rng.random((pso.swarm, dim))
        vel = pso.inertia * vel + pso.c1 * r1 * (p_best - x) + pso.c2 * r2 * (g_best - x)
        np.clip(vel, -pso.v_clamp, pso.v_clamp, out=vel)
        x = np.clip(x + vel, 0.0, 1.0)
        f = fitness(x)
        better = f < p_val
        p_best[better] = x[better]
        p_val[better] = f[better]
        g_idx = int(np.argmin(p_val))
        if p_val[g_idx] < g_val - pso.tol * max(1.0, abs(g_val)):
            g_best, g_val = p_best[g_idx].copy(), float(p_val[g_idx])
            stale = 0
        else:
            stale += 1
            if stale >= pso.patience:
                break
    return g_best, g_val, it


def pso_green_splits(model: CandidateModel, pso: PSOConfig, seed) -> tuple[DualRingPlan, ObjectiveValue]:
    cfg = model.cfg
    C = model.C
    decode_greens(np.zeros(5), C, cfg.y, cfg.r_a, cfg.g_min)  # raises when infeasible

    def fitness(xs):
        zG, f_delay = model.evaluate_greens(decode_greens(xs, C, cfg.y, cfg.r_a, cfg.g_min))
        return f_delay + cfg.delta * zG

    rng = np.random.default_rng(seed)
    best, _, _ = pso_minimize(fitness, 5, pso, rng)
    plan = decode_and_repair(best, C, cfg.y, cfg.r_a, cfg.g_min, dphi=model.dphi)
    return plan, model.evaluate_plan(plan)


def _sub_seed(seed, C, dphi):
    return [int(seed) & 0xFFFFFFFF, int(round(C * 1000)), int(round(dphi * 1000))]


@dataclass
class OptimizationResult:
    plan: DualRingPlan
    objective: ObjectiveValue
    trace: list

    def to_dict(self) -> dict:
        d = self.plan.to_dict()
        d.update({k: _finite(v) for k, v in self.objective.to_dict().items()})
        d["trace"] = [{"C": c, "dphi": p, "f": _finite(f)} for c, p, f in self.trace]
        return d


def _finite(v):
    return float(v) if math.isfinite(v) else None


def evaluate_candidate(phases, C, dphi, cfg: RunConfig, seed):
    try:
        model = CandidateModel(phases, C, dphi, cfg)
        return pso_green_splits(model, cfg.pso, _sub_seed(seed, C, dphi))
    except CycleInfeasible:
        return None, INFEASIBLE
    except ArrivalExceedsJamCapacity as exc:
        logger.warning("C=%g dphi=%g skipped: %s", C, dphi, exc)
        return None, INFEASIBLE


def _grid(lo, hi, step):
    n = int(math.floor((hi - lo) / step + 1e-9))
    pts = [lo + i * step for i in range(n + 1)]
    if pts[-1] < hi - 1e-9:
        pts.append(hi)
    return pts


def optimize(phases: list[PhaseModel], cfg: RunConfig, optimize_ref_point=False, seed=0, executor=None):
    """Bi-level search over cycle length (and reference shift) and splits."""
    C_lo = max(cfg.C_min, math.ceil(cfg.min_feasible_cycle - 1e-9))
    if C_lo > cfg.C_max:
        raise NoFeasibleCycle(
            f"C_max={cfg.C_max:g} s is below the minimum feasible cycle "
            f"4*(y+r_a)+4*g_min = {cfg.min_feasible_cycle:g} s"
        )
    results = {}
    trace = []

    def run(cands):
        todo = [c for c in cands if c not in results]
        if executor is not None and len(todo) > 1:
            futs = [executor.submit(evaluate_candidate, phases, c[0], c[1], cfg, seed) for c in todo]
            outs = [f.result() for f in futs]
        else:
            outs = [evaluate_candidate(phases, c[0], c[1], cfg, seed) for c in todo]
        for c, out in zip(todo, outs):
            results[c] = out
            trace.append((c[0], c[1], out[1].f_hybrid))

    def best_of(cands):
        return min(cands, key=lambda c: (results[c][1].f_hybrid, c[0], c[1]))

    def dphi_search(C):
        if not optimize_ref_point:
            run([(C, 0.0)])
            return (C, 0.0)
        coarse = [(C, float(p)) for p in np.arange(0.0, C, cfg.coarse_step)]
        run(coarse)
        c0 = best_of(coarse)
        r = int(cfg.refine_radius)
        fine = sorted({(C, float((c0[1] + d) % C)) for d in range(-r, r + 1)})
        run(fine)
        return best_of(coarse + fine)

    coarse_C = _grid(C_lo, cfg.C_max, cfg.coarse_step)
    tops = [dphi_search(float(C)) for C in coarse_C]
    best = best_of(tops)
    r = int(cfg.refine_radius)
    fine_C = [float(C) for C in range(int(best[0]) - r, int(best[0]) + r + 1) if C_lo <= C <= cfg.C_max]
    tops += [dphi_search(C) for C in fine_C]
    best = best_of(tops)
    plan, value = results[best]
    if plan is None:
        raise NoFeasibleCycle("no candidate cycle produced a feasible plan")
    return OptimizationResult(plan, value, trace)


class SignalTimingOptimizer(BaseEstimator):
    """Estimator-style wrapper: ``fit`` searches, ``predict`` returns the plan.

    ``fit`` takes a list of :class:`PhaseModel`.
    """

    def __init__(self, config=None, optimize_ref_point=False, seed=0):
        self.config = config
        self.optimize_ref_point = optimize_ref_point
        self.seed = seed

    def fit(self, X, y=None):
        cfg = self.config or RunConfig()
        self.result_ = optimize(list(X), cfg, self.optimize_ref_point, self.seed)
        self.plan_ = self.result_.plan
        return self

    def predict(self, X=None):
        return self.plan_

    def score(self, X, y=None):
        """Negative hybrid objective of the fitted plan on phases ``X``."""
        cfg = self.config or RunConfig()
        return -plan_objective(self.plan_, list(X), cfg).f_hybrid
