"""Per-phase demand estimation from queued connected vehicles."""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .arrival_profile import ArrivalProfile, cumulative_alpha
from .cfd import DischargeFit

logger = logging.getLogger(__name__)


class NoQueuedCV(ValueError):
    pass


class EstimationImpossible(RuntimeError):
    pass


class InsufficientData(ValueError):
    pass


class DegenerateDischarge(ValueError):
    pass


@dataclass
class PhaseDemand:
    phase_id: int
    z: int
    N: int
    N_q: int
    lambda0_raw: float | None
    lambda0: float | None = None
    n_oq: int = 0

    @property
    def has_wmle(self) -> bool:
        return self.lambda0_raw is not None


@dataclass(frozen=True)
class OverflowState:
    n_oq: int = 0

    @property
    def saturated(self) -> bool:
        return self.n_oq > 0


def detect_overflow(observations) -> OverflowState:
    """Largest queue position where most queued CVs queued more than once.

    A CV held over a green is counted at the position of its last stop,
    which is where it stands in the next cycle's queue.
    """
    by_pos = defaultdict(lambda: [0, 0])
    for ob in observations:
        tally = by_pos[ob.overflow_position]
        tally[0] += 1
        tally[1] += int(ob.queued_more_than_once)
    overflow = [p for p, (n, k) in by_pos.items() if k > 0.5 * n]
    return OverflowState(max(overflow) if overflow else 0)


def correct_positions(observations, state: OverflowState):
    """Return copies with ``n_i`` net of the overflow queue (floored at 0)."""
    if not state.saturated:
        return [replace(ob, n_i=ob.n_q) for ob in observations]
    return [replace(ob, n_i=max(ob.n_q - state.n_oq, 0)) for ob in observations]


def wmle_rate(observations, profile: ArrivalProfile) -> float:
    """Weighted maximum-likelihood estimate of the mean arrival rate.

    Each queued CV contributes ``n_i`` arrivals over the cumulative profile
    weight up to its cycle arrival time; weights equal that same integral.
    """
    if not observations:
        raise NoQueuedCV("no queued CVs for phase")
    n = np.array([ob.n_i for ob in observations], dtype=float)
    t_ec = np.array([ob.t_ec for ob in observations], dtype=float)
    W = np.atleast_1d(cumulative_alpha(profile, t_ec))
    denom = float(np.dot(W, W))
    if denom <= 0:
        raise ValueError("all observation weights are zero")
    return float(np.dot(n, W) / denom)


def redistribute(phases: list[PhaseDemand], weight: float = 0.5) -> list[PhaseDemand]:
    """Blend per-phase estimates with CV-count shares, preserving the total.

    Phases without a WMLE estimate take their CV-count share of the total.
    """
    wmle = [p for p in phases if p.has_wmle]
    if not wmle:
        raise EstimationImpossible("all phases of the intersection have no queued CVs")
    total = sum(p.z * p.lambda0_raw for p in wmle)
    n_total = sum(p.N for p in wmle)
    out = []
    for p in phases:
        if n_total <= 0 or total <= 0:
            lam = p.lambda0_raw if p.has_wmle else 0.0
        elif p.has_wmle:
            share = weight * p.z * p.lambda0_raw / total + (1 - weight) * p.N / n_total
            lam = share * total / p.z
        else:
            lam = p.N / n_total * total / p.z
        out.append(replace(p, lambda0=float(lam)))
    return out


def huber_line(t, s, delta=None, tol=1e-8, max_iter=200):
    """Huber-loss line fit ``s ~ slope * t + intercept`` by IRLS.

    ``delta`` defaults to 1.345 times the MAD scale of the OLS residuals.
    Returns ``(slope, intercept)``.
    """
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    if t.size < 2:
        raise InsufficientData("need at least 2 discharge points")
    if np.ptp(t) == 0:
        raise InsufficientData("discharge points share a single time")
    X = np.column_stack([t, np.ones_like(t)])
    beta = np.linalg.lstsq(X, s, rcond=None)[0]
    if delta is None:
        resid = s - X @ beta
        mad = np.median(np.abs(resid - np.median(resid))) / 0.6745
        delta = 1.345 * mad if mad > 0 else np.inf
    for _ in range(max_iter):
        r = np.abs(s - X @ beta)
        w = np.where(r <= delta, 1.0, delta / np.maximum(r, 1e-300))
        sw = np.sqrt(w)
        new = np.linalg.lstsq(X * sw[:, None], s * sw, rcond=None)[0]
        done = np.all(np.abs(new - beta) <= tol * np.maximum(np.abs(beta), 1.0))
        beta = new
        if done:
            break
    return float(beta[0]), float(beta[1])


def fit_discharge_wave(points, huber_delta=None) -> tuple[float, float]:
    """Discharge wave speed and intercept from ``(t, position)`` leave points."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if pts.shape[0] < 2:
        raise InsufficientData("need at least 2 discharge points")
    w_m, xi0 = huber_line(pts[:, 0], pts[:, 1], huber_delta)
    if w_m <= 0:
        raise DegenerateDischarge(f"fitted discharge wave speed {w_m:.4g} <= 0")
    return w_m, xi0


def free_flow_speed(speeds) -> float:
    speeds = np.asarray(speeds, dtype=float)
    if speeds.size == 0:
        raise InsufficientData("no trajectory points")
    return float(np.percentile(speeds, 95))


def calibrate_params(trajectories, records, d0, w_m, xi0=0.0) -> DischargeFit:
    """Speeds for one phase: ``v`` from all points, ``v_l`` from queued crossings."""
    if d0 <= 0:
        raise ValueError("jam spacing must be positive")
    v = free_flow_speed(np.concatenate([tr.speed for tr in trajectories]) if trajectories else [])
    crossing = [r.crossing[1] for r in records if r.queued and r.crossing is not None]
    if crossing:
        v_l = min(float(np.mean(crossing)), v)
    else:
        logger.warning("no queued CV crossed the stop line; v_l falls back to v/2")
        v_l = v / 2.0
    if v_l <= 0:
        v_l = v / 2.0
    return DischargeFit(w_m=w_m, v=v, v_l=v_l, d0=d0, xi0=xi0)


def demand_to_dict(p: PhaseDemand, fit: DischargeFit | None) -> dict:
    d = {
        "lambda0": p.lambda0,
        "lambda0_raw": p.lambda0_raw,
        "z": p.z,
        "N": p.N,
        "N_q": p.N_q,
        "n_oq": p.n_oq,
    }
    if fit is not None:
        d.update({"v": fit.v, "v_l": fit.v_l, "w_m": fit.w_m, "h_s": fit.h_s, "xi0": fit.xi0})
    return d


def initial_plan(cfg):
    from .optimizer import DualRingPlan

    from .config import ConfigError

    ip = cfg.initial_plan
    plan = DualRingPlan.from_greens(ip.greens, C=ip.C, dphi=ip.dphi, y=cfg.y, r_a=cfg.r_a)
    bad = plan.check(g_min=cfg.g_min)
    if bad:
        raise ConfigError(f"initial plan violates {', '.join(bad)}")
    return plan


def red_start_shifts(plan, cfg) -> dict:
    """Per-phase reference shift that puts ``t = 0`` at effective red start."""
    lt = cfg.lost_time
    out = {}
    for k in range(1, 9):
        t_ege = min(plan.g_e[k - 1] + plan.y - lt.unused_yellow, plan.C)
        out[k] = float((plan.dphi + t_ege) % plan.C)
    return out


def discharge_points(records, plan, k, startup):
    """``(seconds since effective green start, leave position)`` of every stop."""
    t_egs = plan.g_s[k - 1] + startup
    pts = []
    for rec in records:
        for ev in rec.events:
            # centred so a leave just before green start stays near zero
            u = (ev.leave_t - plan.dphi - t_egs + plan.C / 2) % plan.C - plan.C / 2
            pts.append((u, ev.leave_x))
    return pts


@dataclass
class DemandEstimate:
    """Everything estimated from one CV trajectory set."""

    phases: dict  # phase_id -> PhaseDemand
    fits: dict  # phase_id -> DischargeFit
    profiles: dict  # phase_id -> ArrivalProfile in the red-start frame
    arrival_times: dict  # phase_id -> CV expected arrival times
    penetration: float | None = None

    def lambdas(self) -> dict:
        return {k: p.lambda0 for k, p in self.phases.items()}

    def phase_models(self):
        from .optimizer import PhaseModel

        return [
            PhaseModel(
                k,
                self.phases[k].z,
                self.phases[k].lambda0,
                self.fits[k],
                arrival_times=self.arrival_times[k],
                penetration=self.penetration,
            )
            for k in sorted(self.phases)
        ]

    def to_dict(self) -> dict:
        return {
            "penetration": self.penetration,
            "phases": {str(k): demand_to_dict(self.phases[k], self.fits.get(k)) for k in sorted(self.phases)},
            "profiles": {str(k): self.profiles[k].to_dict() for k in sorted(self.profiles)},
        }


def estimate_demand(trajectories, cfg, penetration=None) -> DemandEstimate:
    """Run the full per-phase estimation on CV trajectories.

    Cycle arrival times are measured from each phase's effective red start
    under the plan in force during collection, and only CVs that queued
    during effective red enter the likelihood.
    """
    from .arrival_profile import ArrivalProfileEstimator
    from .core_io import build_observations, group_by_phase, summarize

    plan = initial_plan(cfg)
    shifts = red_start_shifts(plan, cfg)
    lt, qr, pc = cfg.lost_time, cfg.queue_rule, cfg.profile
    by_phase = group_by_phase(trajectories)
    records, speeds, profiles, arrivals, points = {}, {}, {}, {}, {}
    for k in range(1, 9):
        trs = by_phase.get(k, [])
        if not trs:
            continue
        speeds[k] = free_flow_speed(np.concatenate([tr.speed for tr in trs]))
        records[k] = [summarize(tr, speeds[k], qr.stop_speed, qr.min_stop_duration) for tr in trs]
        arrivals[k] = np.array([r.t_e for r in records[k] if r.t_e is not None])
        points[k] = discharge_points(records[k], plan, k, lt.startup)
    if not records:
        raise EstimationImpossible("all phases of the intersection have no queued CVs")

    demands = []
    for k in range(1, 9):
        z = cfg.lanes.get(k, 1)
        if k not in records:
            demands.append(PhaseDemand(k, z, 0, 0, None))
            continue
        est = ArrivalProfileEstimator(
            C=plan.C,
            dphi=shifts[k],
            bin_width=pc.bin,
            max_segments=pc.max_segments,
            min_segment_len=pc.min_segment_len,
            sse_gain_threshold=pc.sse_gain_threshold,
            kde_threshold=pc.kde_threshold,
        )
        profiles[k] = est.fit(arrivals[k], penetration=penetration).profile_
        obs = build_observations(records[k], plan.C, shifts[k], cfg.d0)
        state = detect_overflow(obs)
        obs = correct_positions(obs, state)
        t_egs = plan.g_s[k - 1] + lt.startup
        t_ege = min(plan.g_e[k - 1] + plan.y - lt.unused_yellow, plan.C)
        red = plan.C - (t_ege - t_egs)
        obs = [ob for ob in obs if ob.t_ec < red]
        raw = None
        if obs:
            try:
                raw = wmle_rate(obs, profiles[k])
            except ValueError as exc:
                logger.warning("phase %d: %s", k, exc)
        n = len(records[k])
        demands.append(PhaseDemand(k, z, n, sum(r.queued for r in records[k]), raw, n_oq=state.n_oq))
    phases = {p.phase_id: p for p in redistribute(demands, cfg.redistribution_weight)}

    pooled = [pt for k in points for pt in points[k]]
    fits = {}
    v_all = float(np.median(list(speeds.values())))
    for k in range(1, 9):
        pts = points.get(k, [])
        try:
            w_m, xi0 = fit_discharge_wave(pts)
        except (InsufficientData, DegenerateDischarge) as exc:
            logger.warning("phase %d: %s; using the pooled discharge fit", k, exc)
            w_m, xi0 = fit_discharge_wave(pooled)
        if k in records:
            fits[k] = calibrate_params(by_phase[k], records[k], cfg.d0, w_m, xi0)
        else:
            fits[k] = DischargeFit(w_m=w_m, v=v_all, v_l=v_all / 2.0, d0=cfg.d0, xi0=xi0)
        if k not in profiles:
            profiles[k] = ArrivalProfile.uniform(plan.C)
            arrivals[k] = np.zeros(0)
    return DemandEstimate(phases, fits, profiles, arrivals, penetration)


class DemandEstimator(BaseEstimator):
    """Estimator-style wrapper around :func:`estimate_demand`.

    ``fit`` takes a list of CV trajectories; ``predict`` returns the
    per-phase arrival rates and ``transform`` the optimizer inputs.
    """

    def __init__(self, config=None, penetration=None):
        self.config = config
        self.penetration = penetration

    def fit(self, X, y=None):
        from .config import RunConfig

        self.estimate_ = estimate_demand(list(X), self.config or RunConfig(), self.penetration)
        self.lambda0_ = self.estimate_.lambdas()
        return self

    def predict(self, X=None) -> dict:
        check_is_fitted(self, "estimate_")
        return dict(self.lambda0_)

    def transform(self, X=None):
        check_is_fitted(self, "estimate_")
        return self.estimate_.phase_models()
