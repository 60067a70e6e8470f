"""Point-queue-with-space simulator of one signalized intersection.

Each phase is a group of ``z`` lanes fed round-robin. A vehicle drives at
free-flow speed until it meets the back of its lane queue (stopped
positions are multiples of ``d0``), waits until the discharge wave that
starts at effective green reaches it, and leaves at ``v_l``. Everything is
computed as exact event times; 1 Hz trajectories are materialized lazily
so that only sampled vehicles cost memory.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field

import numpy as np

from .config import LostTime
from .core_io import Trajectory
from .optimizer import DualRingPlan

logger = logging.getLogger(__name__)

EXIT_X = -60.0  # trajectories end here
SLOW_ZONE = -20.0  # queued vehicles hold v_l until here


class SpilloverWarning(RuntimeWarning):
    pass


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Platoon:
    upstream_cycle: float = 160.0
    release_window: tuple = (0.0, 80.0)
    platoon_fraction: float = 0.6

    def __post_init__(self):
        lo, hi = self.release_window
        if not 0 <= lo < hi <= self.upstream_cycle:
            raise ValueError("release window must lie inside the upstream cycle")
        if not 0 <= self.platoon_fraction <= 1:
            raise ValueError("platoon_fraction must be in [0, 1]")


@dataclass
class DemandSpec:
    """True per-lane arrival rates and the run frame.

    ``patterns`` maps phase id to ``"poisson"`` or a :class:`Platoon`;
    missing phases are Poisson.
    """

    rates: dict
    lanes: dict = field(default_factory=lambda: {k: 1 for k in range(1, 9)})
    patterns: dict = field(default_factory=dict)
    duration: float = 9000.0
    warmup: float = 900.0
    cooldown: float = 900.0

    def __post_init__(self):
        self.rates = {int(k): float(v) for k, v in self.rates.items()}
        self.lanes = {int(k): int(v) for k, v in self.lanes.items()}
        self.patterns = {int(k): _pattern(v) for k, v in self.patterns.items()}
        if any(r < 0 for r in self.rates.values()):
            raise ValueError("arrival rates must be non-negative")
        if self.warmup + self.cooldown >= self.duration:
            raise ValueError("warmup and cooldown leave no measured period")

    def pattern(self, k):
        return self.patterns.get(k, "poisson")

    def to_dict(self) -> dict:
        return {
            "rates": {str(k): v for k, v in self.rates.items()},
            "lanes": {str(k): v for k, v in self.lanes.items()},
            "patterns": {str(k): (v if isinstance(v, str) else asdict(v)) for k, v in self.patterns.items()},
            "duration": self.duration,
            "warmup": self.warmup,
            "cooldown": self.cooldown,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DemandSpec":
        return cls(**d)


def _pattern(p):
    if isinstance(p, Platoon) or p == "poisson":
        return p
    if isinstance(p, dict):
        return Platoon(p.get("upstream_cycle", 160.0), tuple(p.get("release_window", (0.0, 80.0))), p.get("platoon_fraction", 0.6))
    raise ValueError(f"unknown arrival pattern {p!r}")


def generate_arrivals(spec: DemandSpec, seed) -> dict:
    """Unimpeded stop-line arrival times per phase, sorted."""
    rng = np.random.default_rng(seed)
    out = {}
    for k in sorted(spec.rates):
        rate = spec.rates[k] * spec.lanes.get(k, 1)
        pat = spec.pattern(k)
        if isinstance(pat, Platoon):
            background = _poisson(rng, rate * (1 - pat.platoon_fraction), spec.duration)
            lo, hi = pat.release_window
            n_cyc = int(math.ceil(spec.duration / pat.upstream_cycle))
            counts = rng.poisson(rate * pat.platoon_fraction * pat.upstream_cycle, n_cyc)
            starts = np.repeat(np.arange(n_cyc) * pat.upstream_cycle, counts)
            platoon = starts + rng.uniform(lo, hi, starts.size)
            times = np.concatenate([background, platoon[platoon < spec.duration]])
        else:
            times = _poisson(rng, rate, spec.duration)
        out[k] = np.sort(times)
    return out


def _poisson(rng, rate, duration):
    if rate <= 0:
        return np.zeros(0)
    n = rng.poisson(rate * duration)
    return rng.uniform(0.0, duration, n)


@dataclass(frozen=True)
class Geometry:
    link_length: float = 1000.0
    v: float = 14.0
    v_l: float = 11.2
    d0: float = 7.0
    h_s: float = 2.0

    @property
    def w_m(self) -> float:
        """Discharge wave speed implied by ``h_s = d0 (1/w_m + 1/v_l)``."""
        rest = self.h_s - self.d0 / self.v_l
        if rest <= 0:
            raise ValueError("h_s too short for d0 / v_l")
        return self.d0 / rest


class _Signal:
    def __init__(self, plan, lost: LostTime):
        self.plan = plan
        if plan is not None:
            self.C = plan.C
            self.start = plan.g_s + lost.startup
            self.end = np.minimum(plan.g_e + plan.y - lost.unused_yellow, plan.C)

    def window(self, k, t):
        """Effective green ``(start, end)`` of the cycle whose green starts at or before ``t``."""
        if self.plan is None:
            return -math.inf, math.inf
        s_rel = self.start[k - 1]
        n = math.floor((t - self.plan.dphi - s_rel) / self.C)
        s = self.plan.dphi + n * self.C + s_rel
        return s, s + self.end[k - 1] - s_rel

    def next_window(self, k, s):
        return s + self.C, s + self.C + self.end[k - 1] - self.start[k - 1]


@dataclass
class Vehicles:
    """Event times of every simulated vehicle.

    Stop episodes are stored flat; vehicle ``i`` owns episodes
    ``ep_start[i] : ep_start[i] + n_stops[i]``.
    """

    phase: np.ndarray
    lane: np.ndarray
    arrival: np.ndarray  # unimpeded stop-line time
    cross: np.ndarray
    ep_start: np.ndarray
    n_stops: np.ndarray
    ep_x: np.ndarray
    ep_join: np.ndarray
    ep_release: np.ndarray

    @property
    def stopped(self):
        return self.n_stops > 0

    def __len__(self):
        return self.phase.size

    def vehicle_id(self, i) -> str:
        return f"{int(self.phase[i])}-{i}"

    def episodes(self, i):
        sl = slice(self.ep_start[i], self.ep_start[i] + self.n_stops[i])
        return list(zip(self.ep_x[sl], self.ep_join[sl], self.ep_release[sl]))

    def stopped_delay(self):
        per_ep = self.ep_release - self.ep_join
        owner = np.repeat(np.arange(len(self)), self.n_stops)
        return np.bincount(owner, weights=per_ep, minlength=len(self))


@dataclass
class GroundTruth:
    volume: dict  # veh counted per phase
    rate: dict  # veh/s/lane
    delay: dict  # average stopped delay, s/veh
    queue: dict  # time-averaged back-of-queue per lane, m
    stops: dict  # stops per vehicle
    throughput: dict  # veh crossing during the measured period
    generated: dict
    spillover: bool = False

    def overall(self, lanes) -> dict:
        """Volume-weighted intersection averages."""
        vol = sum(self.volume.values())
        if vol == 0:
            return {"delay": 0.0, "queue": 0.0, "stops": 0.0, "throughput": 0}
        ks = list(self.volume)
        lane_total = sum(lanes.get(k, 1) for k in ks)
        return {
            "delay": sum(self.delay[k] * self.volume[k] for k in ks) / vol,
            "queue": sum(self.queue[k] * lanes.get(k, 1) for k in ks) / lane_total,
            "stops": sum(self.stops[k] * self.volume[k] for k in ks) / vol,
            "throughput": int(sum(self.throughput.values())),
        }

    def to_dict(self) -> dict:
        d = {}
        for name in ("volume", "rate", "delay", "queue", "stops", "throughput", "generated"):
            d[name] = {str(k): v for k, v in getattr(self, name).items()}
        d["spillover"] = self.spillover
        return d


class TrajectoryView(Sequence):
    """Lazy list of 1 Hz trajectories of simulated vehicles."""

    def __init__(self, vehicles: Vehicles, geometry: Geometry, tick=1.0):
        self.veh = vehicles
        self.geo = geometry
        self.tick = tick

    def __len__(self):
        return len(self.veh)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        return self._build(int(i))

    def knots(self, i):
        """Corner points ``(t, x)`` of the piecewise-linear path."""
        veh, geo = self.veh, self.geo
        a = veh.arrival[i]
        v, v_l, L = geo.v, geo.v_l, geo.link_length
        eps = veh.episodes(i)
        knots = []
        if eps:
            x0, j0, _ = eps[0]
            if x0 < L:
                knots.append((a - L / v, L))
            for x, j, r in eps:
                knots += [(j, x), (r, x)]
            knots.append((veh.cross[i] - SLOW_ZONE / v_l, SLOW_ZONE))
        elif veh.cross[i] > a + 1e-9:
            # caught the discharging platoon: follow it at v_l
            knots.append((a - L / v, L))
            t1 = (v * a - v_l * veh.cross[i]) / (v - v_l) if v > v_l else a
            x1 = v * (a - t1)
            if 0 < x1 < L:
                knots.append((t1, x1))
            knots.append((veh.cross[i] - SLOW_ZONE / v_l, SLOW_ZONE))
        else:
            knots += [(a - L / v, L), (a - SLOW_ZONE / v, SLOW_ZONE)]
        knots.append((knots[-1][0] + (SLOW_ZONE - EXIT_X) / v, EXIT_X))
        return knots

    def _build(self, i) -> Trajectory:
        knots = self.knots(i)
        kt = np.array([p[0] for p in knots])
        kx = np.array([p[1] for p in knots])
        t0 = max(math.ceil(kt[0] / self.tick) * self.tick, 0.0)
        t = np.arange(t0, kt[-1] + 1e-9, self.tick)
        x = np.interp(t, kt, kx)
        seg = np.clip(np.searchsorted(kt, t, side="right") - 1, 0, kt.size - 2)
        dt = np.diff(kt)
        slope = np.where(dt > 0, -np.diff(kx) / np.where(dt > 0, dt, 1.0), 0.0)
        speed = np.abs(slope[seg])
        return Trajectory(self.veh.vehicle_id(i), int(self.veh.phase[i]), t, x, speed)


@dataclass
class SimResult:
    vehicles: Vehicles
    truth: GroundTruth
    geometry: Geometry
    spillover: bool

    @property
    def trajectories(self) -> TrajectoryView:
        return TrajectoryView(self.vehicles, self.geometry)


def run_simulation(plan: DualRingPlan | None, arrivals: dict, geometry: Geometry, lanes=None,
                   frame=(900.0, 8100.0), lost_time: LostTime | None = None, tick=1.0) -> SimResult:
    """Simulate every phase under ``plan`` (``None`` means always green).

    ``arrivals`` maps phase id to sorted unimpeded stop-line times;
    ``frame`` is the measured period ``(start, end)``.
    """
    if tick > 1.0:
        raise ValueError("tick must be <= 1 s")
    lost = lost_time or LostTime()
    lanes = lanes or {}
    sig = _Signal(plan, lost)
    w_m = geometry.w_m
    phase, lane, arrival, cross, n_stops, episodes = [], [], [], [], [], []
    for k in sorted(arrivals):
        arr = np.asarray(arrivals[k], float)
        z = lanes.get(k, 1)
        lane_of = np.arange(arr.size) % z
        for ln in range(z):
            sel = arr[lane_of == ln]
            c, eps = _run_lane(sel, k, sig, geometry, w_m)
            phase.append(np.full(sel.size, k))
            lane.append(np.full(sel.size, ln))
            arrival.append(sel)
            cross.append(c)
            n_stops.append(np.array([len(e) for e in eps], dtype=int))
            episodes += [ep for e in eps for ep in e]

    def cat(parts, dtype=float):
        return np.concatenate(parts).astype(dtype) if parts else np.zeros(0, dtype)

    n_stops = cat(n_stops, int)
    ep = np.array(episodes, float).reshape(-1, 3)
    veh = Vehicles(
        phase=cat(phase, int),
        lane=cat(lane, int),
        arrival=cat(arrival),
        cross=cat(cross),
        ep_start=np.concatenate([[0], np.cumsum(n_stops)[:-1]]).astype(int) if n_stops.size else n_stops,
        n_stops=n_stops,
        ep_x=ep[:, 0],
        ep_join=ep[:, 1],
        ep_release=ep[:, 2],
    )
    spill = bool(np.any(veh.ep_x > geometry.link_length))
    if spill:
        warnings.warn("queue exceeded the link length; results are flagged", SpilloverWarning, stacklevel=2)
    truth = ground_truth(veh, arrivals, lanes, geometry, frame, tick)
    truth.spillover = spill
    return SimResult(veh, truth, geometry, spill)


def _run_lane(arr, k, sig: _Signal, geo: Geometry, w_m):
    """Crossing times and stop episodes ``(x, join, release)`` per vehicle.

    A stopped vehicle either stands directly behind one of its leader's
    stops (and moves when the leader does) or heads the lane queue at the
    stop line and waits for effective green.
    """
    v, v_l, d0, h_s = geo.v, geo.v_l, geo.d0, geo.h_s
    cross = np.empty(arr.size)
    all_eps = []
    c_p = -math.inf
    lead = []
    for i, a in enumerate(arr):
        eps = []
        p = None
        for idx, (xe, _, re) in enumerate(lead):
            t_r = a - (xe + d0) / v
            if t_r <= re:
                p, x, jt = idx, xe + d0, t_r
                break
        if p is None:
            _, e0 = sig.window(k, a)
            if a <= e0 and a >= c_p + h_s:
                c_p = cross[i] = a
                lead = []
                all_eps.append(eps)
                continue
            if a <= e0 and c_p + h_s <= e0:
                # catches the discharging platoon and follows it through
                c_p = cross[i] = c_p + h_s
                lead = []
                all_eps.append(eps)
                continue
            x, jt = 0.0, a
        for _ in range(100_000):
            if p is not None and p + 1 < len(lead):
                # leader moves up to its next stop; follow one spacing behind
                s = max(lead[p][2] + d0 / w_m, jt)
                xn, jn, _ = lead[p + 1]
                eps.append((x, jt, s))
                x, jt, p = xn + d0, max(s + (x - xn - d0) / v_l, jn), p + 1
                continue
            if p is not None:
                # leader crosses from its last stop
                s = max(lead[p][2] + d0 / w_m, jt, c_p + h_s - x / v_l)
                c = s + x / v_l
                eps.append((x, jt, s))
                _, e = sig.window(k, c)
                if c <= e + 1e-9:
                    break
                x, jt, p = 0.0, c, None  # rolls to the stop line, misses the green
                continue
            g, e = sig.window(k, jt)
            if jt > e:
                g, e = sig.next_window(k, g)
            while max(g, jt, c_p + h_s) > e + 1e-9:
                g, e = sig.next_window(k, g)
            s = max(g, jt, c_p + h_s)
            eps.append((0.0, jt, s))
            c = s
            break
        else:
            raise SimulationError(f"phase {k}: vehicle never discharged")
        c_p = cross[i] = c
        lead = eps
        all_eps.append(eps)
    return cross, all_eps


def ground_truth(veh: Vehicles, arrivals, lanes, geometry: Geometry, frame, tick=1.0) -> GroundTruth:
    t0, t1 = frame
    span = t1 - t0
    out = {n: {} for n in ("volume", "rate", "delay", "queue", "stops", "throughput", "generated")}
    ticks = np.arange(t0, t1, tick)
    delay = veh.stopped_delay()
    owner = np.repeat(np.arange(len(veh)), veh.n_stops)
    for k in sorted(arrivals):
        z = lanes.get(k, 1)
        mine = veh.phase == k
        counted = mine & (veh.arrival >= t0) & (veh.arrival < t1)
        n = int(counted.sum())
        out["volume"][k] = n
        out["rate"][k] = n / span / z
        out["delay"][k] = float(delay[counted].sum() / n) if n else 0.0
        out["stops"][k] = float(veh.n_stops[counted].sum() / n) if n else 0.0
        out["throughput"][k] = int((mine & (veh.cross >= t0) & (veh.cross < t1)).sum())
        out["generated"][k] = int(mine.sum())
        # back of queue per lane, sampled on the tick grid
        total = 0.0
        for ln in range(z):
            q = np.zeros(ticks.size)
            idx = np.nonzero(mine[owner] & (veh.lane[owner] == ln))[0]
            lo = np.searchsorted(ticks, veh.ep_join[idx], side="left")
            hi = np.searchsorted(ticks, veh.ep_release[idx], side="left")
            for a, b, xs in zip(lo, hi, veh.ep_x[idx]):
                if b > a:
                    np.maximum(q[a:b], xs + geometry.d0, out=q[a:b])
            total += q.mean() if q.size else 0.0
        out["queue"][k] = total / z
    return GroundTruth(**out)


@dataclass(frozen=True)
class SampleSpec:
    penetration: float
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.penetration <= 1:
            raise ValueError("penetration must be in (0, 1]")


def sample_cvs(trajectories, spec: SampleSpec) -> list:
    """Independent Bernoulli draw per vehicle, reproducible per seed."""
    if spec.penetration >= 1:
        return list(trajectories)
    rng = np.random.default_rng(spec.seed)
    keep = np.nonzero(rng.random(len(trajectories)) < spec.penetration)[0]
    return [trajectories[int(i)] for i in keep]


def mape(estimates: dict, truth: dict) -> float:
    """Mean absolute percentage error over phases with nonzero truth."""
    if set(estimates) != set(truth):
        raise ValueError("estimate and truth phase sets differ")
    terms = []
    for k in sorted(truth):
        if truth[k] == 0:
            logger.warning("phase %s has zero truth; excluded from MAPE", k)
            continue
        terms.append(abs(estimates[k] - truth[k]) / abs(truth[k]))
    if not terms:
        raise ValueError("no phase with nonzero truth")
    return float(np.mean(terms))


def improvement(x_ini: float, x_opt: float) -> float:
    if x_ini == 0:
        raise ZeroDivisionError("improvement undefined for a zero baseline")
    return (x_ini - x_opt) / x_ini


def evaluate_metrics(estimates=None, truth=None, x_ini=None, x_opt=None) -> dict:
    out = {}
    if estimates is not None:
        out["MAPE"] = mape(estimates, truth)
    if x_ini is not None:
        out["IMP"] = improvement(x_ini, x_opt)
    return out


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def manifest(command: str, seeds: dict, config_digest: str, inputs=(), params=None) -> dict:
    """Everything needed to replay a run exactly."""
    from . import __version__

    return {
        "command": command,
        "version": __version__,
        "seeds": seeds,
        "config_sha256": config_digest,
        "inputs": {str(p): file_digest(p) for p in inputs},
        "params": json.loads(json.dumps(params or {}, default=str)),
    }
