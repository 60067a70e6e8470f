"""Cumulative flow diagram of one phase under a candidate timing.

Arrivals and departures are tracked as back-of-queue position in meters
(per lane). The arrival curve is piecewise linear in queue-join time; the
departure line is the discharge wave re-anchored after the carried-over
queue clears. All performance quantities follow from the intersection of
the two curves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .arrival_profile import ArrivalProfile, cumulative_alpha


class ArrivalExceedsJamCapacity(ValueError):
    pass


@dataclass(frozen=True)
class DischargeFit:
    w_m: float
    v: float
    v_l: float
    d0: float
    xi0: float = 0.0

    @property
    def h_s(self) -> float:
        return self.d0 * (1.0 / self.w_m + 1.0 / self.v_l)

    def to_dict(self) -> dict:
        return {"w_m": self.w_m, "xi0": self.xi0, "v": self.v, "v_l": self.v_l, "d0": self.d0, "h_s": self.h_s}


@dataclass(frozen=True)
class WaveProfile:
    """Arrival-side wave speeds on the transformed (queue-join) time axis."""

    profile: ArrivalProfile
    lam0: float
    d0: float
    v: float
    tau_t: np.ndarray  # transformed breakpoints, M + 1 values
    w: np.ndarray  # per-segment wave speeds, m/s
    S_break: np.ndarray  # S_a at transformed breakpoints

    @property
    def C(self) -> float:
        return self.profile.C

    @property
    def M(self) -> int:
        return self.profile.M


def build_wave_profile(profile: ArrivalProfile, lam0: float, d0: float, v: float) -> WaveProfile:
    if lam0 < 0:
        raise ValueError("arrival rate must be non-negative")
    flow = d0 * lam0 * profile.alpha
    bad = np.nonzero(flow >= v)[0]
    if bad.size:
        m = int(bad[0]) + 1
        raise ArrivalExceedsJamCapacity(
            f"segment {m}: d0*lambda0*alpha = {flow[m - 1]:.4g} m/s reaches free-flow speed {v:.4g}"
        )
    w = v * flow / (v - flow)
    S_break = d0 * lam0 * profile.cumulative_at_breakpoints()
    tau_t = profile.tau - S_break / v
    return WaveProfile(profile, float(lam0), float(d0), float(v), tau_t, w, S_break)


@dataclass(frozen=True)
class ArrivalCurve:
    wave: WaveProfile

    @property
    def t_end(self) -> float:
        return float(self.wave.tau_t[-1])

    def __call__(self, t):
        wave = self.wave
        t_arr = np.asarray(t, dtype=float)
        if np.any((t_arr < -1e-9) | (t_arr > self.t_end + 1e-9)):
            raise ValueError(f"S_a queried outside [0, {self.t_end}]")
        q = np.clip(np.searchsorted(wave.tau_t, t_arr, side="right") - 1, 0, wave.M - 1)
        out = wave.S_break[q] + wave.w[q] * (t_arr - wave.tau_t[q])
        return float(out) if out.ndim == 0 else out


def arrival_curve(wave: WaveProfile) -> ArrivalCurve:
    return ArrivalCurve(wave)


@dataclass(frozen=True)
class PhaseTiming:
    g_s: float
    g_e: float
    y: float = 3.0
    r_a: float = 2.0
    g_min: float = 5.0
    z: int = 1
    startup_lost: float = 3.0
    unused_yellow: float = 1.0

    @property
    def t_egs(self) -> float:
        return self.g_s + self.startup_lost

    @property
    def t_ege(self) -> float:
        return self.g_e + self.y - self.unused_yellow


@dataclass
class PhasePerformance:
    Q_a: float
    T_a: float
    Q_b: float
    t_boq: float
    A1: float
    A2: float
    A3: float
    V_total: float
    Q_total: float
    D_total: float
    Q_over: float
    G_exceed: float
    cleared: bool

    def to_dict(self) -> dict:
        return {k: (bool(v) if k == "cleared" else float(v)) for k, v in self.__dict__.items()}


class StackedWaves:
    """Several phases' wave profiles padded to a common segment count.

    Padding segments have zero length at the cycle end, so they never
    change any integral and never host the first curve intersection.
    """

    def __init__(self, waves, fits):
        waves = list(waves)
        fits = list(fits)
        M = max(wv.M for wv in waves)
        K = len(waves)

        def pad(arr, n, fill):
            return np.concatenate([arr, np.full(n - arr.size, fill)])

        self.tau = np.array([pad(wv.profile.tau, M + 1, wv.C) for wv in waves])
        self.alpha = np.array([pad(wv.profile.alpha, M, 0.0) for wv in waves])
        self.N = np.array([pad(wv.S_break, M + 1, wv.S_break[-1]) for wv in waves])
        self.tt = np.array([pad(wv.tau_t, M + 1, wv.tau_t[-1]) for wv in waves])
        self.w = np.array([pad(wv.w, M, 0.0) for wv in waves])
        lengths = np.diff(self.tau, axis=1)
        zero = np.zeros((K, 1))
        self.trap = np.hstack([zero, np.cumsum(0.5 * lengths * (self.N[:, 1:] + self.N[:, :-1]), axis=1)])
        self.area = np.hstack([zero, np.cumsum(0.5 * np.diff(self.tt, axis=1) * (self.N[:, 1:] + self.N[:, :-1]), axis=1)])
        self.C = np.array([wv.C for wv in waves])
        self.lam0 = np.array([wv.lam0 for wv in waves])
        self.d0 = np.array([wv.d0 for wv in waves])
        self.v = np.array([wv.v for wv in waves])
        self.w_m = np.array([f.w_m for f in fits])
        self.v_l = np.array([f.v_l for f in fits])
        self.h_s = np.array([f.h_s for f in fits])
        if np.any(self.w_m <= 0):
            raise ValueError("discharge wave speed must be positive")
        self.M = M
        self.K = K

    def evaluate(self, t_egs, t_ege, g_e, a3_variant="printed"):
        """Performance arrays of shape ``(P, K)`` for greens of shape ``(P, K)``."""
        t_egs = np.asarray(t_egs, dtype=float)
        t_ege = np.asarray(t_ege, dtype=float)
        g_e = np.asarray(g_e, dtype=float)
        C, d0, lam0 = self.C, self.d0, self.lam0
        w_m, v_l, v = self.w_m, self.v_l, self.v
        M = self.M
        if np.any((t_egs < 0) | (t_ege > C + 1e-9) | (t_egs > t_ege)):
            raise ValueError("effective green must satisfy 0 <= t_egs <= t_ege <= C")

        def at(table, idx):
            return np.take_along_axis(np.broadcast_to(table, idx.shape[:-1] + table.shape), idx[..., None], -1)[..., 0]

        # segment of the real-time profile holding t_ege (t_ege == C -> last)
        s = np.minimum((self.tau[None, :, 1:M] <= t_ege[..., None]).sum(-1), M - 1)
        tau_s = at(self.tau, s)
        N_s = at(self.N, s)
        partial = d0 * lam0 * at(self.alpha, s) * (t_ege - tau_s)
        N_end = self.N[:, -1]
        Q_a = np.maximum(N_end - (N_s + partial), 0.0)
        T_a = Q_a * (1.0 / w_m + 1.0 / v_l)
        A1 = (self.trap[:, -1] - at(self.trap, s)) - N_s * (C - tau_s) - 0.5 * (2 * C - tau_s - t_ege) * partial
        A1 = np.maximum(A1, 0.0)
        A2 = 0.5 * Q_a * (2 * t_egs + T_a + Q_a / v_l - Q_a / v)

        # first transformed segment where the departure line meets S_a
        X = t_egs + T_a
        tt, w, S = self.tt, self.w, self.N
        denom = w_m[:, None] - w
        with np.errstate(divide="ignore", invalid="ignore"):
            t_cross = (w_m[:, None] * X[..., None] - w * tt[:, :-1] + S[:, :-1]) / denom
        valid = (denom > 0) & (t_cross >= tt[:, :-1] - 1e-12) & (t_cross <= tt[:, 1:] + 1e-12)
        cleared = valid.any(-1)
        q = np.where(cleared, np.argmax(valid, -1), M - 1)
        t_end = tt[:, -1]
        t_boq = np.where(cleared, np.take_along_axis(t_cross, q[..., None], -1)[..., 0], t_end)
        tt_q = at(tt, q)
        t_boq = np.clip(t_boq, tt_q, at(tt, q + 1))
        S_q = at(S, q)
        S_at = S_q + at(w, q) * (t_boq - tt_q)
        S_d_at = w_m * (t_boq - X)
        # an uncleared queue still reaches back to S_a at the cycle end; using
        # the residual S_a - S_d here would hide the overflow from G_exceed
        Q_b = S_at

        A3 = at(self.area, q) + 0.5 * (t_boq - tt_q) * (S_q + S_at)
        if a3_variant == "corrected":
            A3 = A3 - 0.5 * np.maximum(S_d_at, 0.0) * np.maximum(t_boq - X, 0.0)
        elif a3_variant != "printed":
            raise ValueError(f"unknown a3_variant {a3_variant!r}")
        A3 = np.maximum(A3, 0.0)

        Q_total = Q_a + Q_b
        green = t_ege - t_egs
        dissipation = Q_total * self.h_s / d0
        Q_over = np.where(dissipation <= green, 0.0, Q_total - green * d0 / self.h_s)
        excess = dissipation + t_egs - g_e
        G_exceed = np.where(excess <= 0, 0.0, excess)
        return {
            "Q_a": Q_a,
            "T_a": T_a,
            "Q_b": Q_b,
            "t_boq": t_boq,
            "A1": A1,
            "A2": A2,
            "A3": A3,
            "V_total": np.broadcast_to(lam0 * C, Q_a.shape).copy(),
            "Q_total": Q_total,
            "D_total": (A1 + A2 + A3) / d0,
            "Q_over": Q_over,
            "G_exceed": G_exceed,
            "cleared": cleared,
        }


def performance_arrays(wave: WaveProfile, t_egs, t_ege, g_e, fit: DischargeFit, a3_variant="printed"):
    """Vectorized performance measures of one phase for arrays of greens."""
    t_egs = np.atleast_1d(np.asarray(t_egs, dtype=float))
    t_ege = np.atleast_1d(np.asarray(t_ege, dtype=float))
    g_e = np.atleast_1d(np.asarray(g_e, dtype=float))
    t_egs, t_ege, g_e = np.broadcast_arrays(t_egs, t_ege, g_e)
    res = StackedWaves([wave], [fit]).evaluate(t_egs[:, None], t_ege[:, None], g_e[:, None], a3_variant)
    return {k: v[:, 0] for k, v in res.items()}


def phase_performance(wave: WaveProfile, curve, timing: PhaseTiming, fit: DischargeFit, a3_variant="printed"):
    """Performance of one phase under one timing (scalar wrapper)."""
    res = performance_arrays(wave, timing.t_egs, min(timing.t_ege, wave.C), timing.g_e, fit, a3_variant)
    return PhasePerformance(**{k: (bool(v[0]) if k == "cleared" else float(v[0])) for k, v in res.items()})


def departure_line(t, t_egs, T_a, w_m):
    return w_m * (np.asarray(t, dtype=float) - t_egs - T_a)


def curve_csv(wave: WaveProfile, perf: PhasePerformance, t_egs: float, fit: DischargeFit, step=0.1) -> str:
    """Sampled ``S_a`` and ``S_d`` for plotting."""
    curve = ArrivalCurve(wave)
    n = int(np.floor(curve.t_end / step + 1e-9)) + 1
    ts = np.arange(n) * step
    sa = curve(ts)
    sd = departure_line(ts, t_egs, perf.T_a, fit.w_m)
    lines = ["t_s,S_a_m,S_d_m"] + [f"{t:.1f},{a:.6f},{d:.6f}" for t, a, d in zip(ts, sa, sd)]
    return "\n".join(lines) + "\n"


__all__ = [
    "ArrivalExceedsJamCapacity",
    "ArrivalCurve",
    "DischargeFit",
    "PhasePerformance",
    "PhaseTiming",
    "StackedWaves",
    "WaveProfile",
    "arrival_curve",
    "build_wave_profile",
    "cumulative_alpha",
    "curve_csv",
    "departure_line",
    "performance_arrays",
    "phase_performance",
]
