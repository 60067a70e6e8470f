"""Independent reference computations used by the test suite.

Nothing here imports the closed-form code paths it checks.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def point_queue_cycle(tau, alpha, lam0, C, t_egs, t_ege, d0, v, w_m, v_l, resolution=50):
    """Per-vehicle event simulation of one steady-state cycle on one lane.

    Vehicles are split into ``resolution`` equal parcels so the result
    approaches the fluid limit. Parcels arriving after the effective
    green end wait into the next cycle and sit at the stop line in
    arrival order; later parcels join the back of the queue of the new
    cycle, which starts discharging once the carried-over platoon has
    crossed the stop line.

    Returns ``(total stopped delay in veh*s, max queue in m)``.
    """
    tau = np.asarray(tau, float)
    alpha = np.asarray(alpha, float)
    n = int(round(lam0 * C * resolution))
    if n == 0:
        return 0.0, 0.0
    mass = 1.0 / resolution
    spacing = d0 * mass
    # arrival instants by inverting the cumulative rate at parcel midpoints
    cum = np.concatenate([[0.0], np.cumsum(alpha * np.diff(tau))]) * lam0
    targets = (np.arange(n) + 0.5) / n * cum[-1]
    arrivals = []
    for u in targets:
        m = int(np.searchsorted(cum, u, side="right") - 1)
        m = min(m, len(alpha) - 1)
        arrivals.append(tau[m] + (u - cum[m]) / (lam0 * alpha[m]))
    arrivals = np.array(arrivals)

    carried = arrivals[arrivals >= t_ege]
    fresh = arrivals[arrivals < t_ege]

    delay = 0.0
    # carried-over platoon: stopped from the moment it joins the queue
    # (previous cycle) until the discharge wave reaches it
    for j, a in enumerate(carried):
        x = (j + 0.5) * spacing
        join = (a - C) - x / v
        release = t_egs + x / w_m
        delay += mass * (release - join)
    q_a = len(carried) * spacing
    front_free = t_egs + q_a / w_m + q_a / v_l

    back = 0.0
    max_back = 0.0
    for a in fresh:
        y = back + 0.5 * spacing
        join = a - y / v
        release = front_free + y / w_m
        if release <= join:
            break
        delay += mass * (release - join)
        back += spacing
        max_back = back
    return delay, q_a + max_back




def brute_force_split_sse(y, max_segments, min_bins):
    """Optimal SSE and breakpoints over all partitions with up to ``max_segments``."""
    y = np.asarray(y, float)
    n = y.size
    best = (math.inf, None)
    for m in range(1, max_segments + 1):
        for cuts in itertools.combinations(range(1, n), m - 1):
            bounds = (0,) + cuts + (n,)
            if any(b - a < min_bins for a, b in zip(bounds[:-1], bounds[1:])):
                continue
            sse = sum(((y[a:b] - y[a:b].mean()) ** 2).sum() for a, b in zip(bounds[:-1], bounds[1:]))
            if sse < best[0] - 1e-12:
                best = (sse, bounds)
    return best


def single_split_sses(y, min_bins):
    """SSE of every admissible single split (and of no split)."""
    y = np.asarray(y, float)
    n = y.size
    out = {None: float(((y - y.mean()) ** 2).sum())}
    for k in range(min_bins, n - min_bins + 1):
        out[k] = float(((y[:k] - y[:k].mean()) ** 2).sum() + ((y[k:] - y[k:].mean()) ** 2).sum())
    return out


def ols_line(t, s):
    """Closed-form least-squares slope and intercept."""
    t = np.asarray(t, float)
    s = np.asarray(s, float)
    tm, sm = t.mean(), s.mean()
    slope = ((t - tm) * (s - sm)).sum() / ((t - tm) ** 2).sum()
    return slope, sm - slope * tm


def synthetic_queue_observations(profile, lam0, n_cycles, red, penetration, seed, return_counts=False):
    """Queued-CV observations drawn from a time-dependent Poisson process.

    Each cycle starts at red. Every vehicle arriving during red queues
    behind all earlier arrivals of that cycle, so its position is the
    count of those arrivals. CVs are a Bernoulli sample of all vehicles.
    With ``return_counts`` the number of CVs of every kind is returned too.
    """
    from cfdopt.core_io import QueuedObservation

    rng = np.random.default_rng(seed)
    tau, alpha = np.asarray(profile.tau, float), np.asarray(profile.alpha, float)
    obs, n_cv = [], 0
    for _ in range(n_cycles):
        times = []
        for a, b, al in zip(tau[:-1], tau[1:], alpha):
            k = rng.poisson(lam0 * al * (b - a))
            times.append(rng.uniform(a, b, k))
        times = np.sort(np.concatenate(times))
        is_cv = rng.random(times.size) < penetration
        n_cv += int(is_cv.sum())
        for i in np.nonzero(is_cv & (times < red))[0]:
            obs.append(
                QueuedObservation(n_q=int(i), n_i=int(i), t_ec=float(times[i]), t_e=float(times[i]),
                                  queued_more_than_once=False, phase_id=1)
            )
    if return_counts:
        return obs, n_cv
    return obs
