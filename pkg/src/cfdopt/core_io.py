"""Trajectory ingestion, queue event detection and WMLE observations."""

from __future__ import annotations

import csv
import io
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .arrival_profile import expected_cycle_arrival_time

logger = logging.getLogger(__name__)

CSV_HEADER = ("vehicle_id", "phase_id", "t_s", "x_m", "speed_mps")


class TrajectoryFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TrajectoryPoint:
    vehicle_id: str
    t: float
    x: float
    speed: float
    phase_id: int


@dataclass
class Trajectory:
    vehicle_id: str
    phase_id: int
    t: np.ndarray
    x: np.ndarray
    speed: np.ndarray

    def __len__(self):
        return int(self.t.size)

    @property
    def points(self) -> list[TrajectoryPoint]:
        return [
            TrajectoryPoint(self.vehicle_id, float(t), float(x), float(v), self.phase_id)
            for t, x, v in zip(self.t, self.x, self.speed)
        ]

    def shifted(self, dt: float) -> "Trajectory":
        return Trajectory(self.vehicle_id, self.phase_id, self.t + dt, self.x.copy(), self.speed.copy())


@dataclass(frozen=True)
class QueueEvent:
    join_t: float
    join_x: float
    leave_t: float
    leave_x: float
    episode_index: int


@dataclass
class QueuedObservation:
    n_q: int
    n_i: int
    t_ec: float
    t_e: float
    queued_more_than_once: bool
    phase_id: int
    vehicle_id: str = ""
    n_last: int | None = None  # position of the final stop (overflow detection)

    @property
    def overflow_position(self) -> int:
        return self.n_q if self.n_last is None else self.n_last


@dataclass
class ParseReport:
    rows: int = 0
    malformed: int = 0
    warnings: list = field(default_factory=list)


def parse_trajectories(stream) -> tuple[list[Trajectory], ParseReport]:
    """Read trajectory CSV rows into per-vehicle, per-phase trajectories.

    Malformed rows are skipped and counted. A vehicle with repeated
    timestamps is dropped with a warning.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    reader = csv.reader(stream)
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
        raise TrajectoryFormatError(f"missing or wrong header; expected {','.join(CSV_HEADER)}")
    report = ParseReport()
    groups = defaultdict(list)
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        report.rows += 1
        try:
            vid = row[0].strip()
            phase = int(row[1])
            t, x, v = float(row[2]), float(row[3]), float(row[4])
            if len(row) != 5 or not vid or not 1 <= phase <= 8 or v < 0:
                raise ValueError
            if not all(math.isfinite(a) for a in (t, x, v)):
                raise ValueError
        except (ValueError, IndexError):
            report.malformed += 1
            continue
        groups[(vid, phase)].append((t, x, v))

    out = []
    for (vid, phase), rows in groups.items():
        arr = np.array(sorted(rows), dtype=float)
        if np.any(np.diff(arr[:, 0]) <= 0):
            msg = f"vehicle {vid}: repeated timestamps, dropped"
            logger.warning(msg)
            report.warnings.append(msg)
            continue
        if arr.shape[0] < 2:
            msg = f"vehicle {vid}: fewer than 2 points, dropped"
            logger.warning(msg)
            report.warnings.append(msg)
            continue
        out.append(Trajectory(vid, phase, arr[:, 0], arr[:, 1], arr[:, 2]))
    out.sort(key=lambda tr: (tr.t[0], tr.vehicle_id, tr.phase_id))
    if report.malformed:
        logger.warning("%d malformed trajectory rows skipped", report.malformed)
    return out, report


def read_trajectories(path) -> tuple[list[Trajectory], ParseReport]:
    with open(path, newline="") as fh:
        return parse_trajectories(fh)


def write_trajectories(trajectories, stream) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for tr in trajectories:
        for t, x, v in zip(tr.t, tr.x, tr.speed):
            w.writerow([tr.vehicle_id, tr.phase_id, f"{t:.3f}", f"{x:.3f}", f"{v:.3f}"])


def detect_queue_events(traj: Trajectory, stop_speed=2.0, min_stop_duration=2.0) -> list[QueueEvent]:
    """Maximal runs of slow samples upstream of the stop line."""
    slow = (traj.speed < stop_speed) & (traj.x >= 0)
    events = []
    i, n = 0, len(traj)
    while i < n:
        if not slow[i]:
            i += 1
            continue
        j = i
        while j + 1 < n and slow[j + 1]:
            j += 1
        if traj.t[j] - traj.t[i] >= min_stop_duration:
            events.append(
                QueueEvent(
                    join_t=float(traj.t[i]),
                    join_x=float(traj.x[i]),
                    leave_t=float(traj.t[j]),
                    leave_x=float(min(traj.x[j], traj.x[i])),
                    episode_index=len(events),
                )
            )
        i = j + 1
    return events


def stop_line_crossing(traj: Trajectory):
    """Interpolated ``(t, speed)`` at ``x = 0``, or ``None`` if never crossed."""
    after = np.nonzero(traj.x < 0)[0]
    if after.size == 0:
        return None
    k = int(after[0])
    if k == 0:
        return float(traj.t[0]), float(traj.speed[0])
    x0, x1 = traj.x[k - 1], traj.x[k]
    frac = x0 / (x0 - x1) if x0 != x1 else 1.0
    t = traj.t[k - 1] + frac * (traj.t[k] - traj.t[k - 1])
    return float(t), float(traj.speed[k])


@dataclass
class CVRecord:
    """Everything the estimators need from one CV trajectory."""

    vehicle_id: str
    phase_id: int
    events: list
    crossing: tuple | None
    t_e: float | None

    @property
    def queued(self) -> bool:
        return bool(self.events)


def summarize(traj: Trajectory, v: float, stop_speed=2.0, min_stop_duration=2.0) -> CVRecord:
    if v <= 0:
        raise ValueError("free-flow speed must be positive")
    events = detect_queue_events(traj, stop_speed, min_stop_duration)
    crossing = stop_line_crossing(traj)
    if events:
        first = events[0]
        t_e = first.join_t + first.join_x / v
    elif crossing is not None:
        t_e = crossing[0]
    else:
        t_e = None
    return CVRecord(traj.vehicle_id, traj.phase_id, events, crossing, t_e)


def build_observations(records, C, dphi, d0) -> list[QueuedObservation]:
    """Observations of queued CVs; each uses its earliest queue episode.

    ``records`` are :class:`CVRecord` values (see :func:`summarize`).
    ``dphi`` may be a float or a mapping ``phase_id -> dphi``.
    """
    if d0 <= 0:
        raise ValueError("jam spacing must be positive")
    out = []
    for rec in records:
        if not rec.events:
            continue
        first = rec.events[0]
        n_q = int(math.floor(first.join_x / d0 + 1e-9))
        n_last = int(math.floor(rec.events[-1].join_x / d0 + 1e-9))
        shift = dphi[rec.phase_id] if isinstance(dphi, dict) else dphi
        t_ec = expected_cycle_arrival_time(rec.t_e, C, shift)
        out.append(
            QueuedObservation(
                n_q=n_q,
                n_i=n_q,
                t_ec=t_ec,
                t_e=rec.t_e,
                queued_more_than_once=len(rec.events) > 1,
                phase_id=rec.phase_id,
                vehicle_id=rec.vehicle_id,
                n_last=n_last,
            )
        )
    return out


def group_by_phase(items, key=lambda it: it.phase_id) -> dict:
    grouped = defaultdict(list)
    for it in items:
        grouped[key(it)].append(it)
    return dict(grouped)


def observations_from_trajectories(trajectories, v, C, dphi, d0, stop_speed=2.0, min_stop_duration=2.0):
    """Summarize raw trajectories and build observations in one call.

    ``v`` maps ``phase_id -> free-flow speed`` (a float applies to all).
    """
    records = []
    for tr in trajectories:
        speed = v[tr.phase_id] if isinstance(v, dict) else v
        if speed <= 0:
            raise ValueError(f"phase {tr.phase_id}: free-flow speed must be positive")
        records.append(summarize(tr, speed, stop_speed, min_stop_duration))
    return build_observations(records, C, dphi, d0)
