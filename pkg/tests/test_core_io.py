import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfdopt.arrival_profile import expected_cycle_arrival_time
from cfdopt.core_io import (
    Trajectory,
    TrajectoryFormatError,
    build_observations,
    detect_queue_events,
    observations_from_trajectories,
    parse_trajectories,
    stop_line_crossing,
    summarize,
    write_trajectories,
)

HEADER = "vehicle_id,phase_id,t_s,x_m,speed_mps\n"


def traj(speeds, xs=None, t0=0.0, vid="a", phase=2):
    speeds = np.asarray(speeds, float)
    t = t0 + np.arange(speeds.size, dtype=float)
    if xs is None:
        xs = np.linspace(100, 50, speeds.size)
    return Trajectory(vid, phase, t, np.asarray(xs, float), speeds)


def test_three_rows_one_vehicle():
    text = HEADER + "v1,2,0,30,10\nv1,2,1,20,10\nv1,2,2,10,10\n"
    trs, rep = parse_trajectories(io.StringIO(text))
    assert len(trs) == 1 and len(trs[0]) == 3
    assert rep.malformed == 0 and rep.warnings == []


def test_header_only_is_empty():
    trs, rep = parse_trajectories(io.StringIO(HEADER))
    assert trs == [] and rep.warnings == []


def test_missing_header_is_fatal():
    with pytest.raises(TrajectoryFormatError):
        parse_trajectories(io.StringIO("v1,2,0,30,10\n"))


def test_repeated_timestamps_drop_vehicle():
    text = HEADER + "v1,2,0,30,10\nv1,2,0,20,10\nv2,2,0,30,10\nv2,2,1,20,10\n"
    trs, rep = parse_trajectories(io.StringIO(text))
    assert [tr.vehicle_id for tr in trs] == ["v2"]
    assert len(rep.warnings) == 1


def test_malformed_rows_counted():
    text = HEADER + "v1,2,0,30,10\nv1,2,x,20,10\nv1,9,1,20,10\nv1,2,2,10,10\n"
    trs, rep = parse_trajectories(io.StringIO(text))
    assert rep.malformed == 2 and len(trs[0]) == 2


def test_constant_speed_no_events():
    assert detect_queue_events(traj([12] * 8)) == []


def test_single_stop_spans_slow_samples():
    ev = detect_queue_events(traj([12, 0.5, 0.4, 0.5, 11], xs=[40, 30, 30, 29, 20]), 2.0, 2.0)
    assert len(ev) == 1
    assert (ev[0].join_t, ev[0].leave_t) == (1.0, 3.0)
    assert ev[0].episode_index == 0


def test_two_stops_two_episodes():
    sp = [12, 0.5, 0.4, 0.5, 5, 6, 0.3, 0.2, 0.1, 10]
    xs = [90, 80, 80, 80, 75, 69, 60, 60, 60, 50]
    ev = detect_queue_events(traj(sp, xs))
    assert [e.episode_index for e in ev] == [0, 1]
    for e in ev:
        assert e.join_t <= e.leave_t and e.join_x >= e.leave_x >= 0


def test_short_stop_ignored():
    assert detect_queue_events(traj([12, 0.5, 0.5, 12], xs=[40, 30, 30, 20])) == []


def test_post_stop_line_slow_samples_not_queued():
    assert detect_queue_events(traj([5, 1, 1, 1, 5], xs=[5, -1, -1.5, -2, -8])) == []


def _one_obs(join_t, join_x, v=14.0, C=80.0, dphi=0.0, d0=7.0):
    tr = traj([10, 0.0, 0.0, 0.0, 10], xs=[join_x + 14, join_x, join_x, join_x, join_x - 10], t0=join_t - 1)
    rec = summarize(tr, v)
    return build_observations([rec], C, dphi, d0)[0]


def test_position_at_stop_line_is_zero():
    assert _one_obs(100, 0.0).n_q == 0


def test_position_floor_division():
    assert _one_obs(100, 21.0).n_q == 3


def test_expected_arrival_hand_value():
    ob = _one_obs(100.0, 28.0)
    assert ob.t_e == pytest.approx(102.0)
    assert ob.t_ec == pytest.approx(22.0)


def test_nonpositive_speed_rejected():
    with pytest.raises(ValueError):
        observations_from_trajectories([traj([10, 0, 0, 0, 10])], 0.0, 80, 0, 7)


def test_crossing_interpolated():
    tr = traj([10, 10, 10], xs=[10, 2, -8])
    t, _ = stop_line_crossing(tr)
    assert t == pytest.approx(1.2)


def test_waiting_at_stop_line_is_not_crossing():
    tr = traj([5, 0, 0, 0, 5], xs=[5, 0, 0, 0, -5])
    t, _ = stop_line_crossing(tr)
    assert t == pytest.approx(3.0)


@settings(max_examples=200, deadline=None)
@given(
    t_e=st.floats(-1e5, 1e5, allow_nan=False),
    C=st.floats(30, 200),
    frac=st.floats(0, 1, exclude_max=True),
)
def test_cycle_arrival_time_in_range(t_e, C, frac):
    t_ec = expected_cycle_arrival_time(t_e, C, frac * C)
    assert 0 <= t_ec < C


@settings(max_examples=50, deadline=None)
@given(shift=st.floats(-5000, 5000, allow_nan=False), join_x=st.floats(0, 300))
def test_position_invariant_under_time_shift(shift, join_x):
    tr = traj([10, 0.0, 0.0, 0.0, 10], xs=[join_x + 14, join_x, join_x, join_x, join_x - 10], t0=500)
    a = build_observations([summarize(tr, 14.0)], 80, 0, 7)[0]
    b = build_observations([summarize(tr.shifted(shift), 14.0)], 80, 0, 7)[0]
    assert a.n_q == b.n_q


def test_round_trip_reproduces_observations():
    rng = np.random.default_rng(3)
    trs = []
    for i in range(20):
        n = 30
        sp = np.where((np.arange(n) > 5) & (np.arange(n) < 5 + rng.integers(3, 15)), 0.0, 12.0)
        x = 200 - np.cumsum(sp)
        trs.append(Trajectory(f"v{i}", 1 + i % 8, 100.0 * i + np.arange(n), x, sp))
    buf = io.StringIO()
    write_trajectories(trs, buf)
    back, _ = parse_trajectories(io.StringIO(buf.getvalue()))
    a = observations_from_trajectories(trs, 12.0, 80, 5, 7)
    b = observations_from_trajectories(back, 12.0, 80, 5, 7)
    key = lambda o: (o.vehicle_id, o.n_q, round(o.t_ec, 6))
    assert sorted(map(key, a)) == sorted(map(key, b))
    assert all(math.isfinite(o.t_ec) for o in b)
