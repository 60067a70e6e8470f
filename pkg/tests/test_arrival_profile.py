import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfdopt.arrival_profile import (
    ArrivalProfile,
    ArrivalProfileEstimator,
    CycleHistogram,
    NoArrivalsError,
    build_histogram,
    cumulative_alpha,
    expected_cycle_arrival_time,
    fit_piecewise_constant,
    histogram_sse,
    kde_smooth,
)
from oracles import brute_force_split_sse, single_split_sses


def hist_from(heights, C=None, bin_width=1.0):
    heights = np.asarray(heights, float)
    C = C if C is not None else heights.size * bin_width
    edges = np.append(np.arange(heights.size) * bin_width, C)
    return CycleHistogram(C=float(C), edges=edges, heights=heights, n_samples=heights.size)


@pytest.mark.parametrize("args, want", [((250, 80, 0), 10.0), ((10, 80, 75), 15.0), ((33.5, 80, 33.5), 0.0)])
def test_cycle_arrival_examples(args, want):
    assert expected_cycle_arrival_time(*args) == pytest.approx(want)


def test_cycle_arrival_rejects_bad_cycle():
    with pytest.raises(ValueError):
        expected_cycle_arrival_time(5.0, 0.0)


def test_histogram_uniform():
    h = build_histogram(np.arange(80) + 0.5, 80)
    np.testing.assert_allclose(h.heights, 1.0)


def test_histogram_single_bin():
    h = build_histogram([12.3] * 5, 80)
    assert h.heights[12] == pytest.approx(80.0)
    assert h.heights.sum() == pytest.approx(80.0)


def test_histogram_two_wide_bins():
    h = build_histogram([1, 2, 41, 42, 43, 44, 45, 46], 80, bin_width=40)
    np.testing.assert_allclose(h.heights, [0.5, 1.5])


def test_histogram_empty():
    with pytest.raises(NoArrivalsError, match="no CV arrivals"):
        build_histogram([], 80)


def test_kde_constant_fixed_point():
    h = hist_from(np.ones(80))
    np.testing.assert_allclose(kde_smooth(h, 4.0).heights, 1.0, atol=1e-9)


def test_kde_spike_symmetric_mass():
    y = np.zeros(80)
    y[40] = 80.0
    s = kde_smooth(hist_from(y), 3.0)
    assert s.mass() == pytest.approx(80.0)
    np.testing.assert_allclose(s.heights[41:50], s.heights[39:30:-1], rtol=1e-9)


def test_kde_wraps_around_cycle():
    y = np.zeros(80)
    y[0] = 80.0
    s = kde_smooth(hist_from(y), 3.0)
    assert s.heights[79] > 1.0
    assert s.heights[79] == pytest.approx(s.heights[1])


def test_kde_bad_bandwidth():
    with pytest.raises(ValueError):
        kde_smooth(hist_from(np.ones(10)), 0.0)


def test_flat_input_one_segment():
    p = fit_piecewise_constant(hist_from(np.ones(80)))
    assert p.M == 1 and p.alpha[0] == pytest.approx(1.0)


def test_two_level_step():
    y = np.r_[np.full(30, 1.5), np.full(50, 0.5)]
    y *= 80 / y.sum()
    p = fit_piecewise_constant(hist_from(y))
    np.testing.assert_allclose(p.tau, [0, 30, 80])
    sse, bounds = brute_force_split_sse(y, 2, 10)
    assert bounds == (0, 30, 80) and sse == pytest.approx(0.0, abs=1e-12)


def test_defaults():
    est = ArrivalProfileEstimator()
    assert est.max_segments == 9 and est.min_segment_len == 10.0


def test_infeasible_segment_count_reduced(caplog):
    p = fit_piecewise_constant(hist_from(np.r_[np.full(25, 2.0), np.full(25, 0.1)]), 9, 10.0, 0.0)
    assert p.M <= 5
    assert "infeasible" in caplog.text


def test_cumulative_alpha_examples():
    p = ArrivalProfile(C=80.0, tau=np.array([0.0, 30.0, 80.0]), alpha=np.array([1.5, 0.5]))
    assert cumulative_alpha(p, 0.0) == 0.0
    assert cumulative_alpha(p, 50.0) == pytest.approx(55.0)
    # the step above is not normalized; a normalized one ends at C
    q = ArrivalProfile(C=80.0, tau=np.array([0.0, 30.0, 80.0]), alpha=np.array([1.5, 0.7]))
    assert cumulative_alpha(q, 80.0) == pytest.approx(80.0)
    with pytest.raises(ValueError):
        cumulative_alpha(p, 81.0)


def test_profile_json_round_trip():
    p = ArrivalProfile(C=80.0, tau=np.array([0.0, 30.0, 80.0]), alpha=np.array([1.5, 0.5]))
    q = ArrivalProfile.from_dict(p.to_dict())
    np.testing.assert_array_equal(q.tau, p.tau)
    np.testing.assert_array_equal(q.alpha, p.alpha)


def test_uniform_fallback_for_no_arrivals():
    est = ArrivalProfileEstimator(C=90).fit([])
    assert est.profile_.M == 1 and est.profile_.C == 90


def test_kde_only_below_threshold():
    t = np.r_[np.full(20, 5.2), np.full(20, 55.7)]
    lo = ArrivalProfileEstimator(C=80).fit(t, penetration=0.05).histogram_
    hi = ArrivalProfileEstimator(C=80).fit(t, penetration=0.5).histogram_
    assert np.count_nonzero(hi.heights) == 2
    assert np.count_nonzero(lo.heights > 1e-6) > 2


@st.composite
def step_histograms(draw):
    C = draw(st.integers(30, 60))
    m = draw(st.integers(1, 3))
    cuts = sorted(draw(st.lists(st.integers(10, C - 10), min_size=m - 1, max_size=m - 1, unique=True)))
    bounds = [0] + cuts + [C]
    if any(b - a < 10 for a, b in zip(bounds[:-1], bounds[1:])):
        bounds = [0, C]
    levels = draw(st.lists(st.floats(0.05, 3.0), min_size=len(bounds) - 1, max_size=len(bounds) - 1))
    y = np.concatenate([np.full(b - a, lv) for a, b, lv in zip(bounds[:-1], bounds[1:], levels)])
    return y * C / y.sum()


@settings(max_examples=60, deadline=None)
@given(step_histograms())
def test_greedy_matches_exhaustive_on_exact_steps(y):
    p = fit_piecewise_constant(hist_from(y), 3, 10.0, 0.0)
    sse, _ = brute_force_split_sse(y, 3, 10)
    assert histogram_sse(hist_from(y), p) == pytest.approx(sse, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 5), min_size=20, max_size=80), st.integers(1, 9))
def test_greedy_dominance(vals, max_segments):
    y = np.asarray(vals) + 1e-3
    y *= y.size / y.sum()
    h = hist_from(y)
    p = fit_piecewise_constant(h, max_segments, 10.0, 0.0)
    singles = single_split_sses(y, 10)
    got = histogram_sse(h, p)
    assert got <= singles[None] + 1e-9
    if max_segments >= 2 and len(singles) > 1:
        assert got <= min(singles.values()) + 1e-9


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 200), min_size=1, max_size=200), st.integers(1, 9), st.floats(0.0, 0.05))
def test_normalization_and_min_length(ts, max_segments, gain):
    t_ec = expected_cycle_arrival_time(np.asarray(ts), 80.0)
    p = fit_piecewise_constant(build_histogram(t_ec, 80.0), max_segments, 10.0, gain)
    assert abs(p.integral() - 80.0) <= 1e-6 * 80
    assert np.all(np.diff(p.tau) >= 10.0 - 1e-9)
    assert np.all(p.alpha >= 0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 400), min_size=5, max_size=100), st.integers(1, 79))
def test_reference_shift_rotates_histogram(ts, shift):
    ts = np.round(np.asarray(ts)) + 0.5  # bin centres keep quantization exact
    a = ArrivalProfileEstimator(C=80, dphi=0).fit(ts).histogram_.heights
    b = ArrivalProfileEstimator(C=80, dphi=shift).fit(ts).histogram_.heights
    np.testing.assert_allclose(np.roll(a, -shift), b, atol=1e-9)
