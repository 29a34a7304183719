import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from knotcast.data import CellSeries, soh_trajectory
from knotcast.knots import (
    KnotError,
    KnotPoints,
    KnotSpec,
    Trajectory,
    anchor_of,
    extract_knots,
    first_crossing,
    interp_error,
    reconstruct,
    smooth,
    uniform_levels,
)
from knotcast.spline import fit_pchip


def linear_series(last=900, start=0):
    c = np.arange(start, last + 60)
    soh = 0.98 - 0.18 * c / last
    return CellSeries("lin", c, soh, 1.0)


@pytest.mark.parametrize(
    "k, want",
    [(2, (89.0, 80.0)), (3, (92.0, 86.0, 80.0)), (4, (93.5, 89.0, 84.5, 80.0))],
)
def test_uniform_levels(k, want):
    spec = uniform_levels(k, 80, 98)
    assert spec.soh_levels == want
    assert 80.0 in spec.soh_levels and 98.0 not in spec.soh_levels


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 12), st.floats(50, 85), st.floats(1, 20))
def test_uniform_levels_properties(k, eol, span):
    spec = uniform_levels(k, eol, eol + span)
    assert spec.k == k and spec.soh_levels[-1] == eol
    assert all(b < a for a, b in zip(spec.soh_levels, spec.soh_levels[1:]))
    assert spec.soh_levels[0] < eol + span


def test_spec_validation():
    with pytest.raises(KnotError):
        uniform_levels(1)
    with pytest.raises(KnotError):
        KnotSpec((90.0, 90.0, 80.0))
    with pytest.raises(KnotError):
        KnotSpec((90.0, 85.0))
    assert KnotSpec.from_dict(uniform_levels(3).to_dict()) == uniform_levels(3)


def test_knot_points_identities():
    spec = uniform_levels(3)
    p = KnotPoints.from_intervals(spec, [100, 50, 30])
    np.testing.assert_allclose(p.cycles, [100, 150, 180])
    np.testing.assert_allclose(np.cumsum(p.intervals), p.cycles, atol=1e-9)
    with pytest.raises(KnotError):
        KnotPoints(spec, [100, 90, 180])
    with pytest.raises(KnotError):
        KnotPoints(spec, [-1, 90, 180])


def test_extract_linear():
    s = linear_series()
    np.testing.assert_allclose(extract_knots(s, uniform_levels(2)).cycles, [450, 900], atol=1e-9)
    np.testing.assert_allclose(extract_knots(s, uniform_levels(3)).cycles, [300, 600, 900], atol=1e-9)


def test_extract_never_reaches():
    c = np.arange(1, 200)
    s = CellSeries("short", c, 0.99 - 7e-4 * c, 1.0)
    with pytest.raises(KnotError, match="80"):
        extract_knots(s, uniform_levels(2))


def test_smooth_keeps_lines():
    y = 3.0 - 0.01 * np.arange(40)
    np.testing.assert_allclose(smooth(y, 5), y, atol=1e-12)


def test_extract_matches_brute_force_scan():
    cycles, soh = soh_trajectory("knee", 800, knee_cycle=600, noise=0.25, rng=2)
    s = CellSeries("k", cycles, soh, 1.0)
    spec = uniform_levels(4)
    got = extract_knots(s, spec).cycles
    sm = smooth(soh, 5) * 100
    dense = np.linspace(cycles[0], cycles[-1], 200_001)
    vals = np.interp(dense, cycles, sm)
    for level, g in zip(spec.soh_levels, got):
        assert abs(dense[np.argmax(vals <= level)] - g) <= 1.0


def test_first_crossing_cases():
    c = np.array([0.0, 1, 2, 3])
    assert first_crossing(c, np.array([4.0, 3, 2, 1]), 2.5) == 1.5
    assert first_crossing(c, np.array([4.0, 3, 2, 1]), 0.5) is None
    assert first_crossing(c, np.array([4.0, 1, 3, 0]), 2.0) == pytest.approx(2 / 3)


def test_reconstruct_linear_truth():
    s = linear_series()
    pts = KnotPoints(uniform_levels(2), [450.0, 900.0])
    rec = reconstruct(pts, (1.0, s.soh_at(1)))
    q = np.arange(1, 901)
    assert np.mean(np.abs(rec.at(q) - np.interp(q, s.cycles, s.soh))) < 0.005
    assert rec.at(900.0) == 0.8
    with pytest.raises(KnotError):
        reconstruct(pts, (500.0, 0.9))


def test_more_knots_help_on_knee_cell():
    cycles, soh = soh_trajectory("knee", 900, knee_cycle=700, noise=0.0)
    s = CellSeries("k", cycles, soh, 1.0)
    truth, a = Trajectory.of(s), anchor_of(s)
    e2 = interp_error(truth, extract_knots(s, uniform_levels(2)), a)
    e4 = interp_error(truth, extract_knots(s, uniform_levels(4)), a)
    assert e4 < e2


def test_interp_error_self_consistent():
    spec = uniform_levels(3)
    x = np.array([1.0, 300, 650, 900])
    y = np.concatenate([[0.985], spec.fractions])
    spline = fit_pchip(x, y)
    c = np.arange(1, 1000)
    s = CellSeries("p", c, spline(c.astype(float)), 1.0)
    d = interp_error(Trajectory.of(s), KnotPoints(spec, x[1:]), anchor_of(s))
    assert d < 1e-9
    # extraction on the unsmoothed interpolant recovers the knots
    np.testing.assert_allclose(extract_knots(s, spec, window=1).cycles, x[1:], atol=0.5)


def test_interp_error_hand_case():
    truth = Trajectory(np.array([1.0, 2.0, 3.0]), np.array([1.0, 0.9, 0.8]))
    pts = KnotPoints(KnotSpec((88.0, 80.0)), [2.0, 3.0])
    assert interp_error(truth, pts, (1.0, 1.0)) == pytest.approx(0.02 / 3, abs=1e-15)
    with pytest.raises(KnotError):
        interp_error(Trajectory(np.array([5000.0]), np.array([1.0])), pts, (1.0, 1.0))


def test_fleet_error_decreases_with_k(fleet):
    def mean_d(k):
        spec = uniform_levels(k)
        return np.mean(
            [interp_error(Trajectory.of(s), extract_knots(s, spec), anchor_of(s)) for s, _ in fleet]
        )

    d = [mean_d(k) for k in (2, 3, 4)]
    assert d[0] > d[1] > d[2]


def test_anchor_modes():
    s = linear_series(start=1)
    assert anchor_of(s, 1) == (1.0, s.soh_at(1))
    assert anchor_of(s, 3, "full") == (3.0, 1.0)
    with pytest.raises(KnotError):
        anchor_of(s, 1, "guess")
