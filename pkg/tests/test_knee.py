import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from knotcast.knee import (
    bw_jacobian,
    bw_model,
    class_index,
    fit_bacon_watts,
    knee_class,
    knee_of,
    write_fits_csv,
)
from knotcast.data import CellSeries

TRUE = np.array([1.0, -1e-4, -4e-4, 500.0, 40.0])
X = np.arange(1.0, 1001.0)


def test_noiseless_recovery():
    fit = fit_bacon_watts(X, bw_model(X, TRUE))
    np.testing.assert_allclose(fit.params, TRUE, rtol=1e-6)
    assert fit.residual_rms < 1e-10
    assert fit.converged


def test_noisy_recovery_over_seeds():
    hits = 0
    for seed in range(50):
        y = bw_model(X, TRUE) + np.random.default_rng(seed).normal(0, 1e-3, len(X))
        hits += abs(fit_bacon_watts(X, y).x1 - 500.0) <= 10.0
    assert hits >= 45


def test_jacobian_matches_finite_differences(rng):
    for _ in range(20):
        p = np.array(
            [rng.uniform(0.8, 1.2), rng.uniform(-1e-3, 0), rng.uniform(-1e-3, 1e-3), rng.uniform(100, 900), rng.uniform(5, 200)]
        )
        J = bw_jacobian(X, p)
        for j in range(5):
            e = 1e-6 * max(abs(p[j]), 1e-3)
            up, down = p.copy(), p.copy()
            up[j] += e
            down[j] -= e
            fd = (bw_model(X, up) - bw_model(X, down)) / (2 * e)
            scale = np.max(np.abs(fd)) + 1e-300
            assert np.max(np.abs(J[:, j] - fd)) / scale < 1e-6


@settings(max_examples=20, deadline=None)
@given(st.floats(-300, 5000))
def test_shift_invariance(c):
    y = bw_model(X, TRUE) + np.random.default_rng(3).normal(0, 5e-4, len(X))
    base = fit_bacon_watts(X, y)
    init = base.params + np.array([0, 0, 0, c, 0])
    moved = fit_bacon_watts(X + c, y, init=init)
    assert moved.x1 - c == pytest.approx(base.x1, abs=1e-6 * 1000)
    np.testing.assert_allclose(
        [moved.alpha0, moved.alpha1, moved.alpha2, moved.gamma],
        [base.alpha0, base.alpha1, base.alpha2, base.gamma],
        rtol=1e-6,
        atol=1e-9,
    )


def test_straight_line_flagged_low_curvature():
    y = 1.0 - 2e-4 * X + np.random.default_rng(0).normal(0, 1e-3, len(X))
    fit = fit_bacon_watts(X, y)
    assert fit.converged
    assert fit.low_curvature
    assert not fit_bacon_watts(X, bw_model(X, TRUE)).low_curvature


def test_cost_never_increases():
    y = bw_model(X, TRUE) + np.random.default_rng(5).normal(0, 1e-3, len(X))
    costs = fit_bacon_watts(X, y).diagnostics["costs"]
    assert all(b <= a for a, b in zip(costs, costs[1:]))


def test_x1_within_data_range():
    y = 1.0 - 1e-6 * X**2
    fit = fit_bacon_watts(X, y)
    assert X[0] <= fit.x1 <= X[-1]


def test_input_validation():
    with pytest.raises(ValueError, match="10 points"):
        fit_bacon_watts(X[:5], X[:5])
    with pytest.raises(ValueError):
        fit_bacon_watts(X[::-1], X)


@pytest.mark.parametrize("x1, want", [(0.0, "C1"), (400, "C1"), (499.9, "C1"), (500, "C2"), (1099.99, "C2"), (1100, "C3")])
def test_classes(x1, want):
    assert knee_class(x1) == want
    assert class_index(x1) == int(want[1]) - 1


def test_negative_knee_rejected():
    with pytest.raises(ValueError):
        knee_class(-1.0)


def test_fits_csv(tmp_path):
    s = CellSeries("c9", X.astype(int), bw_model(X, TRUE) * 1.1, 1.1)
    fit = knee_of(s)
    write_fits_csv([("c9", fit)], tmp_path / "fits.csv")
    rows = list(csv.reader(open(tmp_path / "fits.csv")))
    assert rows[0] == ["cell_id", "x1", "gamma", "alpha0", "alpha1", "alpha2", "residual_rms", "class"]
    assert rows[1][0] == "c9" and rows[1][-1] == "C2"
    assert float(rows[1][1]) == pytest.approx(500, abs=1e-3)
