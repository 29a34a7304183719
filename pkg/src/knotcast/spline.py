"""Monotone piecewise cubic Hermite (PCHIP) interpolation.

Interior slopes use the Fritsch-Carlson weighted harmonic mean; endpoint
slopes use the one-sided three-point rule with monotonicity clamping.
Queries outside the knot range are clamped to the endpoint values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MonotoneSpline:
    knots_x: np.ndarray
    knots_y: np.ndarray
    derivs: np.ndarray

    def __post_init__(self):
        n = len(self.knots_x)
        if n < 2 or len(self.knots_y) != n or len(self.derivs) != n:
            raise ValueError("knots_x, knots_y and derivs need equal length >= 2")
        for arr in (self.knots_x, self.knots_y, self.derivs):
            arr.flags.writeable = False

    def __call__(self, q):
        return evaluate(self, q)

    @property
    def domain(self) -> tuple[float, float]:
        return float(self.knots_x[0]), float(self.knots_x[-1])


def _endpoint_slope(h0, h1, d0, d1):
    s = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1)
    if np.sign(s) != np.sign(d0):
        return 0.0
    if np.sign(d0) != np.sign(d1) and abs(s) > abs(3.0 * d0):
        return 3.0 * d0
    return s


def pchip_slopes(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Knot derivatives so that the Hermite interpolant is shape preserving."""
    h = np.diff(x)
    d = np.diff(y) / h
    n = len(x)
    m = np.zeros(n)
    if n == 2:
        m[:] = d[0]
        return m

    hk, hkm1 = h[1:], h[:-1]
    dk, dkm1 = d[1:], d[:-1]
    w1 = 2.0 * hk + hkm1
    w2 = hk + 2.0 * hkm1
    same = (np.sign(dk) * np.sign(dkm1)) > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        hm = (w1 + w2) / (w1 / dkm1 + w2 / dk)
    m[1:-1] = np.where(same, hm, 0.0)

    m[0] = _endpoint_slope(h[0], h[1], d[0], d[1])
    m[-1] = _endpoint_slope(h[-1], h[-2], d[-1], d[-2])
    return m


def fit_pchip(x, y) -> MonotoneSpline:
    x = np.array(x, dtype=float)
    y = np.array(y, dtype=float)
    if x.ndim != 1 or x.shape != y.shape:
        raise ValueError(f"x and y must be 1-D with equal length, got {x.shape} and {y.shape}")
    if len(x) < 2:
        raise ValueError("PCHIP needs at least two knots")
    if not np.all(np.isfinite(x)) or not np.all(np.isfinite(y)):
        raise ValueError("knots must be finite")
    if np.any(np.diff(x) <= 0):
        bad = int(np.argmax(np.diff(x) <= 0))
        raise ValueError(
            f"knot x must be strictly increasing (x[{bad}]={x[bad]!r}, x[{bad + 1}]={x[bad + 1]!r})"
        )
    return MonotoneSpline(x, y, pchip_slopes(x, y))


def evaluate(s: MonotoneSpline, q):
    """Evaluate the spline at scalar or array ``q``; clamps outside the domain."""
    scalar = np.ndim(q) == 0
    q = np.atleast_1d(np.asarray(q, dtype=float))
    x, y, m = s.knots_x, s.knots_y, s.derivs

    qc = np.clip(q, x[0], x[-1])
    k = np.clip(np.searchsorted(x, qc, side="right") - 1, 0, len(x) - 2)
    h = x[k + 1] - x[k]
    t = (qc - x[k]) / h
    t2 = t * t
    t3 = t2 * t
    out = (
        (2 * t3 - 3 * t2 + 1) * y[k]
        + (t3 - 2 * t2 + t) * h * m[k]
        + (-2 * t3 + 3 * t2) * y[k + 1]
        + (t3 - t2) * h * m[k + 1]
    )
    # Exact knot values, including the right endpoint.
    hit = qc == x[k]
    out[hit] = y[k][hit]
    hit = qc == x[k + 1]
    out[hit] = y[k + 1][hit]
    return float(out[0]) if scalar else out
