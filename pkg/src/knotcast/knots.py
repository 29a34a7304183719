"""Knot SOH levels, observed knot cycles, and trajectory reconstruction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import CellSeries
from .spline import MonotoneSpline, evaluate, fit_pchip


class KnotError(ValueError):
    pass


@dataclass(frozen=True)
class KnotSpec:
    """SOH levels in percent, high to low, ending at the EOL level."""

    soh_levels: tuple[float, ...]
    eol_level: float = 80.0
    top_level: float = 98.0

    def __post_init__(self):
        levels = tuple(float(v) for v in self.soh_levels)
        object.__setattr__(self, "soh_levels", levels)
        if len(levels) < 2:
            raise KnotError("need at least two knots")
        if any(b >= a for a, b in zip(levels, levels[1:])):
            raise KnotError(f"knot levels must be strictly decreasing, got {levels}")
        if levels[-1] != self.eol_level:
            raise KnotError(f"last knot level must be the EOL level {self.eol_level}, got {levels[-1]}")

    @property
    def k(self) -> int:
        return len(self.soh_levels)

    @property
    def fractions(self) -> np.ndarray:
        return np.array(self.soh_levels) / 100.0

    def to_dict(self) -> dict:
        return {"soh_levels": list(self.soh_levels), "eol_level": self.eol_level, "top_level": self.top_level}

    @classmethod
    def from_dict(cls, d: dict) -> "KnotSpec":
        return cls(tuple(d["soh_levels"]), d.get("eol_level", 80.0), d.get("top_level", 98.0))


@dataclass(frozen=True)
class KnotPoints:
    spec: KnotSpec
    cycles: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.cycles, dtype=float)
        object.__setattr__(self, "cycles", c)
        if c.shape != (self.spec.k,):
            raise KnotError(f"expected {self.spec.k} knot cycles, got shape {c.shape}")
        if not np.all(np.isfinite(c)) or c[0] <= 0 or np.any(np.diff(c) <= 0):
            raise KnotError(f"knot cycles must be positive and strictly increasing, got {c.tolist()}")

    @property
    def intervals(self) -> np.ndarray:
        return np.diff(self.cycles, prepend=0.0)

    @classmethod
    def from_intervals(cls, spec: KnotSpec, h) -> "KnotPoints":
        return cls(spec, np.cumsum(np.asarray(h, dtype=float)))


@dataclass(frozen=True)
class Trajectory:
    """SOH (fraction) against cycle number."""

    cycles: np.ndarray
    soh: np.ndarray
    spline: MonotoneSpline | None = None

    @classmethod
    def of(cls, series: CellSeries) -> "Trajectory":
        return cls(series.cycles.astype(float), series.soh)

    def at(self, q):
        if self.spline is not None:
            return evaluate(self.spline, q)
        return np.interp(q, self.cycles, self.soh)


def uniform_levels(k: int, eol: float = 80.0, top: float = 98.0) -> KnotSpec:
    if k < 2:
        raise KnotError(f"k must be >= 2, got {k}")
    if not top > eol:
        raise KnotError("top level must exceed the EOL level")
    step = (top - eol) / k
    levels = tuple(round(eol + step * j, 10) for j in range(k - 1, 0, -1)) + (float(eol),)
    return KnotSpec(levels, eol, top)


def smooth(y: np.ndarray, window: int = 5) -> np.ndarray:
    """Centred moving average; odd reflection at the ends keeps linear data exact."""
    y = np.asarray(y, dtype=float)
    if window <= 1 or len(y) < 3:
        return y.copy()
    half = min(window // 2, len(y) - 1)
    left = 2 * y[0] - y[half:0:-1]
    right = 2 * y[-1] - y[-2 : -half - 2 : -1]
    padded = np.concatenate([left, y, right])
    kernel = np.full(2 * half + 1, 1.0 / (2 * half + 1))
    return np.convolve(padded, kernel, mode="valid")


def first_crossing(cycles: np.ndarray, values: np.ndarray, level: float) -> float | None:
    """First cycle where ``values`` falls to ``level``, linearly interpolated."""
    below = np.nonzero(values <= level)[0]
    if len(below) == 0:
        return None
    j = int(below[0])
    if j == 0:
        return float(cycles[0]) if values[0] == level else None
    y0, y1 = values[j - 1], values[j]
    c0, c1 = cycles[j - 1], cycles[j]
    return float(c0 + (y0 - level) / (y0 - y1) * (c1 - c0))


def extract_knots(series: CellSeries, spec: KnotSpec, window: int = 5) -> KnotPoints:
    cycles = series.cycles.astype(float)
    s = smooth(series.soh, window) * 100.0
    out = []
    for level in spec.soh_levels:
        if s[0] <= level:
            raise KnotError(
                f"cell {series.cell_id!r}: SOH starts at {s[0]:.3f}% which is not above level {level}%"
            )
        c = first_crossing(cycles, s, level)
        if c is None:
            raise KnotError(f"cell {series.cell_id!r} never reaches SOH level {level}%")
        out.append(c)
    try:
        return KnotPoints(spec, np.array(out))
    except KnotError as exc:
        raise KnotError(f"cell {series.cell_id!r}: {exc}") from None


def reconstruct(points: KnotPoints, anchor: tuple[float, float]) -> Trajectory:
    """PCHIP through the anchor (cycle, SOH fraction) and the knots."""
    a_cycle, a_soh = float(anchor[0]), float(anchor[1])
    if not a_cycle < points.cycles[0]:
        raise KnotError(
            f"anchor cycle {a_cycle} must precede the first knot cycle {points.cycles[0]:.3f}"
        )
    x = np.concatenate([[a_cycle], points.cycles])
    y = np.concatenate([[a_soh], points.spec.fractions])
    spline = fit_pchip(x, y)
    return Trajectory(x, y, spline)


def interp_error(truth: Trajectory, points: KnotPoints, anchor) -> float:
    """Mean absolute SOH error over the integer cycles from the anchor to the last knot."""
    rec = reconstruct(points, anchor)
    lo, hi = rec.spline.domain
    mask = (truth.cycles >= lo) & (truth.cycles <= hi)
    if not np.any(mask):
        raise KnotError("truth and reconstruction do not overlap")
    return float(np.mean(np.abs(truth.soh[mask] - evaluate(rec.spline, truth.cycles[mask]))))


def anchor_of(series: CellSeries, cycle: int = 1, mode: str = "measured") -> tuple[float, float]:
    """Left anchor of a reconstruction: the measured SOH at ``cycle`` or full health."""
    if mode == "measured":
        return float(cycle), series.soh_at(cycle)
    if mode == "full":
        return float(cycle), 1.0
    raise KnotError(f"unknown anchor mode {mode!r}")
