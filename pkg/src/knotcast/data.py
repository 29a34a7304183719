"""Cycle records, fixed-size input matrices, synthetic fleets and CSV I/O."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

PATTERNS = ("sublinear", "linear", "knee")

CYCLES_HEADER = ["cell_id", "cycle", "t_s", "voltage_v", "current_a"]
CAPACITY_HEADER = ["cell_id", "cycle", "discharge_capacity_ah", "nominal_capacity_ah"]


class DataError(ValueError):
    """Malformed or inconsistent cycling data."""


@dataclass(frozen=True)
class CycleRecord:
    cell_id: str
    cycle_index: int
    t: np.ndarray
    v: np.ndarray
    i: np.ndarray
    discharge_capacity: float

    def __post_init__(self):
        t, v, i = (np.asarray(a, dtype=float) for a in (self.t, self.v, self.i))
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "i", i)
        where = f"cell {self.cell_id!r} cycle {self.cycle_index}"
        if not (t.ndim == v.ndim == i.ndim == 1) or not (len(t) == len(v) == len(i)):
            raise DataError(f"{where}: t, v, i must be 1-D with equal length")
        if len(t) < 2:
            raise DataError(f"{where}: need at least 2 samples, got {len(t)}")
        dt = np.diff(t)
        if np.any(dt <= 0):
            k = int(np.argmax(dt <= 0))
            raise DataError(
                f"{where}: time not strictly increasing at sample {k + 1} "
                f"(t={t[k]!r} then {t[k + 1]!r})"
            )
        if self.cycle_index < 1:
            raise DataError(f"{where}: cycle index must be positive")
        if not self.discharge_capacity >= 0:
            raise DataError(f"{where}: discharge capacity must be >= 0")


@dataclass(frozen=True)
class InputMatrix:
    """3 x (n_points * len(source_cycles)) matrix with rows (v, i, t)."""

    x: np.ndarray
    n_points: int
    source_cycles: tuple[int, ...]

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim != 2 or x.shape[0] != 3:
            raise DataError(f"input matrix must be 3 x N, got shape {x.shape}")
        if x.shape[1] != self.n_points * len(self.source_cycles):
            raise DataError("column count does not match n_points * cycles")
        if not np.all(np.isfinite(x)):
            raise DataError("input matrix contains non-finite values")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "source_cycles", tuple(int(c) for c in self.source_cycles))


@dataclass(frozen=True)
class CellSeries:
    cell_id: str
    cycles: np.ndarray
    capacity: np.ndarray
    nominal_capacity: float
    group: str = ""
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        c = np.asarray(self.cycles, dtype=int)
        q = np.asarray(self.capacity, dtype=float)
        object.__setattr__(self, "cycles", c)
        object.__setattr__(self, "capacity", q)
        if c.shape != q.shape or c.ndim != 1 or len(c) == 0:
            raise DataError(f"cell {self.cell_id!r}: cycles/capacity must be equal-length 1-D")
        if np.any(np.diff(c) <= 0):
            raise DataError(f"cell {self.cell_id!r}: cycle index not strictly increasing")
        if not self.nominal_capacity > 0:
            raise DataError(f"cell {self.cell_id!r}: nominal capacity must be > 0")

    @property
    def soh(self) -> np.ndarray:
        """SOH as a fraction of nominal capacity."""
        return self.capacity / self.nominal_capacity

    @property
    def capacity_by_cycle(self) -> list[tuple[int, float]]:
        return list(zip(self.cycles.tolist(), self.capacity.tolist()))

    def soh_at(self, cycle: int) -> float:
        k = np.searchsorted(self.cycles, cycle)
        if k >= len(self.cycles) or self.cycles[k] != cycle:
            raise DataError(f"cell {self.cell_id!r}: no capacity for cycle {cycle}")
        return float(self.soh[k])

    def eol_cycle(self, eol: float = 0.8) -> int | None:
        """First cycle with SOH below ``eol`` (fraction)."""
        below = np.nonzero(self.soh < eol)[0]
        return int(self.cycles[below[0]]) if len(below) else None


Cell = tuple[CellSeries, list[CycleRecord]]


# -- resampling ------------------------------------------------------------


def resample(rec: CycleRecord, n_points: int = 128) -> InputMatrix:
    if n_points < 2:
        raise DataError("n_points must be >= 2")
    t = rec.t
    grid = t[0] + (t[-1] - t[0]) * np.arange(n_points) / (n_points - 1)
    grid[-1] = t[-1]
    v = np.interp(grid, t, rec.v)
    i = np.interp(grid, t, rec.i)
    return InputMatrix(np.vstack([v, i, grid]), n_points, (rec.cycle_index,))


def stack_cycles(recs: Sequence[CycleRecord], n_points: int = 128) -> InputMatrix:
    """Resample each cycle and concatenate along the column axis."""
    if len(recs) == 0:
        raise DataError("stack_cycles needs at least one cycle")
    ids = {r.cell_id for r in recs}
    if len(ids) > 1:
        raise DataError(f"cycles come from different cells: {sorted(ids)}")
    idx = [r.cycle_index for r in recs]
    if any(b - a != 1 for a, b in zip(idx, idx[1:])):
        raise DataError(f"cycle indices must be contiguous and increasing, got {idx}")
    blocks = [resample(r, n_points).x for r in recs]
    return InputMatrix(np.hstack(blocks), n_points, tuple(idx))


def perturb(x: InputMatrix, sigma: float, seed=None) -> InputMatrix:
    """Add N(0, sigma^2 Var(row)) noise to each variable row."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return x
    rng = np.random.default_rng(seed)
    scale = sigma * x.x.std(axis=1, keepdims=True)
    noisy = x.x + rng.standard_normal(x.x.shape) * scale
    return InputMatrix(noisy, x.n_points, x.source_cycles)


# -- synthetic fleets ------------------------------------------------------


@dataclass
class SynthConfig:
    n_cells: int = 169
    pattern_mix: dict = field(
        default_factory=lambda: {"sublinear": 0.15, "linear": 0.15, "knee": 0.70}
    )
    life_min: float = 350.0
    life_max: float = 1600.0
    life_noise: float = 0.03
    increment_noise: float = 0.25
    signal_noise: float = 1e-3
    recorded_cycles: int = 10
    nominal_capacity: float = 1.1
    sample_period: float = 10.0
    post_eol: float = 0.08
    eol: float = 0.8

    def validate(self):
        if self.n_cells < 1:
            raise DataError("n_cells must be >= 1")
        mix = self.pattern_mix
        unknown = set(mix) - set(PATTERNS)
        if unknown:
            raise DataError(f"unknown patterns in mix: {sorted(unknown)}")
        w = np.array([mix.get(p, 0.0) for p in PATTERNS], dtype=float)
        if not np.all(np.isfinite(w)) or np.any(w < 0) or w.sum() <= 0:
            raise DataError(f"invalid pattern mix weights: {mix}")
        if not 0 < self.life_min < self.life_max:
            raise DataError("need 0 < life_min < life_max")
        if self.recorded_cycles < 1:
            raise DataError("recorded_cycles must be >= 1")
        return w / w.sum()


def _fade_shape(pattern: str, u: np.ndarray, knee_frac: float, shape: float) -> np.ndarray:
    """Normalised cumulative fade g(u), increasing with g(0) = 0."""
    if pattern == "linear":
        return u
    if pattern == "sublinear":
        tau = 0.15 + 0.25 * shape
        return 0.6 * (1.0 - np.exp(-u / tau)) + 0.4 * u
    if pattern == "knee":
        w = 0.035
        z = (u - knee_frac) / w
        softplus = np.logaddexp(0.0, z) - np.logaddexp(0.0, -knee_frac / w)
        return 0.2 * u + w * softplus
    raise DataError(f"unknown pattern {pattern!r}")


def soh_trajectory(
    pattern: str,
    eol_cycle: int,
    soh0: float = 0.99,
    knee_cycle: float | None = None,
    shape: float = 0.5,
    noise: float = 0.0,
    post_eol: float = 0.08,
    eol: float = 0.8,
    rng=None,
):
    """Strictly decreasing SOH at cycles 1..n whose first value below ``eol`` is at ``eol_cycle``.

    ``noise`` is the log-normal spread of the per-cycle fade increments, so
    every realisation stays strictly decreasing.
    """
    if eol_cycle < 3:
        raise DataError("eol_cycle must be >= 3")
    if not soh0 > eol:
        raise DataError("initial SOH must exceed the EOL level")
    n = int(math.ceil(eol_cycle * (1.0 + post_eol))) + 1
    c = np.arange(0, n + 1, dtype=float)
    kf = 0.75 if knee_cycle is None else knee_cycle / eol_cycle
    g = _fade_shape(pattern, c / eol_cycle, kf, shape)
    inc = np.diff(g)
    if noise > 0:
        rng = np.random.default_rng(rng)
        inc = inc * np.exp(noise * rng.standard_normal(len(inc)) - 0.5 * noise**2)
    cum = np.concatenate([[0.0], np.cumsum(inc)])
    # cum[k] is the fade after cycle k; pin SOH = eol half way through cycle eol_cycle.
    ref = 0.5 * (cum[eol_cycle - 1] + cum[eol_cycle])
    soh = soh0 - (soh0 - eol) * cum / ref
    return c[1:].astype(int), soh[1:]


def _ocv(soc):
    soc = np.clip(soc, 0.0, 1.0)
    return (
        3.25
        + 0.08 * (soc - 0.5)
        + 0.40 * np.exp(-(1.0 - soc) / 0.04)
        - 0.60 * np.exp(-soc / 0.05)
    )


def _cycle_curve(p: dict, q_ah: float, nominal: float, dt: float, noise: float, rng):
    """One CC-CV charge, rest and CC discharge sampled every ``dt`` seconds."""
    i_chg = p["charge_crate"] * nominal
    i_dis = 4.0 * nominal
    r = p["resistance"]
    v_max = 3.6
    i_cut = nominal / 50.0

    ts, vs, cs = [], [], []
    t = 0.0
    soc = 0.0
    # CC charge
    while True:
        v = _ocv(soc) + i_chg * r
        if v >= v_max or soc >= 1.0:
            break
        ts.append(t), vs.append(v), cs.append(i_chg)
        soc += i_chg * dt / 3600.0 / q_ah
        t += dt
    # CV charge: exponential current decay at the voltage limit
    t_cv = t
    i_cv = i_chg
    while i_cv > i_cut:
        i_cv = i_chg * math.exp(-(t - t_cv) / p["cv_tau"])
        ts.append(t), vs.append(v_max), cs.append(i_cv)
        soc = min(1.0, soc + i_cv * dt / 3600.0 / q_ah)
        t += dt
    # rest with relaxation towards OCV
    t_rest = t
    v_end = _ocv(soc)
    while t - t_rest < p["rest_s"]:
        v = v_end + (v_max - v_end) * math.exp(-(t - t_rest) / 60.0)
        ts.append(t), vs.append(v), cs.append(0.0)
        t += dt
    # CC discharge of the cycle's capacity
    t_dis = t
    dur = 3600.0 * q_ah / i_dis
    while t - t_dis <= dur:
        frac = (t - t_dis) / dur
        v = _ocv(1.0 - frac) - i_dis * r - p["sag"] * frac
        ts.append(t), vs.append(v), cs.append(-i_dis)
        t += dt

    ts = np.array(ts)
    vs = np.array(vs) + noise * rng.standard_normal(len(ts))
    cs = np.array(cs) + noise * nominal * rng.standard_normal(len(ts))
    return ts, vs, cs


def _cell_params(rng, cfg: SynthConfig, probs) -> dict:
    pattern = PATTERNS[int(rng.choice(3, p=probs))]
    z_life = float(rng.uniform())
    shape = float(rng.uniform())
    soh0 = float(rng.uniform(0.985, 0.998))
    lo, hi = math.log(cfg.life_min), math.log(cfg.life_max)
    life = math.exp(lo + z_life * (hi - lo) + cfg.life_noise * rng.standard_normal())
    eol_cycle = max(int(round(life)), 20)
    knee_frac = 0.55 + 0.30 * shape
    return {
        "pattern": pattern,
        "z_life": z_life,
        "shape": shape,
        "soh0": soh0,
        "eol_cycle": eol_cycle,
        "knee_cycle": knee_frac * eol_cycle if pattern == "knee" else None,
        # the early-cycle signal leaks the latent parameters through these
        "charge_crate": 2.0 + 4.0 * (1.0 - z_life),
        "resistance": 0.018 * (1.0 + 0.8 * (1.0 - z_life)),
        "cv_tau": 60.0 + 150.0 * shape,
        "rest_s": {"sublinear": 300.0, "linear": 600.0, "knee": 900.0}[pattern],
        "sag": 0.05 + 0.10 * shape,
    }


def synth_cell(cell_id: str, params: dict, cfg: SynthConfig, rng) -> Cell:
    cycles, soh = soh_trajectory(
        params["pattern"],
        params["eol_cycle"],
        soh0=params["soh0"],
        knee_cycle=params["knee_cycle"],
        shape=params["shape"],
        noise=cfg.increment_noise,
        post_eol=cfg.post_eol,
        eol=cfg.eol,
        rng=rng,
    )
    nominal = cfg.nominal_capacity
    cap = soh * nominal
    recs = []
    for k in range(min(cfg.recorded_cycles, len(cycles))):
        t, v, i = _cycle_curve(params, cap[k], nominal, cfg.sample_period, cfg.signal_noise, rng)
        recs.append(CycleRecord(cell_id, int(cycles[k]), t, v, i, float(cap[k])))
    meta = {k: params[k] for k in ("pattern", "z_life", "shape", "soh0", "eol_cycle", "knee_cycle")}
    series = CellSeries(cell_id, cycles, cap, nominal, group=params["pattern"], meta=meta)
    return series, recs


def synth_fleet(config: SynthConfig | None = None, seed=0) -> list[Cell]:
    """Generate a fleet whose life is learnable from the early cycles."""
    cfg = config or SynthConfig()
    probs = cfg.validate()
    root = np.random.SeedSequence(seed)
    fleet = []
    for n, child in enumerate(root.spawn(cfg.n_cells)):
        rng = np.random.default_rng(child)
        params = _cell_params(rng, cfg, probs)
        fleet.append(synth_cell(f"cell{n:04d}", params, cfg, rng))
    return fleet


# -- CSV -------------------------------------------------------------------


def write_csv(fleet: Sequence[Cell], cycles_path, capacity_path) -> None:
    """Write the two-file long-format schema."""
    with open(cycles_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CYCLES_HEADER)
        for _, recs in fleet:
            for r in recs:
                for t, v, i in zip(r.t, r.v, r.i):
                    w.writerow([r.cell_id, r.cycle_index, f"{t:.6f}", f"{v:.9f}", f"{i:.9f}"])
    with open(capacity_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CAPACITY_HEADER)
        for s, _ in fleet:
            for c, q in zip(s.cycles, s.capacity):
                w.writerow([s.cell_id, int(c), f"{q:.12f}", f"{s.nominal_capacity:.12f}"])


def _read_checked(path, header: list[str], numeric: list[str]) -> pd.DataFrame:
    path = Path(path)
    try:
        df = pd.read_csv(path, dtype={"cell_id": str}, encoding="utf-8")
    except (OSError, pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: cannot parse CSV: {exc}") from exc
    if list(df.columns) != header:
        raise DataError(f"{path}: expected header {','.join(header)}, got {','.join(map(str, df.columns))}")
    for col in numeric:
        vals = pd.to_numeric(df[col], errors="coerce")
        bad = np.nonzero(vals.isna().to_numpy())[0]
        if len(bad):
            rows = ", ".join(str(b + 2) for b in bad[:5])
            raise DataError(f"{path}: non-numeric or missing {col!r} at row(s) {rows}")
        df[col] = vals
    bad = np.nonzero(df["cell_id"].isna().to_numpy())[0]
    if len(bad):
        raise DataError(f"{path}: missing cell_id at row(s) {', '.join(str(b + 2) for b in bad[:5])}")
    if np.any(df["cycle"].to_numpy() != np.round(df["cycle"].to_numpy())) or np.any(df["cycle"] < 1):
        raise DataError(f"{path}: cycle must be a positive integer")
    df["cycle"] = df["cycle"].astype(int)
    df["_row"] = np.arange(len(df)) + 2
    return df


def load_csv(cycles_path, capacity_path) -> list[Cell]:
    cyc = _read_checked(cycles_path, CYCLES_HEADER, ["cycle", "t_s", "voltage_v", "current_a"])
    cap = _read_checked(
        capacity_path, CAPACITY_HEADER, ["cycle", "discharge_capacity_ah", "nominal_capacity_ah"]
    )
    out = []
    cap_groups = dict(tuple(cap.groupby("cell_id", sort=True)))
    cyc_groups = dict(tuple(cyc.groupby("cell_id", sort=True)))
    for cell_id in sorted(set(cap_groups) | set(cyc_groups)):
        cg = cap_groups.get(cell_id)
        if cg is None:
            raise DataError(f"{capacity_path}: missing capacity for cell {cell_id!r}")
        cg = cg.sort_values("cycle", kind="stable")
        if cg["cycle"].duplicated().any():
            row = int(cg.loc[cg["cycle"].duplicated(), "_row"].iloc[0])
            raise DataError(f"{capacity_path}: duplicate cycle for cell {cell_id!r} at row {row}")
        nominal = cg["nominal_capacity_ah"].to_numpy()
        if np.any(nominal != nominal[0]):
            raise DataError(f"{capacity_path}: nominal capacity varies within cell {cell_id!r}")
        series = CellSeries(
            cell_id,
            cg["cycle"].to_numpy(),
            cg["discharge_capacity_ah"].to_numpy(),
            float(nominal[0]),
        )
        qmap = dict(zip(series.cycles.tolist(), series.capacity.tolist()))
        recs = []
        sub = cyc_groups.get(cell_id)
        if sub is not None:
            for cycle, block in sub.groupby("cycle", sort=True):
                if cycle not in qmap:
                    raise DataError(
                        f"{capacity_path}: missing capacity for cell {cell_id!r} cycle {cycle} "
                        f"(referenced at {cycles_path} row {int(block['_row'].iloc[0])})"
                    )
                t = block["t_s"].to_numpy()
                bad = np.nonzero(np.diff(t) <= 0)[0]
                if len(bad):
                    row = int(block["_row"].iloc[bad[0] + 1])
                    raise DataError(
                        f"{cycles_path}: time not strictly increasing for cell {cell_id!r} "
                        f"cycle {cycle} at row {row}"
                    )
                recs.append(
                    CycleRecord(
                        cell_id,
                        int(cycle),
                        t,
                        block["voltage_v"].to_numpy(),
                        block["current_a"].to_numpy(),
                        qmap[cycle],
                    )
                )
        out.append((series, recs))
    return out
