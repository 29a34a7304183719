"""Cross-validation, metrics, and the robustness / input-cycle studies."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import nn as knn
from .bayesopt import objective, optimize_knots
from .data import Cell, CellSeries, perturb, stack_cycles
from .knee import knee_class, knee_of
from .knots import KnotPoints, KnotSpec, extract_knots, reconstruct, uniform_levels

log = logging.getLogger(__name__)


def metrics(y, yhat, mape: bool = True) -> tuple[float, float]:
    """(MAE, MAPE in percent)."""
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if y.shape != yhat.shape or y.size == 0:
        raise ValueError(f"need equal non-empty shapes, got {y.shape} and {yhat.shape}")
    err = np.abs(y - yhat)
    mae = float(np.mean(err))
    if not mape:
        return mae, float("nan")
    if np.any(y == 0):
        raise ValueError("MAPE undefined for zero observations")
    return mae, float(np.mean(err / np.abs(y)) * 100.0)


# -- folds -----------------------------------------------------------------


@dataclass
class FoldPlan:
    assignments: dict
    n_folds: int
    strata: dict = field(default_factory=dict)

    def fold_of(self, cell_id: str) -> int:
        return self.assignments[cell_id]

    def sizes(self) -> list[int]:
        return [sum(1 for f in self.assignments.values() if f == k) for k in range(self.n_folds)]

    def split(self, fleet: Sequence, fold: int):
        ids = [_series(c).cell_id for c in fleet]
        train = [c for c, i in zip(fleet, ids) if self.assignments[i] != fold]
        test = [c for c, i in zip(fleet, ids) if self.assignments[i] == fold]
        return train, test


def _series(cell) -> CellSeries:
    return cell[0] if isinstance(cell, tuple) else cell


def stratum_key(series: CellSeries) -> tuple[str, str]:
    """(knee class, group); synthetic cells use the generator's knee, others a BW fit."""
    meta = series.meta or {}
    if "eol_cycle" in meta:
        knee = meta.get("knee_cycle")
        x1 = knee if knee is not None else meta["eol_cycle"]
    else:
        x1 = max(knee_of(series).x1, 0.0)
    return knee_class(x1), series.group


def stratified_folds(fleet: Sequence, n_folds: int = 5, seed=0, keys=None) -> FoldPlan:
    """Round-robin assignment over strata so every fold and stratum differ by at most one."""
    if len(fleet) == 0:
        raise ValueError("empty fleet")
    series = [_series(c) for c in fleet]
    keys = keys or {s.cell_id: stratum_key(s) for s in series}
    rng = np.random.default_rng(seed)
    by_key: dict = {}
    for s in series:
        by_key.setdefault(keys[s.cell_id], []).append(s.cell_id)
    assignments = {}
    counter = 0
    for key in sorted(by_key):
        ids = by_key[key]
        if len(ids) < n_folds:
            warnings.warn(f"stratum {key} has {len(ids)} cells < {n_folds} folds; spread unstratified")
        for cid in [ids[j] for j in rng.permutation(len(ids))]:
            assignments[cid] = counter % n_folds
            counter += 1
    return FoldPlan(assignments, n_folds, {k: list(v) for k, v in keys.items()})


# -- pipeline --------------------------------------------------------------


@dataclass
class PipelineConfig:
    k: int = 3
    knot_mode: str = "uniform"
    eol: float = 80.0
    top: float = 98.0
    input_cycles: int = 1
    n_points: int = 128
    n_folds: int = 5
    seed: int = 0
    mc_samples: int = 100
    bo_budget: int = 60
    window: int = 5
    anchor_mode: str = "measured"
    predictor: str = "cnn"
    train: knn.TrainConfig = field(default_factory=knn.TrainConfig)

    def to_dict(self) -> dict:
        return asdict(self)


def model_input(recs, input_cycles: int, n_points: int = 128):
    if len(recs) < input_cycles:
        raise ValueError(f"cell {recs[0].cell_id if recs else '?'} has {len(recs)} recorded cycles < {input_cycles}")
    return stack_cycles(recs[:input_cycles], n_points)


def fold_levels(train: Sequence[Cell], cfg: PipelineConfig, fold: int) -> KnotSpec:
    if cfg.knot_mode == "uniform":
        return uniform_levels(cfg.k, cfg.eol, cfg.top)
    if cfg.knot_mode == "optimized":
        res = optimize_knots(
            [s for s, _ in train], cfg.k, cfg.bo_budget, seed=cfg.seed + fold,
            eol=cfg.eol, top=cfg.top, window=cfg.window,
        )
        return res.best_levels
    raise ValueError(f"unknown knot mode {cfg.knot_mode!r}")


def anchor_for(series: CellSeries, cfg: PipelineConfig):
    cycle = int(series.cycles[0]) + cfg.input_cycles - 1
    soh = series.soh_at(cycle) if cfg.anchor_mode == "measured" else 1.0
    return float(cycle), soh


def score_cell(series: CellSeries, true_pts: KnotPoints, pred_cycles, anchor, eol: float) -> dict:
    """Knot and trajectory errors for one cell; trajectory grid is anchor..true EOL."""
    k_mae, k_mape = metrics(true_pts.cycles, pred_cycles)
    pred = reconstruct(KnotPoints(true_pts.spec, pred_cycles), anchor)
    oracle = reconstruct(true_pts, anchor)
    eol_cycle = series.eol_cycle(eol / 100.0)
    mask = (series.cycles >= anchor[0]) & (series.cycles <= eol_cycle)
    y = series.soh[mask]
    t_mae, t_mape = metrics(y, pred.at(series.cycles[mask].astype(float)))
    i_mae, _ = metrics(y, oracle.at(series.cycles[mask].astype(float)))
    return {
        "cell_id": series.cell_id,
        "knot_mae": k_mae,
        "knot_mape": k_mape,
        "traj_mae": t_mae,
        "traj_mape": t_mape,
        "traj_mae_ah": t_mae * series.nominal_capacity,
        "interp_mae": i_mae,
        "true_cycles": true_pts.cycles.tolist(),
        "pred_cycles": np.asarray(pred_cycles, dtype=float).tolist(),
    }


AGG_KEYS = ("knot_mae", "knot_mape", "traj_mae", "traj_mape", "traj_mae_ah", "interp_mae", "eol_in_ci", "ci_width_eol")


def aggregate(rows: list[dict]) -> dict:
    out = {}
    for key in AGG_KEYS:
        vals = [r[key] for r in rows if r.get(key) is not None]
        if vals:
            out[key] = float(np.mean(vals))
    out["n_cells"] = len(rows)
    return out


@dataclass
class EvalReport:
    config: dict
    per_cell: list
    aggregate: dict
    per_fold: list
    failures: list = field(default_factory=list)
    models: dict = field(default_factory=dict, repr=False)

    def to_json(self) -> dict:
        return {
            "config": self.config,
            "aggregate": self.aggregate,
            "per_fold": self.per_fold,
            "per_cell": self.per_cell,
            "failures": self.failures,
        }


def fit_fold(train: Sequence[Cell], levels: KnotSpec, cfg: PipelineConfig, fold: int, failures: list):
    """Train the knot network on one training split."""
    X, Y = [], []
    for s, recs in train:
        try:
            pts = extract_knots(s, levels, cfg.window)
            x = model_input(recs, cfg.input_cycles, cfg.n_points)
        except ValueError as exc:
            failures.append({"cell_id": s.cell_id, "fold": fold, "stage": "train_labels", "error": str(exc)})
            continue
        X.append(x.x), Y.append(pts.cycles)
    if not X:
        raise ValueError(f"fold {fold}: no training cells with valid labels")
    tcfg = replace(cfg.train, seed=cfg.train.seed + fold)
    model, history = knn.train(np.stack(X), np.stack(Y), tcfg)
    model.input_cycles = cfg.input_cycles
    model.n_points = cfg.n_points
    model.extra = {"knots": levels.to_dict()}
    return model, history


def run_cv(fleet: Sequence[Cell], cfg: PipelineConfig | None = None, plan: FoldPlan | None = None) -> EvalReport:
    cfg = cfg or PipelineConfig()
    plan = plan or stratified_folds(fleet, cfg.n_folds, cfg.seed)
    rows, folds, failures, models = [], [], [], {}
    for fold in range(cfg.n_folds):
        train, test = plan.split(fleet, fold)
        levels = fold_levels(train, cfg, fold)
        truth, inputs = [], []
        for s, recs in test:
            try:
                truth.append((s, extract_knots(s, levels, cfg.window)))
                inputs.append(model_input(recs, cfg.input_cycles, cfg.n_points).x)
            except ValueError as exc:
                if len(truth) > len(inputs):
                    truth.pop()
                failures.append({"cell_id": s.cell_id, "fold": fold, "stage": "test_labels", "error": str(exc)})
        history = []
        if not truth:
            mean = lower = upper = np.zeros((0, levels.k))
        elif cfg.predictor == "oracle":
            mean = np.stack([p.cycles for _, p in truth])
            lower = upper = mean
        else:
            try:
                model, history = fit_fold(train, levels, cfg, fold, failures)
            except ValueError as exc:
                failures += [
                    {"cell_id": s.cell_id, "fold": fold, "stage": "train", "error": str(exc)} for s, _ in truth
                ]
                truth = []
            else:
                models[fold] = model
                mc = knn.predict_mc(model, np.stack(inputs), cfg.mc_samples, seed=cfg.seed + fold)
                mean, lower, upper = mc.mean, mc.lower, mc.upper
        fold_rows = []
        for j, (s, pts) in enumerate(truth):
            try:
                row = score_cell(s, pts, mean[j], anchor_for(s, cfg), cfg.eol)
            except ValueError as exc:
                failures.append({"cell_id": s.cell_id, "fold": fold, "stage": "predict", "error": str(exc)})
                continue
            row["fold"] = fold
            row["ci_lower"] = lower[j].tolist()
            row["ci_upper"] = upper[j].tolist()
            row["eol_in_ci"] = float(lower[j][-1] <= pts.cycles[-1] <= upper[j][-1])
            row["ci_width_eol"] = float(upper[j][-1] - lower[j][-1])
            fold_rows.append(row)
        test_series = [s for s, _ in truth]
        folds.append(
            dict(
                aggregate(fold_rows),
                fold=fold,
                levels=list(levels.soh_levels),
                heldout_interp_error=objective(levels, test_series, cfg.window) if test_series else None,
                epochs_run=len(history),
            )
        )
        rows.extend(fold_rows)
    return EvalReport(cfg.to_dict(), rows, aggregate(rows), folds, failures, models)


# -- robustness ------------------------------------------------------------


def box_stats(values) -> dict:
    v = np.sort(np.asarray(values, dtype=float))
    q1, med, q3 = np.quantile(v, [0.25, 0.5, 0.75])
    iqr = q3 - q1
    inside = v[(v >= q1 - 1.5 * iqr) & (v <= q3 + 1.5 * iqr)]
    return {
        "q1": float(q1),
        "median": float(med),
        "q3": float(q3),
        "lo_whisker": float(inside.min()),
        "hi_whisker": float(inside.max()),
        "outliers": [float(x) for x in v if x < inside.min() or x > inside.max()],
    }


def _traj_mae(series, pts_true, pred_cycles, anchor, eol):
    pred = reconstruct(KnotPoints(pts_true.spec, pred_cycles), anchor)
    eol_cycle = series.eol_cycle(eol / 100.0)
    mask = (series.cycles >= anchor[0]) & (series.cycles <= eol_cycle)
    return float(np.mean(np.abs(series.soh[mask] - pred.at(series.cycles[mask].astype(float)))))


def robustness_study(
    fleet: Sequence[Cell],
    report: EvalReport,
    cfg: PipelineConfig | None = None,
    sigmas=(0.001, 0.003, 0.01),
    n_draws: int = 100,
    seed=0,
    plan: FoldPlan | None = None,
) -> dict:
    """Trajectory-MAE deviation under input noise, per sigma and draw.

    Each fold's model predicts its own held-out cells in eval mode.  For one draw
    the deviation is the fleet mean of |MAE(perturbed) - MAE(clean)| over cells;
    the signed fleet mean is kept alongside as ``signed``.
    """
    cfg = cfg or PipelineConfig(**{k: v for k, v in report.config.items() if k != "train"})
    plan = plan or stratified_folds(fleet, cfg.n_folds, cfg.seed)
    cases = []  # (fold, model, series, true points, input, anchor)
    for fold, model in sorted(report.models.items()):
        levels = KnotSpec.from_dict(model.extra["knots"])
        _, test = plan.split(fleet, fold)
        for s, recs in test:
            try:
                pts = extract_knots(s, levels, cfg.window)
                x = model_input(recs, cfg.input_cycles, cfg.n_points)
            except ValueError:
                continue
            cases.append((fold, model, s, pts, x, anchor_for(s, cfg)))
    if not cases:
        raise ValueError("no cells to perturb")

    def cell_maes(xs):
        preds = {}
        for fold, model in report.models.items():
            idx = [j for j, c in enumerate(cases) if c[0] == fold]
            if idx:
                p = model.predict(np.stack([xs[j].x for j in idx]))
                preds.update(dict(zip(idx, p)))
        maes = []
        for j, (_, _, s, pts, _, anchor) in enumerate(cases):
            try:
                maes.append(_traj_mae(s, pts, preds[j], anchor, cfg.eol))
            except ValueError:
                maes.append(np.nan)
        return np.array(maes)

    clean = cell_maes([c[4] for c in cases])
    ok = np.isfinite(clean)
    root = np.random.SeedSequence(seed)
    out = {}
    for sigma, ss in zip(sigmas, root.spawn(len(sigmas))):
        devs, signed = [], []
        for ds in ss.spawn(n_draws):
            cell_seeds = ds.spawn(len(cases))
            xs = [perturb(c[4], sigma, cs) for c, cs in zip(cases, cell_seeds)]
            delta = cell_maes(xs) - clean
            delta = delta[ok & np.isfinite(delta)]
            devs.append(float(np.mean(np.abs(delta))))
            signed.append(float(np.mean(delta)))
        out[float(sigma)] = {"deviations": devs, "signed": signed, **box_stats(devs)}
    return out


def write_box_csv(study: dict, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["sigma", "q1", "median", "q3", "lo_whisker", "hi_whisker", "outliers"])
        for sigma, st in study.items():
            w.writerow(
                [f"{sigma:g}"]
                + [f"{st[k]:.10g}" for k in ("q1", "median", "q3", "lo_whisker", "hi_whisker")]
                + [f"{o:.10g}" for o in st["outliers"]]
            )


def input_cycle_study(fleet: Sequence[Cell], cfg: PipelineConfig | None = None, cycle_counts=(1, 3, 10, 50)) -> list[dict]:
    cfg = cfg or PipelineConfig()
    need = max(cycle_counts)
    short = [s.cell_id for s, recs in fleet if len(recs) < need]
    if short:
        raise ValueError(f"{len(short)} cells have fewer than {need} recorded cycles (e.g. {short[0]})")
    plan = stratified_folds(fleet, cfg.n_folds, cfg.seed)
    rows = []
    for n in cycle_counts:
        rep = run_cv(fleet, replace(cfg, input_cycles=n), plan)
        a = rep.aggregate
        rows.append({"input_cycles": n, **{k: a[k] for k in ("knot_mae", "knot_mape", "traj_mae", "traj_mape")}})
    return rows


def format_table(rows: list[dict], columns=None) -> str:
    """Aligned plain-text table."""
    if not rows:
        return ""
    columns = columns or list(rows[0])

    def fmt(v):
        if isinstance(v, float):
            return f"{v:.6g}"
        return str(v)

    cells = [[fmt(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)
