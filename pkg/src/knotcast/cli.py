"""knotcast command line: synth, optimize-knots, train, predict, evaluate, robustness, cycle-study."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import nn as knn
from .bayesopt import optimize_knots
from .config import RunConfig, load_config
from .data import DataError, load_csv, synth_fleet, write_csv
from .evaluation import (
    format_table,
    input_cycle_study,
    model_input,
    robustness_study,
    run_cv,
    stratified_folds,
    write_box_csv,
)
from .knots import KnotError, KnotPoints, KnotSpec, extract_knots, reconstruct, uniform_levels

log = logging.getLogger("knotcast")


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _apply_threads():
    n = os.environ.get("KNOTCAST_THREADS")
    if n:
        import torch

        torch.set_num_threads(max(1, int(n)))


def _attach_truth(fleet, truth_path: Path):
    """Restore generator metadata (pattern, true knee) written by ``synth``."""
    if not truth_path.exists():
        return fleet
    truth = json.loads(truth_path.read_text(encoding="utf-8"))
    out = []
    for s, recs in fleet:
        meta = truth.get(s.cell_id)
        if meta:
            s = type(s)(s.cell_id, s.cycles, s.capacity, s.nominal_capacity, meta.get("pattern", ""), meta)
        out.append((s, recs))
    return out


def load_fleet(cfg: RunConfig):
    d = cfg.data
    if d.cycles_csv and d.capacity_csv:
        fleet = load_csv(d.cycles_csv, d.capacity_csv)
        return _attach_truth(fleet, Path(d.capacity_csv).with_name("truth.json"))
    return synth_fleet(d.synth, seed=d.synth_seed)


def _finish(out: Path, failures: list) -> int:
    if failures:
        _dump({"failures": failures}, out / "failures.json")
        log.warning("%d per-cell failures, see %s", len(failures), out / "failures.json")
        return 3
    return 0


def cmd_synth(cfg: RunConfig, out: Path) -> int:
    fleet = synth_fleet(cfg.data.synth, seed=cfg.data.synth_seed)
    write_csv(fleet, out / "cycles.csv", out / "capacity.csv")
    _dump({s.cell_id: s.meta for s, _ in fleet}, out / "truth.json")
    log.info("wrote %d cells to %s", len(fleet), out)
    return 0


def cmd_optimize_knots(cfg: RunConfig, out: Path) -> int:
    fleet = load_fleet(cfg)
    plan = stratified_folds(fleet, cfg.folds, cfg.seed)
    folds = []
    for fold in range(cfg.folds):
        train, _ = plan.split(fleet, fold)
        res = optimize_knots(
            [s for s, _ in train], cfg.knots.k, cfg.knots.budget, seed=cfg.seed + fold,
            eol=cfg.knots.eol, top=cfg.knots.top, window=cfg.knots.window,
        )
        folds.append(dict(res.to_json(), fold=fold))
    _dump({"k": cfg.knots.k, "budget": cfg.knots.budget, "folds": folds}, out / "knots.json")
    return 0


def _levels(cfg: RunConfig, train_series) -> KnotSpec:
    if cfg.knots.mode == "uniform":
        return uniform_levels(cfg.knots.k, cfg.knots.eol, cfg.knots.top)
    res = optimize_knots(
        train_series, cfg.knots.k, cfg.knots.budget, seed=cfg.seed,
        eol=cfg.knots.eol, top=cfg.knots.top, window=cfg.knots.window,
    )
    return res.best_levels


def cmd_train(cfg: RunConfig, out: Path, resume: str | None = None) -> int:
    fleet = load_fleet(cfg)
    init = None
    if resume:
        header = knn.read_header(resume)
        want = {"K": cfg.knots.k, "n_points": cfg.n_points, "input_cycles": cfg.input_cycles, "head_type": "regression"}
        got = {k: header.get(k) for k in want}
        if got != want:
            raise ValueError(f"refusing to resume {resume}: model header {got} does not match config {want}")
        init = knn.load_model(resume)
    levels = KnotSpec.from_dict(init.extra["knots"]) if init else _levels(cfg, [s for s, _ in fleet])
    X, Y, failures = [], [], []
    for s, recs in fleet:
        try:
            Y.append(extract_knots(s, levels, cfg.knots.window).cycles)
            X.append(model_input(recs, cfg.input_cycles, cfg.n_points).x)
        except (KnotError, DataError, ValueError) as exc:
            if len(Y) > len(X):
                Y.pop()
            failures.append({"cell_id": s.cell_id, "stage": "train_labels", "error": str(exc)})
    model, history = knn.train(np.stack(X), np.stack(Y), cfg.train, init=init)
    model.input_cycles = cfg.input_cycles
    model.n_points = cfg.n_points
    model.extra = {"knots": levels.to_dict()}
    knn.save_model(model, out / "model.bin")
    with open(out / "train_log.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for epoch, tr, vl in history:
            w.writerow([epoch, f"{tr:.10g}", f"{vl:.10g}"])
    return _finish(out, failures)


def _band_trajectories(spec, samples, anchor, grid):
    """SOH curves of every MC sample whose first knot follows the anchor."""
    curves = []
    for c in samples:
        if c[0] > anchor[0] and np.all(np.diff(c) > 0):
            curves.append(reconstruct(KnotPoints(spec, c), anchor).at(grid))
    return np.array(curves)


def cmd_predict(cfg: RunConfig, out: Path, model_path: str) -> int:
    model = knn.load_model(model_path)
    spec = KnotSpec.from_dict(model.extra["knots"])
    fleet = load_fleet(cfg)
    failures, inputs, cells = [], [], []
    for s, recs in fleet:
        try:
            inputs.append(model_input(recs, model.input_cycles, model.n_points).x)
            cells.append(s)
        except (DataError, ValueError) as exc:
            failures.append({"cell_id": s.cell_id, "stage": "input", "error": str(exc)})
    mc = knn.predict_mc(model, np.stack(inputs), cfg.mc_samples, seed=cfg.seed)
    knot_rows, traj_rows, plot = [], [], {}
    for j, s in enumerate(cells):
        a_cycle = int(s.cycles[0]) + model.input_cycles - 1
        anchor = (float(a_cycle), s.soh_at(a_cycle) if cfg.anchor_mode == "measured" else 1.0)
        try:
            traj = reconstruct(KnotPoints(spec, mc.mean[j]), anchor)
        except (KnotError, ValueError) as exc:
            failures.append({"cell_id": s.cell_id, "stage": "predict", "error": str(exc)})
            continue
        grid = np.arange(a_cycle, int(np.ceil(max(mc.upper[j][-1], mc.mean[j][-1]))) + 1, dtype=float)
        soh = traj.at(grid)
        curves = _band_trajectories(spec, mc.samples[:, j], anchor, grid)
        if len(curves) >= 2:
            lo, hi = np.quantile(curves, [0.025, 0.975], axis=0)
            sd = curves.std(axis=0)
        else:
            lo = hi = soh
            sd = np.zeros_like(soh)
        lo, hi = np.minimum(lo, soh), np.maximum(hi, soh)
        for k, level in enumerate(spec.soh_levels):
            m, sdk = mc.mean[j][k], mc.std[j][k]
            knot_rows.append(
                [s.cell_id, f"{level:g}"]
                + [f"{v:.6f}" for v in (m, mc.lower[j][k], mc.upper[j][k], m - sdk, m + sdk, sdk)]
            )
        for n, c in enumerate(grid):
            traj_rows.append(
                [s.cell_id, int(c)]
                + [f"{v:.8f}" for v in (soh[n], lo[n], hi[n], soh[n] - sd[n], soh[n] + sd[n])]
            )
        plot[s.cell_id] = {
            "anchor": list(anchor),
            "levels": list(spec.soh_levels),
            "knots": {
                "mean": mc.mean[j].tolist(),
                "ci95_lower": mc.lower[j].tolist(),
                "ci95_upper": mc.upper[j].tolist(),
                "std": mc.std[j].tolist(),
            },
            "mc_samples_used": int(len(curves)),
        }
    with open(out / "knots_pred.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["cell_id", "soh_level", "cycle_mean", "ci95_lower", "ci95_upper", "sd_lower", "sd_upper", "cycle_std"])
        w.writerows(knot_rows)
    with open(out / "trajectory_pred.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["cell_id", "cycle", "soh", "soh_ci95_lower", "soh_ci95_upper", "soh_sd_lower", "soh_sd_upper"])
        w.writerows(traj_rows)
    _dump(plot, out / "plot_data.json")
    return _finish(out, failures)


def cmd_evaluate(cfg: RunConfig, out: Path) -> int:
    fleet = load_fleet(cfg)
    rep = run_cv(fleet, cfg.pipeline())
    _dump(rep.to_json(), out / "report.json")
    table = format_table(
        [dict(fold=f["fold"], **{k: f.get(k) for k in ("knot_mae", "knot_mape", "traj_mae", "traj_mape", "eol_in_ci")}) for f in rep.per_fold]
        + [dict(fold="all", **{k: rep.aggregate.get(k) for k in ("knot_mae", "knot_mape", "traj_mae", "traj_mape", "eol_in_ci")})]
    )
    (out / "report.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return _finish(out, rep.failures)


def cmd_robustness(cfg: RunConfig, out: Path) -> int:
    fleet = load_fleet(cfg)
    pcfg = cfg.pipeline()
    rep = run_cv(fleet, pcfg)
    study = robustness_study(fleet, rep, pcfg, cfg.sigmas, cfg.n_draws, seed=cfg.seed)
    _dump({f"{s:g}": v for s, v in study.items()}, out / "robustness.json")
    write_box_csv(study, out / "robustness_box.csv")
    print(format_table([{"sigma": s, **{k: v[k] for k in ("q1", "median", "q3")}} for s, v in study.items()]))
    return _finish(out, rep.failures)


def cmd_cycle_study(cfg: RunConfig, out: Path) -> int:
    fleet = load_fleet(cfg)
    rows = input_cycle_study(fleet, cfg.pipeline(), tuple(cfg.cycle_counts))
    _dump({"rows": rows}, out / "cycle_study.json")
    table = format_table(rows)
    (out / "cycle_study.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="knotcast", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run-config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--knots", type=int, help="number of knots K")
    common.add_argument("--knot-mode", choices=["uniform", "optimized"])
    common.add_argument("--input-cycles", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--sigma", help="comma-separated perturbation levels")
    common.add_argument("--folds", type=int)
    common.add_argument("--data", help="directory holding cycles.csv and capacity.csv")
    common.add_argument("--cycles", help="cycles.csv path")
    common.add_argument("--capacity", help="capacity.csv path")
    common.add_argument("--cells", type=int, help="synthetic fleet size")
    common.add_argument("--recorded-cycles", type=int, help="early cycles with raw curves per synthetic cell")
    common.add_argument("--epochs", type=int)
    common.add_argument("--budget", type=int, help="Bayesian optimisation evaluations")
    common.add_argument("--draws", type=int, help="perturbation draws per sigma")
    common.add_argument("--mc-samples", type=int)
    common.add_argument("--cycle-counts", help="comma-separated input-cycle counts for cycle-study")
    common.add_argument("-v", "--verbose", action="store_true")

    for name in ("synth", "optimize-knots", "evaluate", "robustness", "cycle-study"):
        sub.add_parser(name, parents=[common])
    t = sub.add_parser("train", parents=[common])
    t.add_argument("--resume", help="continue training an existing model file")
    pr = sub.add_parser("predict", parents=[common])
    pr.add_argument("--model", required=True)
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.data.synth_seed = args.seed
        cfg.train.seed = args.seed
    if args.knots is not None:
        cfg.knots.k = args.knots
    if args.knot_mode:
        cfg.knots.mode = args.knot_mode
    if args.input_cycles is not None:
        cfg.input_cycles = args.input_cycles
    if args.out:
        cfg.out = args.out
    if args.sigma:
        cfg.sigmas = [float(v) for v in args.sigma.split(",") if v]
    if args.folds is not None:
        cfg.folds = args.folds
    if args.data:
        cfg.data.cycles_csv = str(Path(args.data) / "cycles.csv")
        cfg.data.capacity_csv = str(Path(args.data) / "capacity.csv")
    if args.cycles:
        cfg.data.cycles_csv = args.cycles
    if args.capacity:
        cfg.data.capacity_csv = args.capacity
    if args.cells is not None:
        cfg.data.synth.n_cells = args.cells
    if args.recorded_cycles is not None:
        cfg.data.synth.recorded_cycles = args.recorded_cycles
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    if args.budget is not None:
        cfg.knots.budget = args.budget
    if args.draws is not None:
        cfg.n_draws = args.draws
    if args.mc_samples is not None:
        cfg.mc_samples = args.mc_samples
    if args.cycle_counts:
        cfg.cycle_counts = [int(v) for v in args.cycle_counts.split(",") if v]
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    warnings.simplefilter("default")
    _apply_threads()
    try:
        cfg = resolve_config(args)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        if not os.access(out, os.W_OK):
            raise OSError(f"output directory {out} is not writable")
        _dump(cfg.to_dict(), out / f"config.{args.command}.json")
        cmd = args.command
        if cmd == "synth":
            return cmd_synth(cfg, out)
        if cmd == "optimize-knots":
            return cmd_optimize_knots(cfg, out)
        if cmd == "train":
            return cmd_train(cfg, out, args.resume)
        if cmd == "predict":
            return cmd_predict(cfg, out, args.model)
        if cmd == "evaluate":
            return cmd_evaluate(cfg, out)
        if cmd == "robustness":
            return cmd_robustness(cfg, out)
        if cmd == "cycle-study":
            return cmd_cycle_study(cfg, out)
    except (OSError, ValueError) as exc:
        print(f"knotcast: error: {exc}", file=sys.stderr)
        return 2
    return 1


if __name__ == "__main__":
    sys.exit(main())
