"""Command-line pipeline: train codebooks, pre-compute branches, run the
filters and reproduce the comparison tables, staged as persisted artifacts.

Stages write into the configured output directory:

    quantize    grids/grid_mode{i}_nu{nu}.json, tables/table1.csv(+png)
    precompute  trees/tree_nu{nu}_T{T}.npz, tables/table2.csv(+png)
    simulate    runs/run0_{kind}.csv, runs/run0_selection.csv
    compare     tables/table34.csv(+png)
    curves      curves/{riccati,filter}_error.csv(+png)
    validate    validation.txt
    tree-info   prints branch statistics for a tree file

Every command exits 0 exactly when all of its outputs were fully written.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time

import numpy as np

from .harness import (
    ComparisonReport,
    ExperimentConfig,
    curve_rows,
    filter_error_curve,
    ise,
    riccati_error_curve,
    table1,
    table2,
    table34,
    write_csv,
    write_manifest,
)
from .model import model_hash, validate
from .quantizer import GridFileError, load_grid, save_grid
from .riccati import NodeBudgetError, build_branch_tree, load_tree, save_tree
from .semimarkov import STREAM_NOISE, STREAM_X0, derive_rng, sample_trajectory
from .filters import lmmse_offline, run_kbf, run_lmmse, run_quantized, sample_noise
from . import plots


class StageError(RuntimeError):
    """A required artifact from an earlier stage is missing."""


def _load_config(args) -> ExperimentConfig:
    if args.config is not None:
        if not os.path.exists(args.config):
            raise FileNotFoundError(f"config file {args.config} does not exist")
        cfg = ExperimentConfig.from_json(args.config)
    else:
        cfg = ExperimentConfig()
    if args.set:
        cfg = cfg.apply_overrides(args.set)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    if args.threads is not None:
        cfg.threads = args.threads
    cfg.validate()
    return cfg


def _grid_path(cfg, mode, nu):
    return os.path.join(cfg.out_dir, "grids", f"grid_mode{mode}_nu{nu}.json")


def _tree_path(cfg, nu, T):
    return os.path.join(cfg.out_dir, "trees", f"tree_nu{nu}_T{T:g}.npz")


def _require(path, producer):
    if not os.path.exists(path):
        raise StageError(f"missing artifact {path}; run `smjls {producer}` first")


def _load_grids(cfg, model, sizes=None):
    sizes = sizes if sizes is not None else cfg.grid_sizes
    grids = {}
    h = model_hash(model)
    for i in range(model.n_modes):
        for nu in sizes:
            path = _grid_path(cfg, i, nu)
            _require(path, "quantize")
            grids[(i, nu)] = load_grid(path, expected_model_hash=h)
    return grids


def cmd_quantize(args) -> int:
    cfg = _load_config(args)
    model = cfg.resolve_model()
    rep = validate(model)
    if not rep.ok:
        print(f"invalid model:\n{rep}", file=sys.stderr)
        return 2
    t0 = time.time()
    from .harness import train_grids

    grids = train_grids(model, cfg)
    outputs = []
    h = model_hash(model)
    for (i, nu), g in grids.items():
        path = _grid_path(cfg, i, nu)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        save_grid(g, path, model_hash=h)
        outputs.append(path)
    rows = table1(model, cfg, grids)
    csv_path = os.path.join(cfg.out_dir, "tables", "table1.csv")
    write_csv(csv_path, rows)
    png_path = csv_path.replace(".csv", ".png")
    plots.plot_distortion(rows, png_path)
    outputs += [csv_path, png_path]
    write_manifest(os.path.join(cfg.out_dir, "manifest_quantize.json"), cfg, model,
                   time.time() - t0, outputs)
    for r in rows:
        print(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                       for k, v in r.items()))
    return 0


def cmd_precompute(args) -> int:
    cfg = _load_config(args)
    model = cfg.resolve_model()
    grids = _load_grids(cfg, model)
    t0 = time.time()
    outputs = []
    trees = {}
    for T in cfg.horizons:
        for nu in cfg.grid_sizes:
            tree = build_branch_tree(
                model, [grids[(i, nu)] for i in range(model.n_modes)],
                horizon=T, max_depth=cfg.max_depth, dt=cfg.dt,
                ode_step=cfg.ode, node_budget=cfg.node_budget,
            )
            path = _tree_path(cfg, nu, T)
            os.makedirs(os.path.dirname(path), exist_ok=True)
            save_tree(tree, path)
            outputs.append(path)
            if T == cfg.horizons[0]:
                trees[nu] = tree
    rows = table2(model, cfg, trees)
    csv_path = os.path.join(cfg.out_dir, "tables", "table2.csv")
    write_csv(csv_path, rows)
    png_path = csv_path.replace(".csv", ".png")
    plots.plot_branch_growth(rows, png_path)
    outputs += [csv_path, png_path]
    write_manifest(os.path.join(cfg.out_dir, "manifest_precompute.json"), cfg, model,
                   time.time() - t0, outputs)
    for r in rows:
        print(" ".join(f"{k}={v}" for k, v in r.items()))
    return 0


def cmd_tree_info(args) -> int:
    tree = load_tree(args.tree)
    s = tree.stats()
    print(f"horizon={s['horizon']:g} dt={s['dt']:g} max_depth={tree.max_depth}")
    print(f"nodes={s['nodes']} depth_reached={s['max_depth']}")
    for i, c in enumerate(s["used_points"]):
        print(f"used_points_mode{i}={c}")
    print(f"max_covariance_norm={s['p_norm_max']:.6g}")
    return 0


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    model = cfg.resolve_model()
    nu = cfg.grid_sizes[0]
    T = cfg.horizons[0]
    tree_path = _tree_path(cfg, nu, T)
    _require(tree_path, "precompute")
    tree = load_tree(tree_path, expected_model_hash=model_hash(model))
    t0 = time.time()
    n_ticks = int(round(T / cfg.dt))
    traj = sample_trajectory(model, T, n_max=cfg.traj_n_max,
                             seed=derive_rng(cfg.seed, 0, 0))
    noise = sample_noise(model, n_ticks, cfg.dt, derive_rng(cfg.seed, STREAM_NOISE, 0))
    from .filters import _cov_sqrt

    x0 = model.x0_mean + _cov_sqrt(model.x0_cov) @ derive_rng(
        cfg.seed, STREAM_X0, 0
    ).normal(size=model.n1)
    runs = {
        "kbf": run_kbf(model, traj, noise, cfg.dt, ode_step=cfg.ode, x0=x0),
        "quantized": run_quantized(model, tree, traj, noise, cfg.dt, x0=x0),
    }
    if model.is_markov():
        runs["lmmse"] = run_lmmse(model, traj, noise, cfg.dt, ode_step=cfg.ode, x0=x0)
    outputs = []
    run_dir = os.path.join(cfg.out_dir, "runs")
    os.makedirs(run_dir, exist_ok=True)
    for kind, run in runs.items():
        path = os.path.join(run_dir, f"run0_{kind}.csv")
        _write_run_csv(path, run)
        outputs.append(path)
        print(f"{kind}: ise={ise(run.x_true, run.x_hat, cfg.dt):.6g} "
              f"censored={run.censored}")
    sel_path = os.path.join(run_dir, "run0_selection.csv")
    with open(sel_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "T_k", "T_tilde_k", "S_tilde_k", "S_hat_k", "node_id"])
        for row in runs["quantized"].selection_log:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:5]] + [row[5]])
    outputs.append(sel_path)
    write_manifest(os.path.join(cfg.out_dir, "manifest_simulate.json"), cfg, model,
                   time.time() - t0, outputs)
    return 0


def _write_run_csv(path, run) -> None:
    n1 = run.x_true.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = (["t"] + [f"x_true_{i}" for i in range(n1)]
                  + [f"x_hat_{i}" for i in range(n1)] + ["P_norm", "K_norm"])
        w.writerow(header)
        for j, t in enumerate(run.times):
            if run.P_path.ndim == 4:  # per-mode stack
                pn = np.linalg.norm(run.P_path[j].sum(axis=0), 2)
            else:
                pn = np.linalg.norm(run.P_path[j], 2)
            kn = np.linalg.norm(run.K_path[j], 2)
            w.writerow([repr(float(t))]
                       + [repr(float(v)) for v in run.x_true[j]]
                       + [repr(float(v)) for v in run.x_hat[j]]
                       + [repr(float(pn)), repr(float(kn))])


def cmd_compare(args) -> int:
    cfg = _load_config(args)
    model = cfg.resolve_model()
    grids = _load_grids(cfg, model)
    trees_by_T = {}
    for T in cfg.horizons:
        trees_by_T[T] = {}
        for nu in cfg.grid_sizes:
            path = _tree_path(cfg, nu, T)
            _require(path, "precompute")
            trees_by_T[T][nu] = load_tree(path, expected_model_hash=model_hash(model))
    t0 = time.time()
    report = table34(model, cfg, trees_by_T)
    for row in report.rows:
        for i in range(model.n_modes):
            row[f"dist_mode{i}"] = grids[(i, row["nu"])].distortion
        if cfg.mc_runs < 2:
            row["se_undefined"] = True
    csv_path = os.path.join(cfg.out_dir, "tables", "table34.csv")
    write_csv(csv_path, report.rows)
    png_path = csv_path.replace(".csv", ".png")
    plots.plot_comparison(report.rows, png_path)
    write_manifest(os.path.join(cfg.out_dir, "manifest_compare.json"), cfg, model,
                   time.time() - t0, [csv_path, png_path])
    for r in report.rows:
        print(f"T={r['horizon']:g} nu={r['nu']}: kbf={r['kbf_mean']:.6g} "
              f"quantized={r['quantized_mean']:.6g} lmmse={r['lmmse_mean']:.6g} "
              f"censor_rate={r['censor_rate']:.4g}")
    return 0


def cmd_curves(args) -> int:
    cfg = _load_config(args)
    model = cfg.resolve_model()
    T = cfg.horizons[0]
    trees = {}
    for nu in cfg.grid_sizes:
        path = _tree_path(cfg, nu, T)
        _require(path, "precompute")
        trees[nu] = load_tree(path, expected_model_hash=model_hash(model))
    t0 = time.time()
    outputs = []
    cdir = os.path.join(cfg.out_dir, "curves")
    ric = riccati_error_curve(model, cfg, trees)
    path = os.path.join(cdir, "riccati_error.csv")
    write_csv(path, curve_rows(ric))
    plots.plot_error_curve(ric, path.replace(".csv", ".png"),
                           "mean relative covariance error")
    outputs += [path, path.replace(".csv", ".png")]
    fil = filter_error_curve(model, cfg, trees)
    path = os.path.join(cdir, "filter_error.csv")
    write_csv(path, curve_rows(fil))
    plots.plot_error_curve(fil, path.replace(".csv", ".png"),
                           "mean squared estimate gap")
    outputs += [path, path.replace(".csv", ".png")]
    write_manifest(os.path.join(cfg.out_dir, "manifest_curves.json"), cfg, model,
                   time.time() - t0, outputs)
    return 0


def cmd_validate(args) -> int:
    cfg = _load_config(args)
    model = cfg.resolve_model()
    rep = validate(model)
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, "validation.txt")
    with open(path, "w") as fh:
        fh.write(str(rep) + "\n")
    print(str(rep))
    return 0


def _add_common(p):
    p.add_argument("--config", help="experiment config (JSON)")
    p.add_argument("--seed", type=int, help="root seed override")
    p.add_argument("--out", help="output directory override")
    p.add_argument("--threads", type=int, help="worker cap for Monte Carlo chunks")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="config override, value parsed as JSON")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="smjls",
        description="quantized approximate Kalman-Bucy filtering for "
                    "semi-Markov jump linear systems",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, doc in [
        ("quantize", cmd_quantize, "train sojourn codebooks and report distortions"),
        ("precompute", cmd_precompute, "build and store the branch trees"),
        ("simulate", cmd_simulate, "single-run filter paths and selection log"),
        ("compare", cmd_compare, "paired Monte Carlo filter comparison table"),
        ("curves", cmd_curves, "per-tick covariance and estimate error curves"),
        ("validate", cmd_validate, "check a model description"),
    ]:
        p = sub.add_parser(name, help=doc)
        _add_common(p)
        p.set_defaults(fn=fn)
    p = sub.add_parser("tree-info", help="print statistics of a stored tree")
    p.add_argument("tree", help="tree file (.npz)")
    p.set_defaults(fn=cmd_tree_info)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except StageError as e:
        print(str(e), file=sys.stderr)
        return 2
    except (FileNotFoundError, GridFileError, NodeBudgetError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
