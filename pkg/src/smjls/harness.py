"""Monte Carlo experiment orchestration: error tables, error curves and the
two-way refinement study, with deterministic seeding and CSV reports."""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from . import __version__
from .model import SMJLSModel, model_from_dict, model_hash, model_to_dict
from .quantizer import QuantizationGrid, clvq_train, distortion_estimate
from .riccati import BranchTree, build_branch_tree, count_branches
from .filters import (
    BatchData,
    estimate_paths,
    gains_from_cov,
    kbf_cov_paths,
    lmmse_offline,
    quantized_cov_paths,
    sample_batch,
    truth_paths,
)

__all__ = [
    "ExperimentConfig",
    "ComparisonReport",
    "ise",
    "train_grids",
    "build_trees",
    "table1",
    "table2",
    "table34",
    "riccati_error_curve",
    "filter_error_curve",
    "refinement_study",
    "write_csv",
    "write_manifest",
]

log = logging.getLogger(__name__)

_CONFIG_KEYS = {
    "model", "horizon", "horizons", "dt", "ode_step", "max_depth", "grid_sizes",
    "mc_runs", "seed", "metrics", "out_dir", "clvq_iters", "clvq_gamma0",
    "clvq_plateau_frac", "distortion_samples", "traj_n_max", "node_budget",
    "threads", "obs_delay", "project_exact_sojourn", "chunk_cap",
}


@dataclass
class ExperimentConfig:
    model: dict = field(default_factory=lambda: {"preset": "maglev"})
    horizon: float = 0.02
    horizons: list | None = None
    dt: float = 1e-4
    ode_step: float | None = None
    max_depth: int = 8
    grid_sizes: list = field(default_factory=lambda: [10, 50, 100])
    mc_runs: int = 10_000
    seed: int = 20_240_810
    metrics: list = field(default_factory=lambda: ["ise"])
    out_dir: str = "out"
    clvq_iters: int = 1_000_000
    clvq_gamma0: float = 0.3
    clvq_plateau_frac: float = 0.5
    distortion_samples: int = 100_000
    traj_n_max: int = 256
    node_budget: int = 1_000_000
    threads: int = 0  # 0 = available parallelism
    obs_delay: float = 0.0
    project_exact_sojourn: bool = False
    chunk_cap: int = 2_000_000  # max runs * ticks held in memory at once

    def __post_init__(self):
        if self.horizons is None:
            self.horizons = [self.horizon]
        self.validate()

    def validate(self):
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        for T in self.horizons:
            n = round(T / self.dt)
            if abs(n * self.dt - T) > 1e-12:
                raise ValueError(f"dt={self.dt} does not divide horizon {T}")
        if self.mc_runs < 1:
            raise ValueError("mc_runs must be >= 1")
        if self.ode_step is not None:
            sub = round(self.dt / self.ode_step)
            if abs(sub * self.ode_step - self.dt) > 1e-15:
                raise ValueError("ode_step must divide dt")

    @property
    def ode(self) -> float:
        return self.ode_step if self.ode_step is not None else self.dt / 10.0

    def resolve_model(self) -> SMJLSModel:
        return model_from_dict(self.model)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - _CONFIG_KEYS
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def apply_overrides(self, pairs: list[str]) -> "ExperimentConfig":
        d = asdict(self)
        for kv in pairs:
            key, _, raw = kv.partition("=")
            if not _ or key not in _CONFIG_KEYS:
                raise ValueError(f"bad override {kv!r}")
            d[key] = json.loads(raw)
        return ExperimentConfig.from_dict(d)


def ise(x_true: np.ndarray, x_hat: np.ndarray, dt: float) -> float:
    """Trapezoidal integral of the squared estimation error over the run."""
    x_true = np.asarray(x_true, dtype=float)
    x_hat = np.asarray(x_hat, dtype=float)
    if x_true.shape != x_hat.shape:
        raise ValueError(f"path shapes differ: {x_true.shape} vs {x_hat.shape}")
    err2 = np.sum((x_true - x_hat) ** 2, axis=-1)
    return float(np.trapezoid(err2, dx=dt, axis=-1))


def _ise_batch(x: np.ndarray, xh: np.ndarray, dt: float) -> np.ndarray:
    # diverged estimates carry inf/NaN through to flagged cells
    with np.errstate(over="ignore", invalid="ignore"):
        return np.trapezoid(np.sum((x - xh) ** 2, axis=2), dx=dt, axis=1)


# -- grids and trees -----------------------------------------------------------


def _grid_seed(root_seed: int, mode: int, nu: int) -> int:
    ss = np.random.SeedSequence(entropy=int(root_seed), spawn_key=(100 + mode, nu))
    return int(ss.generate_state(1)[0])


def train_grids(model: SMJLSModel, cfg: ExperimentConfig, sizes=None) -> dict:
    """One codebook per (mode, grid size); deterministic in the root seed."""
    sizes = cfg.grid_sizes if sizes is None else sizes
    grids = {}
    for i in range(model.n_modes):
        for nu in sizes:
            g = clvq_train(
                model.sojourns[i],
                nu,
                iters=cfg.clvq_iters,
                schedule=(cfg.clvq_gamma0, cfg.clvq_plateau_frac),
                seed=_grid_seed(cfg.seed, i, nu),
            )
            grids[(i, nu)] = QuantizationGrid(
                mode=i,
                points=g.points,
                weights=g.weights,
                distortion=g.distortion,
                train_meta=g.train_meta,
            )
    return grids


def build_trees(model: SMJLSModel, grids: dict, cfg: ExperimentConfig,
                horizon: float | None = None) -> dict:
    horizon = cfg.horizon if horizon is None else horizon
    trees = {}
    for nu in cfg.grid_sizes:
        trees[nu] = build_branch_tree(
            model,
            [grids[(i, nu)] for i in range(model.n_modes)],
            horizon=horizon,
            max_depth=cfg.max_depth,
            dt=cfg.dt,
            ode_step=cfg.ode,
            node_budget=cfg.node_budget,
        )
    return trees


# -- tables --------------------------------------------------------------------


def table1(model: SMJLSModel, cfg: ExperimentConfig, grids: dict | None = None) -> list[dict]:
    """Codebook distortion per (grid size, starting mode), with standard
    errors from a fresh evaluation sample."""
    if grids is None:
        grids = train_grids(model, cfg)
    rows = []
    for nu in cfg.grid_sizes:
        row = {"nu": nu}
        for i in range(model.n_modes):
            d, se = distortion_estimate(
                grids[(i, nu)], model.sojourns[i], cfg.distortion_samples,
                seed=_grid_seed(cfg.seed, i, nu) + 1,
            )
            row[f"err_mode{i}"] = d
            row[f"se_mode{i}"] = se
        rows.append(row)
    return rows


def table2(model: SMJLSModel, cfg: ExperimentConfig, trees: dict | None = None,
           grids: dict | None = None, horizon: float | None = None) -> list[dict]:
    """Usable codeword counts (horizon point included) and branch counts."""
    horizon = cfg.horizon if horizon is None else horizon
    if trees is None:
        if grids is None:
            grids = train_grids(model, cfg)
        trees = build_trees(model, grids, cfg, horizon=horizon)
    rows = []
    for nu in cfg.grid_sizes:
        tree = trees[nu]
        row = {"nu": nu}
        for i, c in enumerate(tree.used_point_counts()):
            row[f"used_mode{i}"] = c
        row["branches"] = tree.n_nodes
        oracle = count_branches(
            tree.effective_grids, model.embedded, model.init_mode_dist,
            tree.horizon, tree.max_depth,
        )
        row["branches_enumerated"] = oracle
        rows.append(row)
    return rows


@dataclass
class ComparisonReport:
    rows: list = field(default_factory=list)
    per_run: dict = field(default_factory=dict)  # (T, nu) -> dict of ISE arrays


def _chunk_ranges(n_runs: int, n_ticks: int, cap: int) -> list[tuple[int, int]]:
    size = max(1, min(n_runs, cap // max(1, n_ticks)))
    return [(a, min(a + size, n_runs)) for a in range(0, n_runs, size)]


def _compare_chunk(model, trees, T, dt, ode, n_runs, start, seed, n_max,
                   obs_delay, project_exact):
    """ISE per run for the reference filter, the Markov estimator and one
    quantized filter per tree; shared noise across all of them."""
    batch = sample_batch(model, T, dt, n_runs, seed, start_index=start, n_max=n_max)
    x, dy = truth_paths(batch)
    out = {}
    P = kbf_cov_paths(batch, ode_step=ode)
    xh = estimate_paths(batch, dy, gains_from_cov(batch, P))
    out["kbf"] = _ise_batch(x, xh, dt)
    try:
        gains_tab, _, _, finite_ticks = lmmse_offline(model, dt, T, ode_step=ode)
        nt = batch.n_ticks
        K = np.empty((n_runs, nt + 1, model.n1, model.n2))
        for j in range(nt + 1):
            K[:, j] = gains_tab[j][batch.mode_grid[:, j]]
        xf = estimate_paths(batch, dy, K)
        out["lmmse"] = _ise_batch(x, xf, dt)
    except ValueError:
        out["lmmse"] = np.full(n_runs, np.nan)
    censored = {}
    for nu, tree in trees.items():
        Pq, _, cens = quantized_cov_paths(
            tree, batch, obs_delay=obs_delay, project_exact=project_exact
        )
        xq = estimate_paths(batch, dy, gains_from_cov(batch, Pq))
        out[f"quantized_{nu}"] = _ise_batch(x, xq, dt)
        censored[nu] = cens
    out["censored"] = censored
    return out


def _compare_chunk_star(args):
    return _compare_chunk(*args)


def table34(model: SMJLSModel, cfg: ExperimentConfig, trees_by_T: dict,
            horizons: list | None = None) -> ComparisonReport:
    """Paired filter comparison over horizons and grid sizes.

    All filters for one horizon share trajectories, initial states and noise
    (common random numbers); non-finite results become NaN cells instead of
    aborting the table.
    """
    horizons = cfg.horizons if horizons is None else horizons
    report = ComparisonReport()
    for T in horizons:
        trees = trees_by_T[T]
        n_ticks = int(round(T / cfg.dt))
        chunks = _chunk_ranges(cfg.mc_runs, n_ticks, cfg.chunk_cap)
        tasks = [
            (model, trees, T, cfg.dt, cfg.ode, b - a, a, cfg.seed,
             cfg.traj_n_max, cfg.obs_delay, cfg.project_exact_sojourn)
            for a, b in chunks
        ]
        workers = cfg.threads if cfg.threads > 0 else (os.cpu_count() or 1)
        if workers > 1 and len(tasks) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                parts = list(pool.map(_compare_chunk_star, tasks))
        else:
            parts = [_compare_chunk_star(t) for t in tasks]
        merged = {
            k: np.concatenate([p[k] for p in parts])
            for k in parts[0]
            if k != "censored"
        }
        censored = {
            nu: np.concatenate([p["censored"][nu] for p in parts])
            for nu in trees
        }
        report.per_run[T] = merged
        for nu in cfg.grid_sizes:
            q = merged[f"quantized_{nu}"]
            row = {
                "horizon": T,
                "nu": nu,
                "branches": trees[nu].n_nodes,
                "n_runs": cfg.mc_runs,
                "kbf_mean": _nanaware_mean(merged["kbf"]),
                "kbf_se": _nanaware_se(merged["kbf"]),
                "quantized_mean": _nanaware_mean(q),
                "quantized_se": _nanaware_se(q),
                "lmmse_mean": _nanaware_mean(merged["lmmse"]),
                "lmmse_se": _nanaware_se(merged["lmmse"]),
                "diff_q_kbf": _nanaware_mean(q - merged["kbf"]),
                "diff_q_kbf_se": _nanaware_se(q - merged["kbf"]),
                "diff_lmmse_q": _nanaware_mean(merged["lmmse"] - q),
                "diff_lmmse_q_se": _nanaware_se(merged["lmmse"] - q),
                "censor_rate": float(np.mean(censored[nu])),
                "nonfinite_lmmse": int(np.sum(~np.isfinite(merged["lmmse"]))),
                "nonfinite_quantized": int(np.sum(~np.isfinite(q))),
            }
            report.rows.append(row)
    return report


def _nanaware_mean(v: np.ndarray) -> float:
    return float(np.mean(v))  # NaN propagates by design (flagged separately)


def _nanaware_se(v: np.ndarray) -> float:
    if len(v) < 2:
        return float("nan")
    return float(np.std(v, ddof=1) / np.sqrt(len(v)))


# -- error curves ---------------------------------------------------------------


def _restriction_mask(batch: BatchData, max_depth: int) -> np.ndarray:
    """Tick inclusion mask for t <= horizon and t <= time of the jump after
    the deepest pre-computed branch."""
    N, nt = batch.n_runs, batch.n_ticks
    mask = np.ones((N, nt + 1), dtype=bool)
    for r, traj in enumerate(batch.trajs):
        if traj.n_jumps > max_depth:
            t_lim = traj.t_jump[max_depth + 1]
            cut = int(np.floor(t_lim / batch.dt + 1e-12)) + 1
            mask[r, cut:] = False
    return mask


def _op_norms(M: np.ndarray) -> np.ndarray:
    """Spectral norms of a stack of symmetric matrices."""
    w = np.linalg.eigvalsh(M)
    return np.max(np.abs(w), axis=-1)


def riccati_error_curve(model: SMJLSModel, cfg: ExperimentConfig, trees: dict,
                        n_runs: int | None = None) -> dict:
    """Per-tick mean relative covariance error of the branch approximation,
    restricted to ticks before censoring.  Noise-free: only trajectories
    matter."""
    n_runs = cfg.mc_runs if n_runs is None else n_runs
    T = cfg.horizon
    nt = int(round(T / cfg.dt))
    out = {"t": np.arange(nt + 1) * cfg.dt}
    for a, b in _chunk_ranges(n_runs, nt, cfg.chunk_cap):
        batch = sample_batch(model, T, cfg.dt, b - a, cfg.seed, start_index=a,
                             n_max=cfg.traj_n_max)
        P = kbf_cov_paths(batch, ode_step=cfg.ode)
        pnorm = _op_norms(P)
        mask = _restriction_mask(batch, cfg.max_depth)
        for nu, tree in trees.items():
            Pq, _, _ = quantized_cov_paths(
                tree, batch, obs_delay=cfg.obs_delay,
                project_exact=cfg.project_exact_sojourn,
            )
            rel = _op_norms(P - Pq) / np.maximum(pnorm, 1e-300)
            key = f"nu{nu}"
            acc = out.setdefault(key, {"sum": np.zeros(nt + 1),
                                       "sumsq": np.zeros(nt + 1),
                                       "n": np.zeros(nt + 1)})
            rel_m = np.where(mask, rel, 0.0)
            acc["sum"] += rel_m.sum(axis=0)
            acc["sumsq"] += (rel_m**2).sum(axis=0)
            acc["n"] += mask.sum(axis=0)
    return _finalize_curve(out, trees)


def filter_error_curve(model: SMJLSModel, cfg: ExperimentConfig, trees: dict,
                       n_runs: int | None = None) -> dict:
    """Per-tick mean squared distance between the reference estimate and the
    quantized one, on shared noise, restricted before censoring."""
    n_runs = cfg.mc_runs if n_runs is None else n_runs
    T = cfg.horizon
    nt = int(round(T / cfg.dt))
    out = {"t": np.arange(nt + 1) * cfg.dt}
    for a, b in _chunk_ranges(n_runs, nt, cfg.chunk_cap):
        batch = sample_batch(model, T, cfg.dt, b - a, cfg.seed, start_index=a,
                             n_max=cfg.traj_n_max)
        x, dy = truth_paths(batch)
        P = kbf_cov_paths(batch, ode_step=cfg.ode)
        xh = estimate_paths(batch, dy, gains_from_cov(batch, P))
        mask = _restriction_mask(batch, cfg.max_depth)
        for nu, tree in trees.items():
            Pq, _, _ = quantized_cov_paths(
                tree, batch, obs_delay=cfg.obs_delay,
                project_exact=cfg.project_exact_sojourn,
            )
            xq = estimate_paths(batch, dy, gains_from_cov(batch, Pq))
            d2 = np.sum((xh - xq) ** 2, axis=2)
            key = f"nu{nu}"
            acc = out.setdefault(key, {"sum": np.zeros(nt + 1),
                                       "sumsq": np.zeros(nt + 1),
                                       "n": np.zeros(nt + 1)})
            d2m = np.where(mask, d2, 0.0)
            acc["sum"] += d2m.sum(axis=0)
            acc["sumsq"] += (d2m**2).sum(axis=0)
            acc["n"] += mask.sum(axis=0)
    return _finalize_curve(out, trees)


def _finalize_curve(out: dict, trees: dict) -> dict:
    res = {"t": out["t"]}
    for nu in trees:
        acc = out[f"nu{nu}"]
        n = np.maximum(acc["n"], 1)
        mean = acc["sum"] / n
        var = np.maximum(acc["sumsq"] / n - mean**2, 0.0)
        res[f"mean_nu{nu}"] = mean
        res[f"se_nu{nu}"] = np.sqrt(var / n)
        res[f"n_nu{nu}"] = acc["n"]
    return res


def refinement_study(model: SMJLSModel, cfg: ExperimentConfig, grids: dict,
                     dts: list[float], sizes: list[int],
                     n_runs: int = 1000) -> list[dict]:
    """Mean squared covariance error over a (grid size, tick step) lattice.

    All cells share trajectories (they do not depend on the tick grid) and
    are evaluated on the coarsest common time grid, so both monotonicity
    directions are compared on fully paired samples.  The tick steps must
    therefore be nested (each a multiple of the finest).
    """
    dt_eval = max(dts)
    for dt in dts:
        ratio = dt_eval / dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("tick steps must nest inside the coarsest one")
    rows = []
    for dt in dts:
        nt = int(round(cfg.horizon / dt))
        stride = int(round(dt_eval / dt))
        for nu in sizes:
            tree = build_branch_tree(
                model, [grids[(i, nu)] for i in range(model.n_modes)],
                horizon=cfg.horizon, max_depth=cfg.max_depth, dt=dt,
                ode_step=dt / 10.0, node_budget=cfg.node_budget,
            )
            total, count = 0.0, 0
            for a, b in _chunk_ranges(n_runs, nt, cfg.chunk_cap):
                batch = sample_batch(model, cfg.horizon, dt, b - a, cfg.seed,
                                     start_index=a, n_max=cfg.traj_n_max)
                P = kbf_cov_paths(batch, ode_step=dt / 10.0)
                Pq, _, _ = quantized_cov_paths(tree, batch)
                mask = _restriction_mask(batch, cfg.max_depth)
                sq = _op_norms(P[:, ::stride] - Pq[:, ::stride]) ** 2
                m = mask[:, ::stride]
                total += float(np.where(m, sq, 0.0).sum())
                count += int(m.sum())
            rows.append({"nu": nu, "dt": dt, "mean_sq_err": total / max(count, 1),
                         "included_ticks": count, "runs": n_runs})
    return rows


# -- reporting ------------------------------------------------------------------


def write_csv(path, rows: list[dict]) -> None:
    """CSV with '.' decimals, header first, newline-terminated."""
    if not rows:
        raise ValueError("nothing to write")
    os.makedirs(os.path.dirname(str(path)) or ".", exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        w.writeheader()
        for row in rows:
            w.writerow(row)


def curve_rows(curve: dict) -> list[dict]:
    keys = [k for k in curve if k != "t"]
    rows = []
    for j, t in enumerate(curve["t"]):
        row = {"t": repr(float(t))}
        for k in keys:
            row[k] = repr(float(curve[k][j]))
        rows.append(row)
    return rows


def write_manifest(path, cfg: ExperimentConfig, model: SMJLSModel,
                   wall_seconds: float, outputs: list[str]) -> None:
    doc = {
        "config": asdict(cfg),
        "model_hash": model_hash(model),
        "package_version": __version__,
        "numpy_version": np.__version__,
        "wall_seconds": wall_seconds,
        "outputs": outputs,
        "written_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    os.makedirs(os.path.dirname(str(path)) or ".", exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, default=str)
