"""Mode-frozen Riccati flows and the pre-computed branch tree.

The filter covariance obeys dP/dt = R(P, i) with the mode i frozen between
jumps.  All solution paths the online filter can ever need are integrated
off-line: one path per sequence of (mode, quantized sojourn) whose partial
sums stay within the horizon, each spanning the full horizon from its entry
covariance.  The horizon itself is appended to every grid so that large
sojourns project onto a usable codeword.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .model import Mode, SMJLSModel, model_hash
from .quantizer import QuantizationGrid

__all__ = [
    "RiccatiBlowupError",
    "NodeBudgetError",
    "RiccatiPath",
    "BranchTree",
    "LipschitzDiagnostic",
    "riccati_rhs",
    "integrate_phi",
    "build_branch_tree",
    "count_branches",
    "used_points",
    "empirical_lipschitz",
    "save_tree",
    "load_tree",
]

log = logging.getLogger(__name__)


class RiccatiBlowupError(RuntimeError):
    def __init__(self, t: float):
        super().__init__(f"Riccati integration produced non-finite entries at t={t:.6g}")
        self.t = t


class NodeBudgetError(RuntimeError):
    def __init__(self, budget: int, stats: dict):
        super().__init__(
            f"branch tree exceeded the node budget of {budget} "
            f"(reached depth {stats.get('depth')}, {stats.get('nodes')} nodes)"
        )
        self.stats = stats


# -- mode matrices packed for batched integration ----------------------------


def _mode_operators(modes) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    a = np.stack([m.A for m in modes])
    ee = np.stack([m.E @ m.E.T for m in modes])
    ctwc = np.stack([m.C.T @ m.ddt_inv @ m.C for m in modes])
    return a, ee, ctwc


def riccati_rhs(P: np.ndarray, mode: Mode) -> np.ndarray:
    """R(P, i) = A P + P A' + E E' - P C'(DD')^{-1} C P, symmetrized."""
    P = np.asarray(P, dtype=float)
    n1 = mode.A.shape[0]
    if P.shape != (n1, n1):
        raise ValueError(f"P shape {P.shape} incompatible with mode of size {n1}")
    ap = mode.A @ P
    out = ap + ap.T + mode.E @ mode.E.T - P @ mode.C.T @ mode.ddt_inv @ mode.C @ P
    return 0.5 * (out + out.T)


def _rhs_batch(P, A, EE, CtWC):
    ap = A @ P
    return ap + ap.transpose(0, 2, 1) + EE - P @ CtWC @ P


def _rk4_batch(P, A, EE, CtWC, h: float, nsteps: int, t0: float = 0.0):
    """Classical fixed-step RK4 on a stack of matrices, symmetrizing after
    every step; raises on blow-up with the offending time."""
    for k in range(nsteps):
        k1 = _rhs_batch(P, A, EE, CtWC)
        k2 = _rhs_batch(P + (0.5 * h) * k1, A, EE, CtWC)
        k3 = _rhs_batch(P + (0.5 * h) * k2, A, EE, CtWC)
        k4 = _rhs_batch(P + h * k3, A, EE, CtWC)
        P = P + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        P = 0.5 * (P + P.transpose(0, 2, 1))
        if not np.all(np.isfinite(P)):
            raise RiccatiBlowupError(t0 + (k + 1) * h)
    return P


def _advance(P, A, EE, CtWC, duration: float, ode_step: float, t0: float = 0.0):
    """Integrate an arbitrary duration with steps of at most ode_step."""
    if duration <= 0:
        return P
    nsteps = max(1, int(np.ceil(duration / ode_step - 1e-12)))
    return _rk4_batch(P, A, EE, CtWC, duration / nsteps, nsteps, t0=t0)


@dataclass(frozen=True)
class RiccatiPath:
    """Solution P(j * step) for j = 0..ceil(duration/step), one frozen mode."""

    mode: int
    t0_value: np.ndarray
    step: float
    values: np.ndarray

    def value_at_tick(self, j: int) -> np.ndarray:
        return self.values[j]

    @property
    def duration(self) -> float:
        return (len(self.values) - 1) * self.step


def integrate_phi(
    p: np.ndarray,
    mode: Mode,
    duration: float,
    store_step: float,
    ode_step: float | None = None,
) -> RiccatiPath:
    """Riccati flow from p with `mode` frozen, sampled every store_step.

    ode_step must divide store_step; default is store_step / 10.
    """
    p = np.asarray(p, dtype=float)
    if ode_step is None:
        ode_step = store_step / 10.0
    sub = int(round(store_step / ode_step))
    if sub < 1 or abs(sub * ode_step - store_step) > 1e-12 * store_step:
        raise ValueError("ode_step must divide store_step")
    n_ticks = int(round(duration / store_step)) if duration > 0 else 0
    if duration > 0 and abs(n_ticks * store_step - duration) > 1e-9 * max(duration, 1.0):
        raise ValueError("duration must be a multiple of store_step")
    A, EE, CtWC = _mode_operators([mode])
    P = 0.5 * (p + p.T)[None]
    values = np.empty((n_ticks + 1, p.shape[0], p.shape[0]))
    values[0] = P[0]
    for j in range(n_ticks):
        P = _rk4_batch(P, A, EE, CtWC, ode_step, sub, t0=j * store_step)
        values[j + 1] = P[0]
    return RiccatiPath(mode=mode.index, t0_value=values[0].copy(), step=store_step, values=values)


# -- branch tree --------------------------------------------------------------


@dataclass
class BranchTree:
    """Forest of pre-computed covariance paths indexed by quantized jump
    sequences.  Roots exist for every mode with positive initial probability;
    each root also has one child per successor mode for sojourns that project
    onto the appended horizon point."""

    horizon: float
    dt: float
    ode_step: float
    max_depth: int
    p0: np.ndarray
    effective_grids: list[np.ndarray]
    parent: np.ndarray
    depth: np.ndarray
    mode: np.ndarray
    entry_sojourn: np.ndarray
    entry_time: np.ndarray
    entry_grid_index: np.ndarray
    paths: np.ndarray
    model_hash: str = ""
    _children: dict = field(default_factory=dict, repr=False)
    roots: dict = field(default_factory=dict, repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.parent)

    @property
    def n_ticks(self) -> int:
        return self.paths.shape[1] - 1

    def child(self, node: int, grid_index: int, next_mode: int) -> int | None:
        return self._children.get((node, grid_index, next_mode))

    def children_of(self, node: int) -> list[int]:
        return [c for (p, _, _), c in self._children.items() if p == node]

    def used_point_counts(self) -> list[int]:
        """Usable codewords per mode, horizon point included."""
        return [len(g) for g in self.effective_grids]

    def max_path_norm(self) -> float:
        return float(
            np.sqrt(np.max(np.abs(np.linalg.eigvalsh(self.paths)) ** 2))
            if self.n_nodes
            else 0.0
        )

    def rebuild_index(self):
        self._children = {}
        self.roots = {}
        for i in range(self.n_nodes):
            if self.parent[i] < 0:
                self.roots[int(self.mode[i])] = i
            else:
                key = (int(self.parent[i]), int(self.entry_grid_index[i]), int(self.mode[i]))
                self._children[key] = i

    def stats(self) -> dict:
        return {
            "nodes": self.n_nodes,
            "max_depth": int(self.depth.max()) if self.n_nodes else 0,
            "used_points": self.used_point_counts(),
            "horizon": self.horizon,
            "dt": self.dt,
            "p_norm_max": self.max_path_norm(),
        }


def effective_grid(points: np.ndarray, horizon: float) -> np.ndarray:
    """Codewords strictly below the horizon, with the horizon appended."""
    pts = np.asarray(points, dtype=float)
    return np.concatenate([pts[pts < horizon], [horizon]])


def used_points(grid: QuantizationGrid, horizon: float) -> int:
    """Number of raw codewords strictly below the horizon."""
    return int(np.sum(grid.points < horizon))


def count_branches(
    effective_grids: list[np.ndarray],
    embedded: np.ndarray,
    init_mode_dist: np.ndarray,
    horizon: float,
    max_depth: int,
    budget: int | None = None,
) -> int:
    """Node count of the tree by direct enumeration, no integration.

    Counts, for every root mode, the quantized sojourn sequences whose
    partial sums stay within the horizon (the appended horizon point is only
    reachable from a root).
    """
    n_modes = len(effective_grids)
    counter = {"n": 0}

    def rec(mode: int, remaining: float, depth: int):
        counter["n"] += 1
        if budget is not None and counter["n"] > budget:
            raise NodeBudgetError(budget, {"nodes": counter["n"], "depth": depth})
        if depth >= max_depth:
            return
        for s in effective_grids[mode]:
            if s <= remaining + 1e-15:
                for j in range(n_modes):
                    if embedded[mode, j] > 0:
                        rec(j, remaining - s, depth + 1)

    for i in range(n_modes):
        if init_mode_dist[i] > 0:
            rec(i, horizon, 0)
    return counter["n"]


def build_branch_tree(
    model: SMJLSModel,
    grids: list[QuantizationGrid],
    horizon: float,
    max_depth: int = 8,
    dt: float = 1e-4,
    p0: np.ndarray | None = None,
    ode_step: float | None = None,
    node_budget: int = 1_000_000,
) -> BranchTree:
    """Breadth-first expansion of all covariance branches up to max_depth.

    A node at cumulative quantized time tau spawns, for every usable
    codeword s (tau + s within the horizon) and every successor mode of
    positive embedded probability, a child whose entry covariance is the
    parent path evaluated at local time s.  Entry values between stored
    ticks come from one extra RK4 sub-integration off the nearest lower
    tick, which keeps the entry identity exact to integrator accuracy.
    """
    if len(grids) != model.n_modes:
        raise ValueError("need one grid per mode")
    if ode_step is None:
        ode_step = dt / 10.0
    if p0 is None:
        p0 = model.x0_cov
    p0 = np.asarray(p0, dtype=float)
    n_ticks = int(round(horizon / dt))
    if abs(n_ticks * dt - horizon) > 1e-12:
        raise ValueError("dt must divide the horizon")
    sub = int(round(dt / ode_step))
    if abs(sub * ode_step - dt) > 1e-15:
        raise ValueError("ode_step must divide dt")
    eff = [effective_grid(g.points, horizon) for g in grids]

    # fail fast if the combinatorics exceed the budget
    count_branches(eff, model.embedded, model.init_mode_dist, horizon, max_depth, node_budget)

    A, EE, CtWC = _mode_operators(model.modes)
    n1 = model.n1

    parent, depth, mode_arr, entry_s, entry_t, entry_gi = [], [], [], [], [], []
    entry_cov, remaining = [], []

    for i in range(model.n_modes):
        if model.init_mode_dist[i] > 0:
            parent.append(-1)
            depth.append(0)
            mode_arr.append(i)
            entry_s.append(np.nan)
            entry_t.append(0.0)
            entry_gi.append(-1)
            entry_cov.append(p0)
            remaining.append(horizon)

    paths_chunks: list[np.ndarray] = []
    level_start = 0
    level_ids = list(range(len(parent)))
    while level_ids:
        # integrate every node of this level in one batch
        P = np.stack([entry_cov[i] for i in level_ids])
        P = 0.5 * (P + P.transpose(0, 2, 1))
        m_idx = np.array([mode_arr[i] for i in level_ids])
        lv_paths = np.empty((len(level_ids), n_ticks + 1, n1, n1))
        lv_paths[:, 0] = P
        for j in range(n_ticks):
            P = _rk4_batch(P, A[m_idx], EE[m_idx], CtWC[m_idx], ode_step, sub, t0=j * dt)
            lv_paths[:, j + 1] = P
        paths_chunks.append(lv_paths)

        next_ids = []
        for row, nid in enumerate(level_ids):
            if depth[nid] >= max_depth:
                continue
            i = mode_arr[nid]
            tau = entry_t[nid]
            rem = remaining[nid]
            for gi, s in enumerate(eff[i]):
                # same arithmetic as count_branches so counts always agree
                if s > rem + 1e-15:
                    continue
                # entry covariance: stored tick below s, then sub-integrate
                j0 = min(int(np.floor(s / dt + 1e-12)), n_ticks)
                base = lv_paths[row, j0][None]
                frac_step = s - j0 * dt
                if frac_step > 1e-15:
                    base = _advance(base, A[i : i + 1], EE[i : i + 1], CtWC[i : i + 1],
                                    frac_step, ode_step, t0=j0 * dt)
                for jmode in range(model.n_modes):
                    if model.embedded[i, jmode] <= 0:
                        continue
                    parent.append(nid)
                    depth.append(depth[nid] + 1)
                    mode_arr.append(jmode)
                    entry_s.append(float(s))
                    entry_t.append(tau + float(s))
                    entry_gi.append(gi)
                    entry_cov.append(base[0])
                    remaining.append(rem - float(s))
                    next_ids.append(len(parent) - 1)
        level_start += len(level_ids)
        level_ids = next_ids

    tree = BranchTree(
        horizon=float(horizon),
        dt=float(dt),
        ode_step=float(ode_step),
        max_depth=int(max_depth),
        p0=p0,
        effective_grids=eff,
        parent=np.array(parent, dtype=np.int64),
        depth=np.array(depth, dtype=np.int32),
        mode=np.array(mode_arr, dtype=np.int8),
        entry_sojourn=np.array(entry_s, dtype=float),
        entry_time=np.array(entry_t, dtype=float),
        entry_grid_index=np.array(entry_gi, dtype=np.int32),
        paths=np.concatenate(paths_chunks, axis=0),
        model_hash=model_hash(model),
    )
    tree.rebuild_index()
    log.info(
        "branch tree built: %d nodes, used points per mode %s",
        tree.n_nodes,
        tree.used_point_counts(),
    )
    return tree


# -- empirical regularity diagnostics ----------------------------------------


@dataclass(frozen=True)
class LipschitzDiagnostic:
    ell_hat: float
    eta_hat: float
    pbar_norm: float


def empirical_lipschitz(
    model: SMJLSModel,
    samples: list[tuple[np.ndarray, np.ndarray, float, float]],
    tree: BranchTree | None = None,
    ode_step: float = 1e-5,
) -> LipschitzDiagnostic:
    """Empirical Lipschitz ratios of the flow in time and initial value.

    For each (p, p_hat, t, t_hat): the time ratio uses the same start p at
    the two times, the value ratio the two starts at the same time t.
    Degenerate pairs (zero denominator) are skipped.
    """
    A, EE, CtWC = _mode_operators(model.modes)
    ell, eta, pbar = 0.0, 0.0, 0.0
    for p, p_hat, t, t_hat in samples:
        p = np.asarray(p, float)[None]
        p_hat = np.asarray(p_hat, float)[None]
        for i in range(model.n_modes):
            ai, eei, ci = A[i : i + 1], EE[i : i + 1], CtWC[i : i + 1]
            f_p_t = _advance(p, ai, eei, ci, t, ode_step)
            pbar = max(pbar, float(np.linalg.norm(f_p_t[0], 2)))
            if abs(t - t_hat) > 0:
                f_p_th = _advance(p, ai, eei, ci, t_hat, ode_step)
                ell = max(
                    ell, float(np.linalg.norm(f_p_t[0] - f_p_th[0], 2)) / abs(t - t_hat)
                )
            dp = float(np.linalg.norm((p - p_hat)[0], 2))
            if dp > 0:
                f_ph_t = _advance(p_hat, ai, eei, ci, t, ode_step)
                eta = max(eta, float(np.linalg.norm(f_p_t[0] - f_ph_t[0], 2)) / dp)
    if tree is not None:
        pbar = max(pbar, tree.max_path_norm())
    return LipschitzDiagnostic(ell_hat=ell, eta_hat=eta, pbar_norm=pbar)


# -- persistence --------------------------------------------------------------


def save_tree(tree: BranchTree, path) -> None:
    grids_flat = np.concatenate(tree.effective_grids)
    grids_len = np.array([len(g) for g in tree.effective_grids])
    np.savez_compressed(
        path,
        header=np.array(
            [tree.horizon, tree.dt, tree.ode_step, tree.max_depth, tree.paths.shape[2]]
        ),
        model_hash=np.array(tree.model_hash),
        p0=tree.p0,
        grids_flat=grids_flat,
        grids_len=grids_len,
        parent=tree.parent,
        depth=tree.depth,
        mode=tree.mode,
        entry_sojourn=tree.entry_sojourn,
        entry_time=tree.entry_time,
        entry_grid_index=tree.entry_grid_index,
        paths=tree.paths,
    )


def load_tree(path, expected_model_hash: str | None = None) -> BranchTree:
    with np.load(path, allow_pickle=False) as d:
        header = d["header"]
        stored_hash = str(d["model_hash"])
        if expected_model_hash is not None and stored_hash != expected_model_hash:
            raise ValueError(
                f"tree file {path} was built for a different model "
                f"({stored_hash} != {expected_model_hash})"
            )
        lens = d["grids_len"]
        offs = np.concatenate([[0], np.cumsum(lens)])
        grids = [d["grids_flat"][offs[i] : offs[i + 1]] for i in range(len(lens))]
        tree = BranchTree(
            horizon=float(header[0]),
            dt=float(header[1]),
            ode_step=float(header[2]),
            max_depth=int(header[3]),
            p0=d["p0"],
            effective_grids=grids,
            parent=d["parent"],
            depth=d["depth"],
            mode=d["mode"],
            entry_sojourn=d["entry_sojourn"],
            entry_time=d["entry_time"],
            entry_grid_index=d["entry_grid_index"],
            paths=d["paths"],
            model_hash=stored_hash,
        )
    tree.rebuild_index()
    return tree
