"""Truth simulation and the three filters on a shared noise realization.

The exact Kalman-Bucy filter integrates its covariance along the realized
mode trajectory (restarting the flow at every jump, covariance continuous).
The quantized filter never integrates online: at each effective jump it
projects the rounded sojourn onto the current branch's codebook and follows
the pre-computed child path.  The Markovian LMMSE uses mode-indexed gains
that depend only on the law of the mode process, so they are pre-computed
too, but it is not conditionally optimal.

All runs are driven by Euler-Maruyama on the tick grid with the mode frozen
per tick; per-run covariance work is batched across runs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .model import Mode, SMJLSModel
from .quantizer import project_points
from .riccati import BranchTree, _mode_operators, _rk4_batch, _advance
from .semimarkov import (
    STREAM_NOISE,
    STREAM_TRAJECTORY,
    STREAM_X0,
    Trajectory,
    derive_rng,
    sample_trajectory,
)

__all__ = [
    "NoiseRealization",
    "FilterRun",
    "MarkovAux",
    "sample_noise",
    "simulate_truth",
    "kbf_gain",
    "run_kbf",
    "run_quantized",
    "run_lmmse",
    "markov_pi",
    "lmmse_offline",
    "BatchData",
    "sample_batch",
    "truth_paths",
    "kbf_cov_paths",
    "quantized_cov_paths",
    "estimate_paths",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseRealization:
    """Wiener increments on the tick grid, variance step * I per tick."""

    step: float
    dw: np.ndarray
    dv: np.ndarray
    seed: int | None = None


def sample_noise(model: SMJLSModel, n_ticks: int, step: float, rng) -> NoiseRealization:
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    sd = np.sqrt(step)
    return NoiseRealization(
        step=step,
        dw=rng.normal(0.0, sd, size=(n_ticks, model.n3)),
        dv=rng.normal(0.0, sd, size=(n_ticks, model.n4)),
    )


@dataclass
class FilterRun:
    kind: str
    times: np.ndarray
    x_true: np.ndarray
    x_hat: np.ndarray
    P_path: np.ndarray
    K_path: np.ndarray
    selection_log: list = field(default_factory=list)
    censored: bool = False


@dataclass(frozen=True)
class MarkovAux:
    Lambda: np.ndarray
    pi0: np.ndarray
    pi_path: np.ndarray


def markov_pi(Lambda: np.ndarray, pi0: np.ndarray, dt: float, T: float) -> MarkovAux:
    """Mode occupation probabilities pi(t) = pi(0) exp(t Lambda) on the grid."""
    Lambda = np.asarray(Lambda, dtype=float)
    pi0 = np.asarray(pi0, dtype=float)
    if not np.allclose(Lambda.sum(axis=1), 0.0, atol=1e-10):
        raise ValueError("rate matrix rows must sum to 0")
    n_ticks = int(round(T / dt))
    step = expm(dt * Lambda)
    path = np.empty((n_ticks + 1, len(pi0)))
    path[0] = pi0
    for j in range(n_ticks):
        path[j + 1] = path[j] @ step
    return MarkovAux(Lambda=Lambda, pi0=pi0, pi_path=path)


def kbf_gain(P: np.ndarray, mode: Mode) -> np.ndarray:
    """K = P C'(DD')^{-1}."""
    return np.asarray(P, dtype=float) @ mode.C.T @ mode.ddt_inv


# -- batched machinery --------------------------------------------------------


@dataclass
class BatchData:
    """Per-run inputs shared by every filter (common random numbers)."""

    model: SMJLSModel
    dt: float
    horizon: float
    trajs: list[Trajectory]
    mode_grid: np.ndarray  # (N, n_ticks+1) mode at each tick start
    x0: np.ndarray  # (N, n1)
    dw: np.ndarray  # (N, n_ticks, n3)
    dv: np.ndarray  # (N, n_ticks, n4)

    @property
    def n_runs(self) -> int:
        return len(self.trajs)

    @property
    def n_ticks(self) -> int:
        return self.mode_grid.shape[1] - 1


def _cov_sqrt(M: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(np.asarray(M, dtype=float))
    return (V * np.sqrt(np.maximum(w, 0.0))) @ V.T


def sample_batch(
    model: SMJLSModel,
    horizon: float,
    dt: float,
    n_runs: int,
    root_seed: int,
    start_index: int = 0,
    n_max: int = 256,
) -> BatchData:
    """Draw trajectories, initial states and noise for runs
    [start_index, start_index + n_runs); every run's streams depend only on
    (root_seed, run index), so chunking does not change results."""
    n_ticks = int(round(horizon / dt))
    if abs(n_ticks * dt - horizon) > 1e-12:
        raise ValueError("dt must divide the horizon")
    trajs = []
    mode_grid = np.empty((n_runs, n_ticks + 1), dtype=np.int8)
    x0 = np.empty((n_runs, model.n1))
    dw = np.empty((n_runs, n_ticks, model.n3))
    dv = np.empty((n_runs, n_ticks, model.n4))
    sqrt_cov = _cov_sqrt(model.x0_cov)
    ticks = np.arange(n_ticks + 1) * dt
    for r in range(n_runs):
        run = start_index + r
        traj = sample_trajectory(
            model, horizon, n_max=n_max, seed=derive_rng(root_seed, STREAM_TRAJECTORY, run)
        )
        trajs.append(traj)
        idx = np.searchsorted(traj.t_jump, ticks, side="right") - 1
        mode_grid[r] = traj.z[idx]
        noise_rng = derive_rng(root_seed, STREAM_NOISE, run)
        sd = np.sqrt(dt)
        dw[r] = noise_rng.normal(0.0, sd, size=(n_ticks, model.n3))
        dv[r] = noise_rng.normal(0.0, sd, size=(n_ticks, model.n4))
        x0_rng = derive_rng(root_seed, STREAM_X0, run)
        x0[r] = model.x0_mean + sqrt_cov @ x0_rng.normal(size=model.n1)
    return BatchData(
        model=model,
        dt=dt,
        horizon=horizon,
        trajs=trajs,
        mode_grid=mode_grid,
        x0=x0,
        dw=dw,
        dv=dv,
    )


def truth_paths(batch: BatchData) -> tuple[np.ndarray, np.ndarray]:
    """Euler-Maruyama state paths and observation increments, mode frozen per
    tick; returns (x (N, nt+1, n1), dy (N, nt, n2))."""
    model, dt = batch.model, batch.dt
    N, nt = batch.n_runs, batch.n_ticks
    A = np.stack([m.A for m in model.modes])
    E = np.stack([m.E for m in model.modes])
    C = np.stack([m.C for m in model.modes])
    D = np.stack([m.D for m in model.modes])
    x = np.empty((N, nt + 1, model.n1))
    dy = np.empty((N, nt, model.n2))
    x[:, 0] = batch.x0
    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(nt):
            m = batch.mode_grid[:, j]
            xj = x[:, j]
            drift = np.einsum("nij,nj->ni", A[m], xj)
            x[:, j + 1] = xj + dt * drift + np.einsum("nij,nj->ni", E[m], batch.dw[:, j])
            dy[:, j] = dt * np.einsum("nij,nj->ni", C[m], xj) + np.einsum(
                "nij,nj->ni", D[m], batch.dv[:, j]
            )
    if not np.all(np.isfinite(x)):
        bad = np.where(~np.isfinite(x.reshape(N, -1)).all(axis=1))[0]
        first_bad_tick = int(
            np.argmax(~np.isfinite(x[bad[0]]).all(axis=1))
        )
        raise FloatingPointError(
            f"state path diverged (run {bad[0]}, t={first_bad_tick * dt:.6g})"
        )
    return x, dy


def kbf_cov_paths(batch: BatchData, ode_step: float | None = None) -> np.ndarray:
    """Exact-filter covariance along each realized trajectory.

    The flow restarts at every jump with a continuous value: ticks that
    contain a jump are integrated in two (or more) exact segments.
    """
    model, dt = batch.model, batch.dt
    N, nt = batch.n_runs, batch.n_ticks
    if ode_step is None:
        ode_step = dt / 10.0
    sub = int(round(dt / ode_step))
    if abs(sub * ode_step - dt) > 1e-15:
        raise ValueError("ode_step must divide dt")
    A, EE, CtWC = _mode_operators(model.modes)
    P = np.repeat(model.x0_cov[None], N, axis=0)
    out = np.empty((N, nt + 1, model.n1, model.n1))
    out[:, 0] = P

    # runs and ticks with interior jumps need exact split integration
    jump_in_tick: dict[tuple[int, int], list[int]] = {}
    for r, traj in enumerate(batch.trajs):
        for k, t in enumerate(traj.t_jump[1:], start=1):
            j = int(np.floor(t / dt + 1e-12))
            if j < nt and abs(t - j * dt) > 1e-15:
                jump_in_tick.setdefault((r, j), []).append(k)

    plain_cache: dict[int, np.ndarray] = {}
    for j in range(nt):
        m = batch.mode_grid[:, j]
        split_rows = [r for r in range(N) if (r, j) in jump_in_tick]
        if split_rows:
            plain = np.setdiff1d(np.arange(N), np.array(split_rows, dtype=int))
        else:
            plain = np.arange(N)
        if len(plain):
            out[plain, j + 1] = _rk4_batch(
                out[plain, j], A[m[plain]], EE[m[plain]], CtWC[m[plain]],
                ode_step, sub, t0=j * dt,
            )
        for r in split_rows:
            traj = batch.trajs[r]
            cur_t = j * dt
            cur_m = int(m[r])
            Pr = out[r, j][None]
            for k in jump_in_tick[(r, j)]:
                tk = traj.t_jump[k]
                Pr = _advance(
                    Pr, A[cur_m : cur_m + 1], EE[cur_m : cur_m + 1],
                    CtWC[cur_m : cur_m + 1], tk - cur_t, ode_step, t0=cur_t,
                )
                cur_t = tk
                cur_m = int(traj.z[k])
            Pr = _advance(
                Pr, A[cur_m : cur_m + 1], EE[cur_m : cur_m + 1],
                CtWC[cur_m : cur_m + 1], (j + 1) * dt - cur_t, ode_step, t0=cur_t,
            )
            out[r, j + 1] = Pr[0]
    del plain_cache
    return out


def quantized_cov_paths(
    tree: BranchTree,
    batch: BatchData,
    obs_delay: float = 0.0,
    project_exact: bool = False,
) -> tuple[np.ndarray, list[list], np.ndarray]:
    """Covariance read from stored branches only.

    At each effective jump the rounded sojourn is projected onto the current
    branch's codebook (horizon point included) and the filter descends to
    the stored child.  A missing child falls back to the nearest usable
    codeword; if none exists the current branch is held.  Runs whose jump
    count exceeds the tree depth are flagged censored.

    obs_delay models non-instantaneous mode observation: jumps are rounded
    up only after the delay.  project_exact projects the exact sojourn
    instead of the rounded one (the switching times stay rounded).

    Returns (P paths (N, nt+1, n1, n1), selection logs, censored flags).
    """
    if abs(tree.dt - batch.dt) > 1e-15 or abs(tree.horizon - batch.horizon) > 1e-12:
        raise ValueError("tree was built for a different grid or horizon")
    N, nt = batch.n_runs, batch.n_ticks
    n1 = batch.model.n1
    out = np.empty((N, nt + 1, n1, n1))
    logs: list[list] = []
    censored = np.zeros(N, dtype=bool)
    for r, traj in enumerate(batch.trajs):
        node = tree.roots[int(traj.z[0])]
        seg_nodes = [node]
        seg_starts = [0]
        rows = []
        prev_tick = 0
        ticks = traj.tilde_jump_ticks(batch.dt, delay=obs_delay)
        for k, jk in enumerate(ticks, start=1):
            if jk > nt:
                break  # jump only observable past the horizon
            s_tilde = (int(jk) - prev_tick) * batch.dt
            s_used = float(traj.s[k]) if project_exact else s_tilde
            mode_i = int(tree.mode[node])
            z_new = int(traj.z[k])
            eff = tree.effective_grids[mode_i]
            gi, s_hat = project_points(eff, s_used)
            child = tree.child(node, gi, z_new)
            if child is None:
                if tree.depth[node] >= tree.max_depth:
                    censored[r] = True
                usable = [
                    (abs(float(eff[g]) - s_used), g)
                    for g in range(len(eff))
                    if tree.child(node, g, z_new) is not None
                ]
                if usable:
                    _, g2 = min(usable)
                    child = tree.child(node, g2, z_new)
                    s_hat = float(eff[g2])
                    log.warning(
                        "run %d jump %d: codeword %.6g unusable, using %.6g",
                        r, k, float(eff[gi]), s_hat,
                    )
                else:
                    rows.append((k, traj.t_jump[k], jk * batch.dt, s_tilde, np.nan, node))
                    prev_tick = int(jk)
                    continue
            node = child
            seg_nodes.append(node)
            seg_starts.append(int(jk))
            rows.append((k, traj.t_jump[k], jk * batch.dt, s_tilde, s_hat, node))
            prev_tick = int(jk)
        seg_starts.append(nt + 1)
        for i, nd in enumerate(seg_nodes):
            a, b = seg_starts[i], min(seg_starts[i + 1], nt + 1)
            if a <= nt:
                out[r, a:b] = tree.paths[nd, : b - a]
        logs.append(rows)
        if traj.n_jumps > tree.max_depth:
            censored[r] = True
    return out, logs, censored


def estimate_paths(
    batch: BatchData, dy: np.ndarray, gains: np.ndarray
) -> np.ndarray:
    """Shared estimate recursion: dxhat = A xhat dt + K (dy - C xhat dt).

    gains has shape (N, nt(+1), n1, n2); entry j is used on tick j.
    Non-finite values propagate (they are flagged by the caller).
    """
    model, dt = batch.model, batch.dt
    N, nt = batch.n_runs, batch.n_ticks
    A = np.stack([m.A for m in model.modes])
    C = np.stack([m.C for m in model.modes])
    xh = np.empty((N, nt + 1, model.n1))
    xh[:, 0] = model.x0_mean
    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(nt):
            m = batch.mode_grid[:, j]
            xj = xh[:, j]
            innov = dy[:, j] - dt * np.einsum("nij,nj->ni", C[m], xj)
            xh[:, j + 1] = (
                xj
                + dt * np.einsum("nij,nj->ni", A[m], xj)
                + np.einsum("nij,nj->ni", gains[:, j], innov)
            )
    return xh


def gains_from_cov(batch: BatchData, P: np.ndarray) -> np.ndarray:
    """Per-tick K = P C'(DD')^{-1} with the mode observed at the tick."""
    model = batch.model
    CtW = np.stack([m.C.T @ m.ddt_inv for m in model.modes])  # (modes, n1, n2)
    N, ntp1 = P.shape[0], P.shape[1]
    K = np.empty((N, ntp1, model.n1, model.n2))
    for j in range(ntp1):
        m = batch.mode_grid[:, j]
        K[:, j] = P[:, j] @ CtW[m]
    return K


# -- LMMSE off-line stage ------------------------------------------------------


def lmmse_offline(
    model: SMJLSModel,
    dt: float,
    T: float,
    ode_step: float | None = None,
    pi_floor: float = 1e-12,
) -> tuple[np.ndarray, np.ndarray, MarkovAux, int]:
    """Coupled per-mode covariance equations and gains on the tick grid.

    Depends only on the law of the mode process, hence fully pre-computable.
    Returns (gains (nt+1, modes, n1, n2), P_fc (nt+1, modes, n1, n1), aux,
    finite_ticks); if the equations blow up, gains are NaN from the first
    bad tick onward and finite_ticks marks it.
    """
    if not model.is_markov():
        raise ValueError("the Markovian estimator requires exponential sojourn laws")
    if ode_step is None:
        ode_step = dt / 10.0
    sub = int(round(dt / ode_step))
    if abs(sub * ode_step - dt) > 1e-15:
        raise ValueError("ode_step must divide dt")
    nt = int(round(T / dt))
    Lam = model.generator()
    nm, n1 = model.n_modes, model.n1
    fine = expm(ode_step * Lam)
    pis = np.empty((nt * sub + 1, nm))
    pis[0] = model.init_mode_dist
    for k in range(nt * sub):
        pis[k + 1] = pis[k] @ fine
    if np.any(pis < pi_floor):
        t_bad = float(np.argmax(np.any(pis < pi_floor, axis=1)) * ode_step)
        raise RuntimeError(
            f"mode probability fell below {pi_floor:g} at t={t_bad:.6g}; "
            "the Markovian gain is undefined there"
        )
    A = np.stack([m.A for m in model.modes])
    EE = np.stack([m.E @ m.E.T for m in model.modes])
    CtWC = np.stack([m.C.T @ m.ddt_inv @ m.C for m in model.modes])
    CtW = np.stack([m.C.T @ m.ddt_inv for m in model.modes])

    def rhs(P, pi):
        ap = A @ P
        coupling = np.einsum("ji,jkl->ikl", Lam, P)
        return ap + ap.transpose(0, 2, 1) + coupling + EE * pi[:, None, None] \
            - P @ CtWC @ P / pi[:, None, None]

    P = model.x0_cov[None] * model.init_mode_dist[:, None, None]
    gains = np.full((nt + 1, nm, n1, model.n2), np.nan)
    P_fc = np.full((nt + 1, nm, n1, n1), np.nan)
    P_fc[0] = P
    gains[0] = P @ CtW / pis[0][:, None, None]
    finite_ticks = nt + 1
    h = ode_step
    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(nt):
            for s in range(sub):
                k = j * sub + s
                pa, pb = pis[k], pis[k + 1]
                pm = 0.5 * (pa + pb)
                k1 = rhs(P, pa)
                k2 = rhs(P + 0.5 * h * k1, pm)
                k3 = rhs(P + 0.5 * h * k2, pm)
                k4 = rhs(P + h * k3, pb)
                P = P + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
                P = 0.5 * (P + P.transpose(0, 2, 1))
            if not np.all(np.isfinite(P)):
                finite_ticks = j + 1
                log.warning(
                    "coupled covariance equations non-finite at t=%.6g; "
                    "gains are NaN from there on", (j + 1) * dt,
                )
                break
            P_fc[j + 1] = P
            gains[j + 1] = P @ CtW / pis[(j + 1) * sub][:, None, None]
    aux = markov_pi(Lam, model.init_mode_dist, dt, T)
    return gains, P_fc, aux, finite_ticks


# -- single-run operations (batch of one) --------------------------------------


def _single_batch(model, traj: Trajectory, noise: NoiseRealization, dt, x0) -> BatchData:
    n_ticks = noise.dw.shape[0]
    ticks = np.arange(n_ticks + 1) * dt
    idx = np.searchsorted(traj.t_jump, ticks, side="right") - 1
    if x0 is None:
        rng = np.random.default_rng(noise.seed)
        x0 = model.x0_mean + _cov_sqrt(model.x0_cov) @ rng.normal(size=model.n1)
    return BatchData(
        model=model,
        dt=dt,
        horizon=n_ticks * dt,
        trajs=[traj],
        mode_grid=traj.z[idx][None, :].astype(np.int8),
        x0=np.asarray(x0, dtype=float)[None, :],
        dw=noise.dw[None],
        dv=noise.dv[None],
    )


def simulate_truth(
    model: SMJLSModel,
    traj: Trajectory,
    noise: NoiseRealization,
    dt: float,
    x0: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """One Euler-Maruyama truth path and its observation increments."""
    if abs(noise.step - dt) > 1e-15:
        raise ValueError("noise was sampled for a different step")
    batch = _single_batch(model, traj, noise, dt, x0)
    x, dy = truth_paths(batch)
    return x[0], dy[0]


def run_kbf(
    model: SMJLSModel,
    traj: Trajectory,
    noise: NoiseRealization,
    dt: float,
    ode_step: float | None = None,
    x0: np.ndarray | None = None,
) -> FilterRun:
    """Reference optimal filter driven by the realized mode trajectory."""
    batch = _single_batch(model, traj, noise, dt, x0)
    x, dy = truth_paths(batch)
    P = kbf_cov_paths(batch, ode_step=ode_step)
    K = gains_from_cov(batch, P)
    xh = estimate_paths(batch, dy, K)
    nt = batch.n_ticks
    return FilterRun(
        kind="KBF",
        times=np.arange(nt + 1) * dt,
        x_true=x[0],
        x_hat=xh[0],
        P_path=P[0],
        K_path=K[0],
        censored=False,
    )


def run_quantized(
    model: SMJLSModel,
    tree: BranchTree,
    traj: Trajectory,
    noise: NoiseRealization,
    dt: float,
    x0: np.ndarray | None = None,
) -> FilterRun:
    """Approximate filter reading covariances from the stored branch tree."""
    batch = _single_batch(model, traj, noise, dt, x0)
    x, dy = truth_paths(batch)
    P, logs, censored = quantized_cov_paths(tree, batch)
    K = gains_from_cov(batch, P)
    xh = estimate_paths(batch, dy, K)
    nt = batch.n_ticks
    return FilterRun(
        kind="Quantized",
        times=np.arange(nt + 1) * dt,
        x_true=x[0],
        x_hat=xh[0],
        P_path=P[0],
        K_path=K[0],
        selection_log=logs[0],
        censored=bool(censored[0]),
    )


def run_lmmse(
    model: SMJLSModel,
    traj: Trajectory,
    noise: NoiseRealization,
    dt: float,
    ode_step: float | None = None,
    x0: np.ndarray | None = None,
    aux: tuple | None = None,
) -> FilterRun:
    """Markovian linear minimum mean squares estimator with pre-computed
    mode-indexed gains; requires a true Markov chain."""
    batch = _single_batch(model, traj, noise, dt, x0)
    x, dy = truth_paths(batch)
    if aux is None:
        aux = lmmse_offline(model, dt, batch.horizon, ode_step=ode_step)
    gains_tab, P_fc, _, _ = aux
    nt = batch.n_ticks
    K = np.empty((1, nt + 1, model.n1, model.n2))
    for j in range(nt + 1):
        K[0, j] = gains_tab[j, batch.mode_grid[0, j]]
    xh = estimate_paths(batch, dy, K)
    return FilterRun(
        kind="LMMSE",
        times=np.arange(nt + 1) * dt,
        x_true=x[0],
        x_hat=xh[0],
        P_path=P_fc,
        K_path=K[0],
        censored=False,
    )
