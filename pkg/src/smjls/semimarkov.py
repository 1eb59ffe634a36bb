"""Semi-Markov mode trajectories: sampling and piecewise-constant lookup."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .model import SMJLSModel

__all__ = ["Trajectory", "derive_rng", "sample_trajectory", "mode_at", "trajectory_to_csv"]

# stream tags for the per-run RNG contract
STREAM_TRAJECTORY = 0
STREAM_NOISE = 1
STREAM_X0 = 2


def derive_rng(root_seed: int, stream: int, index: int = 0) -> np.random.Generator:
    """Deterministic per-(stream, index) generator from one root seed.

    Parallel workers can sample run `index` in any order and still produce
    identical results.
    """
    ss = np.random.SeedSequence(entropy=int(root_seed), spawn_key=(int(stream), int(index)))
    return np.random.default_rng(ss)


@dataclass(frozen=True)
class Trajectory:
    """Realized jump chain up to the horizon.

    z[k] is the mode entered at the k-th jump (z[0] is the initial mode),
    t_jump[k] the jump time (t_jump[0] = 0) and s[k] = t_jump[k] -
    t_jump[k-1] the sojourn that ended at it (s[0] = 0).  Generation stops at
    the first jump past the horizon, or after n_max jumps, in which case
    `censored` is set.
    """

    z: np.ndarray
    t_jump: np.ndarray
    s: np.ndarray
    horizon: float
    n_max: int
    censored: bool = False

    @property
    def n_jumps(self) -> int:
        return len(self.z) - 1

    def tilde_jump_ticks(self, dt: float, delay: float = 0.0) -> np.ndarray:
        """Tick indices at which each jump becomes effective on a dt grid.

        The k-th jump is accounted for at the first grid point strictly
        after it (plus an optional fixed observation delay), so a jump
        landing exactly on a tick maps to the next one.
        """
        out = np.empty(self.n_jumps, dtype=np.int64)
        for k, t in enumerate(self.t_jump[1:]):
            t = t + delay
            j = int(np.floor(t / dt))
            while j * dt <= t:
                j += 1
            out[k] = j
        return out


def sample_trajectory(
    model: SMJLSModel,
    horizon: float,
    n_max: int = 64,
    seed: int | np.random.Generator = 0,
) -> Trajectory:
    """Draw one mode trajectory: Z0 from the initial distribution, then
    alternately a sojourn from the current mode's law and a successor from
    the embedded chain."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    z = [int(rng.choice(model.n_modes, p=model.init_mode_dist))]
    t_jump = [0.0]
    s = [0.0]
    censored = False
    while True:
        row = model.embedded[z[-1]]
        if row.sum() <= 0:
            break  # no jump targets (single-mode chain)
        sk = float(model.sojourns[z[-1]].sample(rng))
        tk = t_jump[-1] + sk
        if tk > horizon:
            break
        if len(z) - 1 >= n_max:
            censored = True
            break
        z.append(int(rng.choice(model.n_modes, p=row)))
        t_jump.append(tk)
        s.append(sk)
    return Trajectory(
        z=np.array(z, dtype=np.int64),
        t_jump=np.array(t_jump, dtype=float),
        s=np.array(s, dtype=float),
        horizon=float(horizon),
        n_max=int(n_max),
        censored=censored,
    )


def mode_at(traj: Trajectory, t: float) -> int:
    """Mode occupied at time t; intervals are closed on the left, so at a
    jump time the new mode is already active."""
    if t < 0:
        raise ValueError(f"t={t} is negative")
    if traj.censored and t >= traj.t_jump[-1]:
        raise ValueError(
            f"t={t} is beyond the last generated jump of a censored trajectory"
        )
    if t > traj.horizon:
        raise ValueError(f"t={t} exceeds the horizon {traj.horizon}")
    k = int(np.searchsorted(traj.t_jump, t, side="right")) - 1
    return int(traj.z[k])


def modes_on_grid(traj: Trajectory, dt: float, n_ticks: int) -> np.ndarray:
    """Vector of mode_at(j*dt) for j = 0..n_ticks."""
    ticks = np.arange(n_ticks + 1) * dt
    idx = np.searchsorted(traj.t_jump, ticks, side="right") - 1
    return traj.z[idx]


def trajectory_to_csv(traj: Trajectory, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "Z_k", "T_k", "S_k"])
        for k in range(len(traj.z)):
            w.writerow([k, int(traj.z[k]), repr(float(traj.t_jump[k])),
                        repr(float(traj.s[k]))])
