"""Optimal L2 codebooks for sojourn times.

`clvq_train` runs competitive learning (winner-take-all stochastic gradient)
over a fixed sample budget, seeded by a k-means++ pass over the training
sample so that tail coverage does not depend on slow codeword transport.
`lloyd_refine` is a Monte Carlo Lloyd iteration kept deliberately separate:
it serves as an independent cross-check of the CLVQ fixed point.
"""

from __future__ import annotations

import bisect
import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .model import SojournDistribution

__all__ = [
    "QuantizationGrid",
    "clvq_train",
    "lloyd_refine",
    "project",
    "distortion_estimate",
    "rate_diagnostic",
    "save_grid",
    "load_grid",
    "GridFileError",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class QuantizationGrid:
    """Sorted codebook with cell weights and an L2 distortion estimate."""

    mode: int
    points: np.ndarray
    weights: np.ndarray
    distortion: float
    train_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "points", np.asarray(self.points, dtype=float))
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))

    @property
    def nu(self) -> int:
        return len(self.points)


def _cell_boundaries(points: np.ndarray) -> np.ndarray:
    b = np.empty(len(points) + 1)
    b[0] = 0.0
    b[-1] = np.inf
    b[1:-1] = 0.5 * (points[:-1] + points[1:])
    return b


def _cell_weights(points: np.ndarray, dist: SojournDistribution) -> np.ndarray:
    b = _cell_boundaries(points)
    cdf = dist.cdf(b[1:-1])
    w = np.empty(len(points))
    w[0] = cdf[0] if len(points) > 1 else 1.0
    if len(points) > 1:
        w[1:-1] = np.diff(cdf)
        w[-1] = 1.0 - cdf[-1]
    return w


def _dedupe(points: np.ndarray) -> np.ndarray:
    """Collapse coincident codewords (degenerate target law)."""
    uniq = np.unique(points)
    if len(uniq) < len(points):
        log.warning(
            "codebook collapsed: %d of %d codewords coincide, grid deduplicated",
            len(points) - len(uniq) + 1,
            len(points),
        )
    return uniq


def _kmeanspp_once(nu: int, pool: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = len(pool)
    g = np.empty(nu)
    g[0] = pool[rng.integers(n)]
    d2 = (pool - g[0]) ** 2
    for i in range(1, nu):
        c = np.cumsum(d2)
        total = c[-1]
        if total <= 0:
            # all remaining mass sits on already-chosen points
            g[i:] = g[i - 1]
            break
        g[i] = pool[int(np.searchsorted(c, rng.random() * total))]
        np.minimum(d2, (pool - g[i]) ** 2, out=d2)
    return np.sort(g)


def _sample_distortion_sq(points: np.ndarray, s: np.ndarray) -> float:
    n = len(points)
    idx = np.searchsorted(points, s)
    lo = np.clip(idx - 1, 0, n - 1)
    hi = np.clip(idx, 0, n - 1)
    return float(np.mean(np.minimum(np.abs(s - points[lo]), np.abs(s - points[hi])) ** 2))


def _kmeanspp(nu: int, pool: np.ndarray, rng: np.random.Generator,
              restarts: int = 3) -> np.ndarray:
    """k-means++ seeding over the training sample, best of a few restarts.

    A single seeding pass occasionally leaves the far tail uncovered, which
    the polishing phase cannot repair within its budget; scoring a handful
    of restarts on a slice of the sample removes those outliers.
    """
    score_slice = pool[: min(len(pool), 100_000)]
    best, best_score = None, np.inf
    for _ in range(max(1, restarts)):
        g = _kmeanspp_once(nu, pool, rng)
        score = _sample_distortion_sq(g, score_slice)
        if score < best_score:
            best, best_score = g, score
    return best


def _compander_init(dist: SojournDistribution, nu: int) -> np.ndarray | None:
    """Quantiles of the asymptotically optimal codeword density f^(1/3),
    in closed form where the law admits it.

    A sample-driven seeding cannot reach past the largest training sample,
    but the optimal codebook of an unbounded law extends far beyond it
    (squared-error weighting), so unbounded laws are seeded from the law
    itself; bounded laws do not need this.
    """
    u = (np.arange(nu) + 0.5) / nu
    if dist.kind == "exponential":
        # f^(1/3) is again exponential, with a third of the rate
        return -3.0 * np.log1p(-u) / dist.params["rate"]
    if dist.kind == "uniform":
        a, b = dist.params["a"], dist.params["b"]
        return a + u * (b - a)
    return None


def clvq_train(
    dist: SojournDistribution,
    nu: int,
    iters: int = 1_000_000,
    schedule: tuple[float, float] = (0.3, 0.5),
    seed: int = 0,
) -> QuantizationGrid:
    """Train a nu-point codebook with winner-take-all stochastic gradient.

    schedule = (gamma0, plateau_frac): the step stays at gamma0 for the
    first plateau_frac of the run, then anneals as gamma0 * t_c / t.  The
    plateau lets codewords migrate between regions of the support; the
    annealing phase settles them onto cell centroids.
    """
    if nu < 1:
        raise ValueError("nu must be >= 1")
    if iters < nu:
        raise ValueError("iters must be >= nu")
    gamma0, plateau_frac = schedule
    rng = np.random.default_rng(seed)
    samples = dist.sample(rng, size=iters)
    g = _compander_init(dist, nu)
    if g is None:
        g = _kmeanspp(nu, samples, rng)
    glist = list(g)
    n = nu
    tc = max(1, int(plateau_frac * iters))
    # constant step while codewords migrate, then exponential quench so the
    # final positions settle onto cell centroids instead of wobbling
    steps = np.full(iters, gamma0)
    if iters > tc:
        decay = np.log(1000.0) / (iters - tc)
        steps[tc:] = gamma0 * np.exp(-decay * np.arange(iters - tc))
    for t in range(iters):
        s = samples[t]
        j = bisect.bisect_left(glist, s)
        if j == 0:
            w = 0
        elif j >= n:
            w = n - 1
        else:
            w = j if (glist[j] - s) < (s - glist[j - 1]) else j - 1
        gam = steps[t]
        glist[w] += gam * (s - glist[w])
        while w > 0 and glist[w] < glist[w - 1]:
            glist[w], glist[w - 1] = glist[w - 1], glist[w]
            w -= 1
        while w < n - 1 and glist[w] > glist[w + 1]:
            glist[w], glist[w + 1] = glist[w + 1], glist[w]
            w += 1
    points = _dedupe(np.array(glist))
    dval, dse = distortion_estimate_points(points, dist, 10**5, seed + 1)
    meta = {
        "algorithm": "clvq",
        "iterations": iters,
        "seed": seed,
        "gamma0": gamma0,
        "plateau_frac": plateau_frac,
        "init": "compander" if _compander_init(dist, nu) is not None else "kmeans++",
        "distortion_se": dse,
    }
    return QuantizationGrid(
        mode=-1,
        points=points,
        weights=_cell_weights(points, dist),
        distortion=dval,
        train_meta=meta,
    )


def lloyd_refine(
    dist: SojournDistribution,
    grid: QuantizationGrid,
    iters: int = 50,
    samples_per_iter: int = 20_000,
    seed: int = 0,
) -> QuantizationGrid:
    """Monte Carlo Lloyd: alternately partition a fresh sample and move each
    codeword to its cell's sample mean.  Empty cells are re-seeded at a
    random sample and logged."""
    rng = np.random.default_rng(seed)
    points = np.array(grid.points, dtype=float)
    n = len(points)
    for _ in range(iters):
        s = np.sort(dist.sample(rng, size=samples_per_iter))
        bounds = _cell_boundaries(points)
        edges = np.searchsorted(s, bounds[1:-1])
        starts = np.concatenate(([0], edges))
        stops = np.concatenate((edges, [len(s)]))
        for i in range(n):
            if stops[i] > starts[i]:
                points[i] = s[starts[i]:stops[i]].mean()
            else:
                points[i] = s[rng.integers(len(s))]
                log.warning("empty cell %d re-seeded during Lloyd refinement", i)
        points.sort()
    points = _dedupe(points)
    dval, dse = distortion_estimate_points(points, dist, 10**5, seed + 1)
    meta = dict(grid.train_meta)
    meta.update({"refined": "lloyd", "lloyd_iters": iters,
                 "samples_per_iter": samples_per_iter, "lloyd_seed": seed,
                 "distortion_se": dse})
    return QuantizationGrid(
        mode=grid.mode,
        points=points,
        weights=_cell_weights(points, dist),
        distortion=dval,
        train_meta=meta,
    )


def project(grid: QuantizationGrid, s: float) -> tuple[int, float]:
    """Nearest codeword; ties break to the smaller index."""
    if s < 0:
        raise ValueError("sojourn times are nonnegative")
    return project_points(grid.points, s)


def project_points(points: np.ndarray, s: float) -> tuple[int, float]:
    n = len(points)
    j = int(np.searchsorted(points, s))
    if j == 0:
        return 0, float(points[0])
    if j >= n:
        return n - 1, float(points[n - 1])
    if (s - points[j - 1]) <= (points[j] - s):
        return j - 1, float(points[j - 1])
    return j, float(points[j])


def distortion_estimate_points(
    points: np.ndarray, dist: SojournDistribution, n_samples: int, seed: int
) -> tuple[float, float]:
    rng = np.random.default_rng(seed)
    s = dist.sample(rng, size=n_samples)
    n = len(points)
    idx = np.searchsorted(points, s)
    lo = np.clip(idx - 1, 0, n - 1)
    hi = np.clip(idx, 0, n - 1)
    e2 = np.minimum(np.abs(s - points[lo]), np.abs(s - points[hi])) ** 2
    m = float(np.mean(e2))
    se_m = float(np.std(e2) / np.sqrt(n_samples))
    d = float(np.sqrt(m))
    se_d = se_m / (2 * d) if d > 0 else se_m
    return d, se_d


def distortion_estimate(
    grid: QuantizationGrid, dist: SojournDistribution, n_samples: int = 10**5, seed: int = 0
) -> tuple[float, float]:
    """Monte Carlo root-mean-square projection error with standard error."""
    if n_samples < 10**3:
        raise ValueError("need at least 1e3 samples for a usable estimate")
    return distortion_estimate_points(grid.points, dist, n_samples, seed)


def rate_diagnostic(
    dist: SojournDistribution,
    nus: list[int],
    iters: int = 1_000_000,
    seed: int = 0,
    expected_slope: float = -1.0,
    tolerance: float = 0.2,
) -> dict:
    """Least-squares slope of log distortion against log grid size.

    Scalar laws should show slope close to -1; a flat slope flags a broken
    trainer.
    """
    if len(nus) < 3:
        raise ValueError("need at least 3 grid sizes to fit a rate")
    ds = []
    for i, nu in enumerate(sorted(nus)):
        g = clvq_train(dist, nu, iters=iters, seed=seed + 37 * i)
        ds.append(g.distortion)
    x = np.log(np.array(sorted(nus), dtype=float))
    y = np.log(np.array(ds))
    slope, intercept = np.polyfit(x, y, 1)
    return {
        "nus": sorted(nus),
        "distortions": ds,
        "slope": float(slope),
        "intercept": float(intercept),
        "consistent": bool(abs(slope - expected_slope) <= tolerance),
    }


# -- persistence -------------------------------------------------------------


class GridFileError(RuntimeError):
    pass


def _grid_payload(grid: QuantizationGrid) -> dict:
    return {
        "mode": grid.mode,
        "points": [repr(p) for p in grid.points.tolist()],
        "weights": [repr(w) for w in grid.weights.tolist()],
        "distortion": repr(grid.distortion),
        "train_meta": grid.train_meta,
    }


def save_grid(grid: QuantizationGrid, path, model_hash: str | None = None) -> None:
    """Write the grid as JSON; floats go through repr so doubles round-trip
    bit-exactly; a checksum binds the payload against tampering."""
    payload = _grid_payload(grid)
    if model_hash is not None:
        payload["model_hash"] = model_hash
    blob = json.dumps(payload, sort_keys=True)
    doc = {"payload": payload, "sha256": hashlib.sha256(blob.encode()).hexdigest()}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_grid(path, expected_model_hash: str | None = None) -> QuantizationGrid:
    with open(path) as fh:
        doc = json.load(fh)
    payload = doc.get("payload")
    blob = json.dumps(payload, sort_keys=True)
    if hashlib.sha256(blob.encode()).hexdigest() != doc.get("sha256"):
        raise GridFileError(f"checksum mismatch in grid file {path}")
    if expected_model_hash is not None and payload.get("model_hash") not in (
        None,
        expected_model_hash,
    ):
        raise GridFileError(
            f"grid file {path} was trained for a different model "
            f"({payload.get('model_hash')} != {expected_model_hash})"
        )
    return QuantizationGrid(
        mode=payload["mode"],
        points=np.array([float(p) for p in payload["points"]]),
        weights=np.array([float(w) for w in payload["weights"]]),
        distortion=float(payload["distortion"]),
        train_meta=payload["train_meta"],
    )
