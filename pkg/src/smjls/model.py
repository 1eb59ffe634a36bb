"""System models: per-mode matrices, sojourn laws and the maglev preset.

A semi-Markov jump linear system is described by one `Mode` per discrete
regime (drift, observation and noise matrices), an embedded jump chain
(stochastic matrix with zero diagonal), one sojourn-time distribution per
mode and a Gaussian initial law for the continuous state.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Mode",
    "SojournDistribution",
    "SMJLSModel",
    "ValidationReport",
    "validate",
    "from_rate_matrix",
    "maglev_preset",
    "model_to_dict",
    "model_from_dict",
    "model_hash",
]


@dataclass(frozen=True)
class Mode:
    """Matrices of one regime: dx = A x dt + E dw, dy = C x dt + D dv."""

    index: int
    A: np.ndarray
    C: np.ndarray
    D: np.ndarray
    E: np.ndarray

    def __post_init__(self):
        for name in ("A", "C", "D", "E"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))

    @property
    def ddt(self) -> np.ndarray:
        return self.D @ self.D.T

    @property
    def ddt_inv(self) -> np.ndarray:
        return np.linalg.inv(self.ddt)


class SojournDistribution:
    """Holding-time law of one mode.

    Supported kinds: exponential(rate), weibull(shape, scale), uniform(a, b)
    and empirical(samples).  `lipschitz` is the Lipschitz constant of the
    CDF; it is derived in closed form where possible and must be supplied by
    the caller for empirical laws (a step CDF has no finite constant, the
    value is an assumption about the underlying law, not an estimate).
    """

    def __init__(self, kind: str, lipschitz: float | None = None, **params):
        self.kind = kind
        self.params = params
        if kind == "exponential":
            rate = float(params["rate"])
            if rate <= 0:
                raise ValueError("exponential rate must be positive")
            derived = rate
        elif kind == "uniform":
            a, b = float(params["a"]), float(params["b"])
            if not 0 <= a < b:
                raise ValueError("uniform requires 0 <= a < b")
            derived = 1.0 / (b - a)
        elif kind == "weibull":
            shape, scale = float(params["shape"]), float(params["scale"])
            if shape <= 0 or scale <= 0:
                raise ValueError("weibull shape and scale must be positive")
            derived = self._weibull_pdf_max(shape, scale)
        elif kind == "empirical":
            samples = np.sort(np.asarray(params["samples"], dtype=float))
            if samples.ndim != 1 or samples.size == 0:
                raise ValueError("empirical requires a non-empty 1-d sample array")
            if np.any(samples < 0):
                raise ValueError("sojourn samples must be nonnegative")
            self.params = {"samples": samples}
            derived = None
            if lipschitz is None:
                raise ValueError("empirical sojourn law requires an explicit lipschitz")
        else:
            raise ValueError(f"unknown sojourn kind {kind!r}")
        self.lipschitz = float(lipschitz) if lipschitz is not None else float(derived)
        if self.lipschitz < 0:
            raise ValueError("lipschitz must be nonnegative")

    @staticmethod
    def _weibull_pdf_max(shape: float, scale: float) -> float:
        if shape < 1:
            # density blows up at 0, the CDF is not Lipschitz
            return math.inf
        if shape == 1:
            return 1.0 / scale
        x = scale * ((shape - 1) / shape) ** (1 / shape)
        u = x / scale
        return (shape / scale) * u ** (shape - 1) * math.exp(-(u**shape))

    # -- law ---------------------------------------------------------------
    def sample(self, rng: np.random.Generator, size=None) -> np.ndarray:
        if self.kind == "exponential":
            return rng.exponential(1.0 / self.params["rate"], size=size)
        if self.kind == "uniform":
            return rng.uniform(self.params["a"], self.params["b"], size=size)
        if self.kind == "weibull":
            return self.params["scale"] * rng.weibull(self.params["shape"], size=size)
        return rng.choice(self.params["samples"], size=size)

    def cdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "exponential":
            return np.where(x < 0, 0.0, 1.0 - np.exp(-self.params["rate"] * x))
        if self.kind == "uniform":
            a, b = self.params["a"], self.params["b"]
            return np.clip((x - a) / (b - a), 0.0, 1.0)
        if self.kind == "weibull":
            k, lam = self.params["shape"], self.params["scale"]
            return np.where(x < 0, 0.0, 1.0 - np.exp(-((np.maximum(x, 0) / lam) ** k)))
        samples = self.params["samples"]
        return np.searchsorted(samples, x, side="right") / samples.size

    def ppf(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        if self.kind == "exponential":
            return -np.log1p(-q) / self.params["rate"]
        if self.kind == "uniform":
            a, b = self.params["a"], self.params["b"]
            return a + q * (b - a)
        if self.kind == "weibull":
            k, lam = self.params["shape"], self.params["scale"]
            return lam * (-np.log1p(-q)) ** (1.0 / k)
        samples = self.params["samples"]
        idx = np.clip((q * samples.size).astype(int), 0, samples.size - 1)
        return samples[idx]

    def mean(self) -> float:
        if self.kind == "exponential":
            return 1.0 / self.params["rate"]
        if self.kind == "uniform":
            return 0.5 * (self.params["a"] + self.params["b"])
        if self.kind == "weibull":
            k, lam = self.params["shape"], self.params["scale"]
            return lam * math.gamma(1 + 1 / k)
        return float(np.mean(self.params["samples"]))

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "lipschitz": self.lipschitz}
        for k, v in self.params.items():
            d[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SojournDistribution":
        d = dict(d)
        kind = d.pop("kind")
        lipschitz = d.pop("lipschitz", None)
        return cls(kind, lipschitz=lipschitz, **d)

    def __repr__(self):
        ps = ", ".join(f"{k}={v}" for k, v in self.params.items() if k != "samples")
        return f"SojournDistribution({self.kind}, {ps}, lipschitz={self.lipschitz})"


def _floor_psd(M: np.ndarray) -> np.ndarray:
    """Symmetrize and clip negative eigenvalues at zero."""
    M = 0.5 * (M + M.T)
    w, V = np.linalg.eigh(M)
    if w.min() >= 0:
        return M
    w = np.maximum(w, 0.0)
    return (V * w) @ V.T


@dataclass(frozen=True)
class SMJLSModel:
    """Immutable system description; safe to share across workers."""

    modes: tuple[Mode, ...]
    embedded: np.ndarray
    sojourns: tuple[SojournDistribution, ...]
    init_mode_dist: np.ndarray
    x0_mean: np.ndarray
    x0_cov: np.ndarray
    rate_matrix: np.ndarray | None = None
    lambda_bar: float = field(init=False, default=0.0)

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(self.modes))
        object.__setattr__(self, "sojourns", tuple(self.sojourns))
        object.__setattr__(self, "embedded", np.asarray(self.embedded, dtype=float))
        object.__setattr__(self, "init_mode_dist", np.asarray(self.init_mode_dist, dtype=float))
        object.__setattr__(self, "x0_mean", np.asarray(self.x0_mean, dtype=float))
        object.__setattr__(self, "x0_cov", _floor_psd(np.asarray(self.x0_cov, dtype=float)))
        if self.rate_matrix is not None:
            object.__setattr__(self, "rate_matrix", np.asarray(self.rate_matrix, dtype=float))
        object.__setattr__(self, "lambda_bar", max(s.lipschitz for s in self.sojourns))

    @property
    def n_modes(self) -> int:
        return len(self.modes)

    @property
    def n1(self) -> int:
        return self.modes[0].A.shape[0]

    @property
    def n2(self) -> int:
        return self.modes[0].C.shape[0]

    @property
    def n3(self) -> int:
        return self.modes[0].E.shape[1]

    @property
    def n4(self) -> int:
        return self.modes[0].D.shape[1]

    def is_markov(self) -> bool:
        return all(s.kind == "exponential" for s in self.sojourns)

    def generator(self) -> np.ndarray:
        """Generator matrix; exact for exponential sojourns."""
        if self.rate_matrix is not None:
            return self.rate_matrix
        if not self.is_markov():
            raise ValueError("generator only defined for exponential sojourn laws")
        rates = np.array([s.params["rate"] for s in self.sojourns])
        lam = self.embedded * rates[:, None]
        np.fill_diagonal(lam, -rates)
        return lam


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    def add(self, msg: str):
        self.violations.append(msg)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok

    def __str__(self):
        if self.ok:
            return "model valid"
        return "\n".join(self.violations)


def validate(model: SMJLSModel) -> ValidationReport:
    """Check every structural invariant; returns a report, never raises."""
    rep = ValidationReport()
    n = model.n_modes
    if n == 0:
        rep.add("model has no modes")
        return rep
    n1, n2, n3, n4 = model.n1, model.n2, model.n3, model.n4
    for m in model.modes:
        if m.A.shape != (n1, n1):
            rep.add(f"A shape {m.A.shape} != ({n1},{n1}), mode {m.index}")
        if m.C.shape != (n2, n1):
            rep.add(f"C shape {m.C.shape} != ({n2},{n1}), mode {m.index}")
        if m.D.shape != (n2, n4):
            rep.add(f"D shape {m.D.shape} != ({n2},{n4}), mode {m.index}")
        if m.E.shape != (n1, n3):
            rep.add(f"E shape {m.E.shape} != ({n1},{n3}), mode {m.index}")
        ddt = m.ddt
        if not np.allclose(ddt, ddt.T, atol=1e-12):
            rep.add(f"DD' not symmetric, mode {m.index}")
        else:
            w = np.linalg.eigvalsh(ddt)
            if w.min() <= 0:
                rep.add(f"DD' singular, mode {m.index} (min eig {w.min():.3e})")
    if model.embedded.shape != (n, n):
        rep.add(f"embedded chain shape {model.embedded.shape} != ({n},{n})")
    elif n == 1:
        # a single-mode chain has no jump targets; the only valid kernel is 0
        if model.embedded[0, 0] != 0.0:
            rep.add("single-mode embedded kernel must be exactly 0")
    else:
        rows = model.embedded.sum(axis=1)
        for i, r in enumerate(rows):
            if abs(r - 1.0) > 1e-12:
                rep.add(f"embedded row {i} sum {float(r)!r} != 1")
        diag = np.diag(model.embedded)
        for i, d in enumerate(diag):
            if d != 0.0:
                rep.add(f"embedded diagonal {i} is {float(d)!r}, must be exactly 0")
        if np.any(model.embedded < 0):
            rep.add("embedded chain has negative entries")
    if len(model.sojourns) != n:
        rep.add(f"{len(model.sojourns)} sojourn laws for {n} modes")
    for i, s in enumerate(model.sojourns):
        if not math.isfinite(s.lipschitz):
            rep.add(f"sojourn CDF not Lipschitz, mode {i}")
    if model.init_mode_dist.shape != (n,):
        rep.add(f"init mode distribution shape {model.init_mode_dist.shape} != ({n},)")
    else:
        if abs(model.init_mode_dist.sum() - 1.0) > 1e-12 or np.any(model.init_mode_dist < 0):
            rep.add(f"init mode distribution not a probability vector: {model.init_mode_dist}")
    if model.x0_mean.shape != (n1,):
        rep.add(f"x0_mean shape {model.x0_mean.shape} != ({n1},)")
    if model.x0_cov.shape != (n1, n1):
        rep.add(f"x0_cov shape {model.x0_cov.shape} != ({n1},{n1})")
    else:
        w = np.linalg.eigvalsh(model.x0_cov)
        if w.min() < -1e-12:
            rep.add(f"x0_cov not PSD (min eig {w.min():.3e})")
    expected = max(s.lipschitz for s in model.sojourns)
    if model.lambda_bar != expected:
        rep.add(f"lambda_bar {model.lambda_bar} != max lipschitz {expected}")
    return rep


def from_rate_matrix(modes, rate_matrix, init_mode_dist, x0_mean, x0_cov) -> SMJLSModel:
    """Markov special case: exponential sojourns from a generator matrix."""
    lam = np.asarray(rate_matrix, dtype=float)
    n = lam.shape[0]
    if lam.shape != (n, n):
        raise ValueError("rate matrix must be square")
    if not np.allclose(lam.sum(axis=1), 0.0, atol=1e-10):
        raise ValueError("rate matrix rows must sum to 0")
    off = lam - np.diag(np.diag(lam))
    if np.any(off < 0):
        raise ValueError("rate matrix off-diagonal entries must be nonnegative")
    if np.any(np.diag(lam) >= 0):
        raise ValueError(
            "rate matrix diagonal must be strictly negative (absorbing states "
            "have no jump activity)"
        )
    rates = -np.diag(lam)
    embedded = off / rates[:, None]
    np.fill_diagonal(embedded, 0.0)
    sojourns = tuple(SojournDistribution("exponential", rate=r) for r in rates)
    return SMJLSModel(
        modes=tuple(modes),
        embedded=embedded,
        sojourns=sojourns,
        init_mode_dist=init_mode_dist,
        x0_mean=x0_mean,
        x0_cov=x0_cov,
        rate_matrix=lam,
    )


def maglev_preset() -> SMJLSModel:
    """Magnetic levitation benchmark: normal mode with stabilizing feedback,
    failure mode with the actuator disconnected, Markov failures/repairs."""
    a_open = np.array(
        [
            [0.0, 1.0, 0.0],
            [1750.0, 0.0, -34.1],
            [0.0, 0.0, -0.0383],
        ]
    )
    a_closed = np.array(
        [
            [0.0, 1.0, 0.0],
            [1750.0, 0.0, -34.1],
            [4360.2, 104.2, -84.3],
        ]
    )
    c = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    d = np.eye(2)
    e = np.array(
        [
            [1.0, 0.2, -1.9],
            [-0.1, 1.4, -0.3],
            [0.1, 0.5, 1.0],
        ]
    )
    modes = (
        Mode(0, A=a_closed, C=c, D=d, E=e),
        Mode(1, A=a_open, C=c, D=d, E=e),
    )
    rate_matrix = np.array([[-20.0, 20.0], [0.1, -0.1]])
    return from_rate_matrix(
        modes,
        rate_matrix,
        init_mode_dist=np.array([0.999, 0.001]),
        x0_mean=np.array([0.001, 0.0, 0.0]),
        x0_cov=np.eye(3),
    )


# -- JSON-compatible schema -------------------------------------------------

def model_to_dict(model: SMJLSModel) -> dict:
    d = {
        "modes": [
            {
                "A": m.A.tolist(),
                "C": m.C.tolist(),
                "D": m.D.tolist(),
                "E": m.E.tolist(),
            }
            for m in model.modes
        ],
        "embedded": model.embedded.tolist(),
        "sojourns": [s.to_dict() for s in model.sojourns],
        "init_mode_dist": model.init_mode_dist.tolist(),
        "x0_mean": model.x0_mean.tolist(),
        "x0_cov": model.x0_cov.tolist(),
    }
    if model.rate_matrix is not None:
        d["rate_matrix"] = model.rate_matrix.tolist()
    return d


_MODEL_KEYS = {
    "modes",
    "embedded",
    "sojourns",
    "init_mode_dist",
    "x0_mean",
    "x0_cov",
    "rate_matrix",
    "preset",
}


def model_from_dict(d: dict) -> SMJLSModel:
    unknown = set(d) - _MODEL_KEYS
    if unknown:
        raise ValueError(f"unknown model keys: {sorted(unknown)}")
    if d.get("preset") == "maglev":
        return maglev_preset()
    if "preset" in d:
        raise ValueError(f"unknown preset {d['preset']!r}")
    modes = tuple(
        Mode(i, A=m["A"], C=m["C"], D=m["D"], E=m["E"]) for i, m in enumerate(d["modes"])
    )
    if "rate_matrix" in d and "sojourns" not in d:
        return from_rate_matrix(
            modes, d["rate_matrix"], d["init_mode_dist"], d["x0_mean"], d["x0_cov"]
        )
    sojourns = tuple(SojournDistribution.from_dict(s) for s in d["sojourns"])
    return SMJLSModel(
        modes=modes,
        embedded=d["embedded"],
        sojourns=sojourns,
        init_mode_dist=d["init_mode_dist"],
        x0_mean=d["x0_mean"],
        x0_cov=d["x0_cov"],
        rate_matrix=np.asarray(d["rate_matrix"], dtype=float) if "rate_matrix" in d else None,
    )


def model_hash(model: SMJLSModel) -> str:
    """Stable content hash used to bind grids and trees to a model."""
    payload = json.dumps(model_to_dict(model), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]
