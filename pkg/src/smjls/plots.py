"""Figure rendering for the report paths.

Every report command writes plot-ready CSV first; these helpers render the
same data to PNG files next to the CSV so a run leaves a self-contained
report directory.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = ["plot_distortion", "plot_branch_growth", "plot_comparison", "plot_error_curve"]

plt.rc("figure", figsize=(6.4, 4.0), dpi=120)
plt.rc("axes", grid=True)
plt.rc("grid", alpha=0.3)


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_distortion(rows: list[dict], path) -> None:
    """Log-log codebook distortion against grid size, one line per mode."""
    fig, ax = plt.subplots()
    nus = [r["nu"] for r in rows]
    modes = sorted(
        int(k.split("err_mode")[1]) for k in rows[0] if k.startswith("err_mode")
    )
    for i in modes:
        ax.loglog(nus, [r[f"err_mode{i}"] for r in rows], "o-", label=f"mode {i}")
    ax.set_xlabel("grid size")
    ax.set_ylabel("L2 quantization error")
    ax.legend()
    _save(fig, path)


def plot_branch_growth(rows: list[dict], path) -> None:
    fig, ax = plt.subplots()
    ax.semilogy([r["nu"] for r in rows], [r["branches"] for r in rows], "s-")
    ax.set_xlabel("grid size")
    ax.set_ylabel("pre-computed branches")
    _save(fig, path)


def plot_comparison(rows: list[dict], path) -> None:
    """Mean integrated squared error per filter against grid size, one panel
    per horizon."""
    horizons = sorted({r["horizon"] for r in rows})
    fig, axes = plt.subplots(1, len(horizons), figsize=(5.0 * len(horizons), 4.0),
                             squeeze=False)
    for ax, T in zip(axes[0], horizons):
        sub = [r for r in rows if r["horizon"] == T]
        nus = [r["nu"] for r in sub]
        ax.plot(nus, [r["kbf_mean"] for r in sub], "k--", label="exact filter")
        ax.errorbar(nus, [r["quantized_mean"] for r in sub],
                    yerr=[r["quantized_se"] for r in sub], fmt="o-",
                    label="quantized filter")
        ax.plot(nus, [r["lmmse_mean"] for r in sub], "s:", label="Markovian LMMSE")
        ax.set_xlabel("grid size")
        ax.set_ylabel("mean integrated squared error")
        ax.set_title(f"horizon {T}")
        ax.legend()
    _save(fig, path)


def plot_error_curve(curve: dict, path, ylabel: str) -> None:
    """Per-tick mean error curves, one line per grid size, log scale."""
    fig, ax = plt.subplots()
    for key in curve:
        if key.startswith("mean_nu"):
            nu = key.removeprefix("mean_nu")
            vals = np.asarray(curve[key], dtype=float)
            ax.semilogy(curve["t"], np.maximum(vals, 1e-300), label=f"{nu} points")
    ax.set_xlabel("t")
    ax.set_ylabel(ylabel)
    ax.legend()
    _save(fig, path)
