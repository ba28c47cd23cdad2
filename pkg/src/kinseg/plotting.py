"""Matplotlib renderings of run artifacts, written straight to image files."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_densities(c: np.ndarray, rho_init, rho_final, rho_gtsm, path, axis_label: str = "c") -> Path:
    """Initial, final and target feature densities on one axis (one panel per channel)."""
    rho_init, rho_final = np.atleast_2d(rho_init), np.atleast_2d(rho_final)
    rho_gtsm = None if rho_gtsm is None else np.atleast_2d(rho_gtsm)
    k = rho_init.shape[0]
    fig, axes = plt.subplots(1, k, figsize=(4.2 * k, 3.2), squeeze=False)
    for i, ax in enumerate(axes[0]):
        ax.plot(c, rho_init[i], label="initial")
        ax.plot(c, rho_final[i], label="final")
        if rho_gtsm is not None:
            ax.plot(c, rho_gtsm[i], "k--", label="target")
        ax.set_xlabel(axis_label if k == 1 else f"{axis_label}{i}")
        ax.set_ylabel("density")
    axes[0][0].legend(frameon=False)
    return _save(fig, path)


def plot_masks(image: np.ndarray, gtsm: np.ndarray | None, mask: np.ndarray, path) -> Path:
    panels = [("input", image), ("mask", mask)]
    if gtsm is not None:
        panels.insert(1, ("ground truth", gtsm))
    fig, axes = plt.subplots(1, len(panels), figsize=(3.2 * len(panels), 3.2))
    for ax, (title, arr) in zip(np.atleast_1d(axes), panels):
        a = np.asarray(arr, float)
        if a.ndim == 3 and a.shape[2] == 1:
            a = a[:, :, 0]
        if a.ndim == 3:
            lo, hi = a.min(), a.max()
            a = (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)
            ax.imshow(a)
        else:
            ax.imshow(a, cmap="gray")
        ax.set_title(title)
        ax.axis("off")
    return _save(fig, path)


def plot_history(iterations: Sequence[int], best: Sequence[float], path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.semilogy(iterations, np.maximum(np.asarray(best, float), 1e-16))
    ax.set_xlabel("iteration")
    ax.set_ylabel("best loss")
    return _save(fig, path)


def plot_landscape(xv, yv, values: np.ndarray, xlabel: str, ylabel: str, path, best=None) -> Path:
    fig, ax = plt.subplots(figsize=(4.8, 3.8))
    z = np.where(np.isfinite(values), values, np.nan)
    im = ax.pcolormesh(xv, yv, z.T, shading="nearest")
    fig.colorbar(im, ax=ax, label="loss")
    if best is not None:
        ax.plot(*best, "r.", ms=10)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    return _save(fig, path)


def plot_moment_series(times, series: dict[str, np.ndarray], path, ylabel: str = "F") -> Path:
    """Time series of a windowed moment; one line per label (e.g. per epsilon and component)."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for label, y in series.items():
        ax.plot(times, y, label=label)
    ax.set_xlabel("t")
    ax.set_ylabel(ylabel)
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)


def plot_profiles(c, profiles: dict[str, np.ndarray], path, ylabel: str = "density") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for label, y in profiles.items():
        ax.plot(c, y, label=label)
    ax.set_xlabel("c")
    ax.set_ylabel(ylabel)
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)


__all__ = [
    "plot_densities",
    "plot_masks",
    "plot_history",
    "plot_landscape",
    "plot_moment_series",
    "plot_profiles",
]
