"""Static figures for the report paths of the command-line tools.

Everything renders with the Agg backend and strips the software tag from
PNG metadata, so identical inputs give byte-identical files.
"""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def plot_lower_bounds(curves, path, reference=None, ylabel="lower bound", title=None):
    """One line per run; ``reference`` draws a horizontal line (e.g. ground truth)."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for c in curves:
        ax.plot(np.arange(len(c)), c, lw=1)
    if reference is not None:
        ax.axhline(reference, color="red", lw=1.5, label="ground truth")
        ax.legend(loc="lower right")
    ax.set_xlabel("EM iteration")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_fields(M, path, patch_shape=None, title=None, max_fields=64):
    """Grid of generative fields (columns of ``M``), each reshaped to ``patch_shape``."""
    D, H = M.shape
    if patch_shape is None:
        side = int(round(math.sqrt(D)))
        if side * side != D:
            return None
        patch_shape = (side, side)
    n = min(H, max_fields)
    cols = min(n, 10)
    rows = math.ceil(n / cols)
    fig, axes = plt.subplots(rows, cols, figsize=(cols * 0.9, rows * 0.9 + (0.3 if title else 0)), squeeze=False)
    lo, hi = float(M.min()), float(M.max())
    for k, ax in enumerate(axes.ravel()):
        ax.axis("off")
        if k < n:
            ax.imshow(M[:, k].reshape(patch_shape), cmap="gray", vmin=lo, vmax=hi, interpolation="nearest")
    if title:
        fig.suptitle(title, fontsize=9)
    return _save(fig, path)


def plot_reliability(rows, path):
    """Log-likelihood gap to the generating parameters per run, grouped by ``pi``."""
    pis = sorted({r["pi"] for r in rows})
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for k, pi in enumerate(pis):
        gaps = np.array([r["loglik_gap"] for r in rows if r["pi"] == pi])
        offs = np.linspace(-0.015, 0.015, len(gaps)) if len(gaps) > 1 else np.zeros(1)
        ax.scatter(pi + offs, gaps, s=6, color=f"C{k}")
        frac = float(np.mean(gaps > 0))
        ax.annotate(f"{100 * frac:.0f}%", (pi, gaps.max()), textcoords="offset points", xytext=(0, 6), ha="center", fontsize=8)
    ax.axhline(0.0, color="red", lw=1)
    ax.set_xlabel("pi")
    ax.set_ylabel("log-likelihood gap")
    fig.tight_layout()
    return _save(fig, path)


def plot_denoising(panels, path):
    """Side-by-side images; ``panels`` is a list of ``(title, array, peak)``."""
    fig, axes = plt.subplots(1, len(panels), figsize=(3 * len(panels), 3.2), squeeze=False)
    for ax, (title, img, peak) in zip(axes[0], panels):
        ax.imshow(img, cmap="gray", vmin=0, vmax=peak, interpolation="nearest")
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    return _save(fig, path)


def plot_selection(report, path):
    """Bar chart of best free energy per datapoint per candidate."""
    res = report["results"]
    fig, ax = plt.subplots(figsize=(4, 3))
    names = [r["candidate"] for r in res]
    vals = [r["free_energy_per_datapoint"] for r in res]
    ax.bar(names, vals, color=["C2" if n == report["winner"] else "C0" for n in names])
    lo = min(vals) - 0.05 * (abs(min(vals)) + 1)
    ax.set_ylim(lo, max(vals) + 0.02 * (abs(max(vals)) + 1))
    ax.set_ylabel("free energy / datapoint")
    fig.tight_layout()
    return _save(fig, path)
