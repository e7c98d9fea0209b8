"""Figures written next to the CSV outputs."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

BLUE = np.array([0, 0, 255], dtype=float)
RED = np.array([255, 0, 0], dtype=float)


def blue_red(values: np.ndarray) -> np.ndarray:
    """Map a real grid to RGB bytes on a linear blue (low) to red (high) ramp."""
    v = np.asarray(values, dtype=float)
    lo, hi = float(v.min()), float(v.max())
    t = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
    rgb = BLUE + t[..., None] * (RED - BLUE)
    return np.rint(rgb).astype(np.uint8)


def write_ppm(path, values: np.ndarray, scale: int = 8) -> None:
    rgb = blue_red(values)
    if scale > 1:
        rgb = rgb.repeat(scale, axis=0).repeat(scale, axis=1)
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)


def plot_heatmap(path, values: np.ndarray, title: str) -> None:
    fig, ax = plt.subplots(figsize=(4, 3.6))
    im = ax.imshow(values, cmap="coolwarm", origin="upper")
    ax.plot([(values.shape[1] - 1) / 2], [(values.shape[0] - 1) / 2], "k+", ms=10)
    ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_val_surface(path, surface: Sequence[dict]) -> None:
    """Mean val average over folds as a function of M_z, one line per M_y (best C)."""
    best: dict[tuple[int, int], list[float]] = {}
    for s in surface:
        best.setdefault((s["my"], s["mz"], s["fold"]), []).append(s["average"])
    agg: dict[tuple[int, int], list[float]] = {}
    for (my, mz, _), vals in best.items():
        agg.setdefault((my, mz), []).append(max(vals))
    fig, ax = plt.subplots(figsize=(5, 3.6))
    for my in sorted({k[0] for k in agg}):
        mzs = sorted(mz for m, mz in agg if m == my)
        ax.plot(mzs, [np.mean(agg[my, mz]) for mz in mzs], marker="o", label=f"M_y={my}")
    ax.set_xlabel("M_z")
    ax.set_ylabel("val average accuracy")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_alpha_sweep(path, rows: Sequence[dict]) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.6))
    a = [r["alpha"] for r in rows]
    ax.plot(a, [r["seg"] for r in rows], marker="o", label="Jaccard")
    ax.plot(a, [r["parse"] for r in rows], marker="s", label="attachment accuracy")
    ax.set_xlabel("alpha")
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_bars(path, labels: Sequence[str], series: dict[str, Sequence[float]], ylabel: str) -> None:
    fig, ax = plt.subplots(figsize=(max(5, 0.9 * len(labels)), 3.6))
    x = np.arange(len(labels))
    width = 0.8 / max(1, len(series))
    for n, (name, vals) in enumerate(series.items()):
        ax.bar(x + n * width, vals, width, label=name)
    ax.set_xticks(x + width * (len(series) - 1) / 2)
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
