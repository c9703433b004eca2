"""Image outputs: 8-bit PGM sample grids and matplotlib plots."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # pylint: disable=wrong-import-position
import numpy as np  # pylint: disable=wrong-import-position
from PIL import Image  # pylint: disable=wrong-import-position

from ..flow.bench import BenchPoint, fit_scaling_exponent  # pylint: disable=wrong-import-position
from ..flow.errors import ShapeError  # pylint: disable=wrong-import-position
from ..flow.fileio import atomic_write  # pylint: disable=wrong-import-position
from ..flow.training import StepRecord  # pylint: disable=wrong-import-position


def sample_grid(latents: np.ndarray) -> np.ndarray:
    """
    (n, d, h, w) latents -> (n*h, d*w) uint8 grid: one tile row per sample, one tile column per channel.

    Each channel is min-max scaled over all samples, so tiles of one column share a scale.
    """
    x = np.asarray(latents, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeError(f"expected latents (n, d, h, w), got {x.shape}")
    n, d, h, w = x.shape
    lo = x.min(axis=(0, 2, 3), keepdims=True)
    span = x.max(axis=(0, 2, 3), keepdims=True) - lo
    scaled = np.where(span > 0, (x - lo) / np.where(span > 0, span, 1.0), 0.0)
    pixels = np.round(scaled * 255.0).astype(np.uint8)
    return pixels.transpose(0, 2, 1, 3).reshape(n * h, d * w)


def write_pgm(path: Path | str, grid: np.ndarray) -> None:
    """Binary P5 greyscale."""
    with atomic_write(path, "wb") as f:
        Image.fromarray(np.ascontiguousarray(grid, dtype=np.uint8)).save(f, format="PPM")


def moving_average(values: Sequence[float], window: int) -> np.ndarray:
    data = np.asarray(values, dtype=np.float64)
    if window <= 1 or data.size < window:
        return data
    return np.convolve(data, np.ones(window) / window, mode="valid")


def plot_loss_curves(runs: Mapping[str, Sequence[StepRecord]], path: Path | str, window: int = 50) -> None:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for label, records in runs.items():
        smoothed = moving_average([r.loss for r in records], window)
        steps = [r.step for r in records][len(records) - smoothed.size :]
        ax.plot(steps, smoothed, label=label)
    ax.set_xlabel("step")
    ax.set_ylabel(f"training loss ({window}-step moving average)")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    with atomic_write(path, "wb") as f:
        fig.savefig(f, format="png", dpi=120)
    plt.close(fig)


def plot_scaling(points: Sequence[BenchPoint], path: Path | str) -> None:
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for mechanism in sorted({p.mechanism for p in points}):
        series = sorted((p for p in points if p.mechanism == mechanism), key=lambda p: p.T)
        label = mechanism
        if len(series) > 1:
            slope, _ = fit_scaling_exponent(series)
            label = f"{mechanism} (slope {slope:.2f})"
        ax.loglog([p.T for p in series], [p.wall_ns / 1e6 for p in series], marker="o", label=label)
    ax.set_xlabel("sequence length T")
    ax.set_ylabel("median forward time [ms]")
    ax.legend()
    fig.tight_layout()
    with atomic_write(path, "wb") as f:
        fig.savefig(f, format="png", dpi=120)
    plt.close(fig)
