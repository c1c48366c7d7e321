"""Figures and line-delimited records for training/evaluation runs."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def write_jsonl(path, records: Iterable[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def read_jsonl(path) -> list[dict]:
    with Path(path).open() as f:
        return [json.loads(line) for line in f if line.strip()]


def plot_loss_curves(records: Sequence[dict], path) -> Path:
    """Spectral, RGB and total loss per iteration, log scale."""
    it = [r["iteration"] for r in records]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key, label in (("l_total", "total"), ("l_ms", "spectral"), ("l_rgb", "RGB")):
        values = np.array([r[key] for r in records], dtype=float)
        if np.any(values > 0):
            ax.plot(it, values, label=label, linewidth=1)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_band_psnr(wavelengths: Sequence[float], psnr: Sequence[float], path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar([f"{w:g}" for w in wavelengths], psnr, color="tab:blue")
    ax.set_xlabel("band (nm)")
    ax.set_ylabel("PSNR (dB)")
    ax.tick_params(axis="x", rotation=60)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_spectral_montage(cube: np.ndarray, wavelengths: Sequence[float], path,
                          reference: np.ndarray | None = None) -> Path:
    """One panel per band; a second row shows the reference when given."""
    n = cube.shape[2]
    rows = 2 if reference is not None else 1
    fig, axes = plt.subplots(rows, n, figsize=(1.2 * n, 1.3 * rows + 0.3), squeeze=False)
    vmax = float(max(cube.max(), reference.max() if reference is not None else 0.0, 1e-6))
    for b in range(n):
        axes[0, b].imshow(cube[:, :, b], cmap="gray", vmin=0, vmax=vmax)
        axes[0, b].set_title(f"{wavelengths[b]:g}", fontsize=7)
        if reference is not None:
            axes[1, b].imshow(reference[:, :, b], cmap="gray", vmin=0, vmax=vmax)
    for ax in axes.ravel():
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
