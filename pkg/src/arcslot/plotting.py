"""Matplotlib figures written next to the text reports (Agg backend, files only)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_loop_means(loop_means: Mapping[int, float], path: str | Path, max_loops: int | None = None) -> Path:
    """Bar chart of mean passes per slot at each gated layer."""
    fig, ax = plt.subplots(figsize=(5, 3))
    layers = sorted(loop_means)
    ax.bar([str(l) for l in layers], [loop_means[l] for l in layers], color="tab:blue")
    ax.set_xlabel("layer")
    ax.set_ylabel("mean loops per slot")
    if max_loops:
        ax.set_ylim(0, max_loops)
    return _save(fig, path)


def plot_ppl(ppl: Mapping[str, float], path: str | Path) -> Path:
    """Reconstruction perplexity per model, log scale."""
    fig, ax = plt.subplots(figsize=(5, 3))
    names = list(ppl)
    ax.bar(names, [ppl[n] for n in names], color="tab:orange")
    ax.set_yscale("log")
    ax.set_ylabel("perplexity")
    return _save(fig, path)


def plot_buckets(buckets: Mapping[str, object], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3))
    labels = [b.label for b in buckets.values()]
    ax.bar(labels, [b.accuracy for b in buckets.values()], color="tab:green")
    ax.set_ylim(0, 1)
    ax.set_ylabel("accuracy")
    return _save(fig, path)


def plot_losses(losses: list[float], path: str | Path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(range(1, len(losses) + 1), losses, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if title:
        ax.set_title(title)
    return _save(fig, path)
