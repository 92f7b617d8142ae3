"""Figures for the evaluation reports, rendered headless to PNG."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import EvalReport  # noqa: E402


def overlay(image: np.ndarray, mask: np.ndarray, color=(0, 255, 0), strength: float = 0.5) -> np.ndarray:
    """Tint ``image`` (H, W, 3 uint8) towards ``color`` where the mask is high."""
    m = np.clip(np.asarray(mask, dtype=np.float64), 0.0, 1.0)[..., None] * strength
    out = image.astype(np.float64) * (1 - m) + np.asarray(color, dtype=np.float64) * m
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    # fixed metadata keeps the PNG bytes identical across reruns
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_sweep(report: EvalReport, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    concepts = sorted({r[1] for r in report.rows})
    for c in concepts:
        pts = sorted((r[0], r[2]) for r in report.rows if r[1] == c)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=c)
    ax.set_xlabel("timestep t")
    ax.set_ylabel("mIoU")
    ax.set_ylim(0, 1)
    ax.invert_xaxis()
    ax.legend()
    return _save(fig, path)


def plot_ablation(report: EvalReport, path: Path) -> Path:
    modes = [r[0] for r in report.rows]
    rates = [r[2] for r in report.rows]
    devs = [r[3] for r in report.rows]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(7, 3))
    a1.bar(modes, rates, color="tab:red")
    a1.set_title("suppression rate")
    a1.set_ylim(0, 1)
    a2.bar(modes, devs, color="tab:blue")
    a2.set_title("outside-mask deviation")
    return _save(fig, path)


def plot_safety(report: EvalReport, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.bar(["base", "region_guided"], [report.notes["base_detections"], report.notes["controlled_detections"]],
           color=["tab:gray", "tab:green"])
    ax.set_ylabel(f"oracle detections / {report.n}")
    return _save(fig, path)


def plot_localization(report: EvalReport, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3))
    concepts = sorted({r[1] for r in report.rows})
    ts = sorted({r[0] for r in report.rows})
    width = 0.8 / max(1, len(concepts))
    for i, c in enumerate(concepts):
        vals = [next(r[2] for r in report.rows if r[0] == t and r[1] == c) for t in ts]
        ax.bar(np.arange(len(ts)) + i * width, vals, width, label=c)
    ax.set_xticks(np.arange(len(ts)) + width * (len(concepts) - 1) / 2, [str(t) for t in ts])
    ax.set_xlabel("timestep t")
    ax.set_ylabel("mIoU")
    ax.set_ylim(0, 1)
    ax.legend()
    return _save(fig, path)


PLOTTERS = {"sweep": plot_sweep, "ablation": plot_ablation, "safety": plot_safety,
            "localization": plot_localization}


def plot_report(report: EvalReport, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    return PLOTTERS[report.experiment](report, directory / f"{report.stem}.png")


def sample_grid(images, path: str | Path, masks=None, cols: int = 8) -> Path:
    """Contact sheet of samples, optionally with mask overlays in a second row block."""
    tiles = list(images) + ([overlay(im, m) for im, m in zip(images, masks)] if masks is not None else [])
    rows = -(-len(tiles) // cols)
    fig, axes = plt.subplots(rows, cols, figsize=(cols * 1.1, rows * 1.1), squeeze=False)
    for ax in axes.flat:
        ax.axis("off")
    for ax, im in zip(axes.flat, tiles):
        ax.imshow(im, interpolation="nearest")
    return _save(fig, Path(path))
