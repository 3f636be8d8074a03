"""Render training-metrics figures from a run's metrics CSV.

Reads the per-epoch log written by pretrain and produces PNG files next to
whatever output directory the caller names: total loss, per-term curves, the
covariance-term trace, and the learning-rate schedule.
"""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .errors import FormatError
from .train import METRICS_HEADER

__all__ = ["read_metrics", "render_report"]


def read_metrics(path: str) -> list[dict[str, float | None]]:
    """Parse metrics.csv into typed rows; absent cells become None."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty metrics file")
        if header != METRICS_HEADER.split(","):
            raise FormatError(
                f"{path}: unexpected header {','.join(header)!r}")
        rows = []
        for lineno, cells in enumerate(reader, start=2):
            if len(cells) != len(header):
                raise FormatError(
                    f"{path}:{lineno}: expected {len(header)} cells, "
                    f"got {len(cells)}")
            row: dict[str, float | None] = {}
            for key, cell in zip(header, cells):
                row[key] = None if cell == "" else float(cell)
            rows.append(row)
    if not rows:
        raise FormatError(f"{path}: no metrics records to plot")
    return rows


def _series(rows, key):
    values = [r[key] for r in rows]
    return values if any(v is not None for v in values) else None


def _save(fig, out_dir: str, name: str, written: list[str]) -> None:
    path = os.path.join(out_dir, name)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    written.append(path)


def render_report(metrics_path: str, out_dir: str) -> list[str]:
    """Write the four standard figures; returns the created file paths."""
    rows = read_metrics(metrics_path)
    os.makedirs(out_dir, exist_ok=True)
    epochs = [r["epoch"] for r in rows]
    written: list[str] = []

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [r["total"] for r in rows], marker="o", ms=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("total loss")
    ax.set_title("Training objective")
    fig.tight_layout()
    _save(fig, out_dir, "loss_total.png", written)

    fig, axes = plt.subplots(1, 3, figsize=(12, 4), sharex=True)
    for ax, term, label in zip(axes, "svc",
                               ("invariance s", "variance v", "covariance c")):
        for k in range(2):
            series = _series(rows, f"{term}{k}")
            if series is not None:
                ax.plot(epochs, series, marker="o", ms=3, label=f"stack {k}")
        ax.set_xlabel("epoch")
        ax.set_title(label)
        ax.legend()
    fig.tight_layout()
    _save(fig, out_dir, "loss_terms.png", written)

    fig, ax = plt.subplots(figsize=(6, 4))
    for k in range(2):
        series = _series(rows, f"c{k}")
        if series is not None:
            ax.plot(epochs, series, marker="o", ms=3, label=f"stack {k}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("covariance term")
    ax.set_title("Covariance term during training")
    ax.legend()
    fig.tight_layout()
    _save(fig, out_dir, "covariance_trace.png", written)

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [r["lr"] for r in rows], marker="o", ms=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("learning rate")
    ax.set_title("Learning-rate schedule")
    fig.tight_layout()
    _save(fig, out_dir, "learning_rate.png", written)
    return written
