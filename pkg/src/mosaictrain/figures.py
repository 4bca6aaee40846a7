"""Matplotlib rendering for the report paths.

Every report command writes its figures next to the delimited output files.
All functions save to disk (Agg backend) and return the path.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _parse_metrics(csv_text: str):
    lines = csv_text.strip().split("\n")
    header = lines[0].split(",")
    cols = {name: i for i, name in enumerate(header)}
    phase_loss: dict[str, list[tuple[int, float]]] = {}
    eval_rows: list[tuple[int, float, float]] = []
    for line in lines[1:]:
        parts = line.split(",")
        epoch = int(parts[cols["epoch"]])
        if parts[cols["phase"]] == "eval":
            eval_rows.append((epoch, float(parts[cols["acc_concat"]]),
                              float(parts[cols["acc_mix"]])))
        else:
            stage = parts[cols["stage"]]
            phase_loss.setdefault(stage, []).append(
                (epoch, float(parts[cols["loss"]])))
    return phase_loss, eval_rows


def save_training_curves(csv_text: str, path: str | Path) -> Path:
    """Per-phase loss curves plus concat/mix accuracy on a twin axis."""
    phase_loss, eval_rows = _parse_metrics(csv_text)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for stage, pts in phase_loss.items():
        xs, ys = zip(*pts)
        ax.plot(xs, ys, label=f"loss[{stage}]", alpha=0.8)
    ax.set_xlabel("epoch")
    ax.set_ylabel("cross-entropy loss")
    if eval_rows:
        ax2 = ax.twinx()
        xs, acc_c, acc_m = zip(*eval_rows)
        ax2.plot(xs, acc_c, "k--", label="acc concat")
        ax2.plot(xs, acc_m, "k-", label="acc mix")
        ax2.set_ylabel("accuracy")
        ax2.set_ylim(0, 1.05)
        ax2.legend(loc="center right", fontsize=8)
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_robustness_bars(report, path: str | Path) -> Path:
    """Grouped bars of concat/mix accuracy per corruption condition."""
    labels = [r.label for r in report.rows]
    concat = [r.report.acc_concat for r in report.rows]
    mix = [r.report.acc_mix for r in report.rows]
    x = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(x - 0.2, concat, width=0.4, label="concat")
    ax.bar(x + 0.2, mix, width=0.4, label="mix")
    ax.set_xticks(x, labels, rotation=15)
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1.05)
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_ablation_bars(rows, path: str | Path) -> Path:
    """rows: list of (label, acc_concat, acc_mix or None)."""
    labels = [r[0] for r in rows]
    concat = [r[1] for r in rows]
    mix = [r[2] if r[2] is not None else 0.0 for r in rows]
    x = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(x - 0.2, concat, width=0.4, label="concat")
    ax.bar(x + 0.2, mix, width=0.4, label="mix")
    ax.set_xticks(x, labels, rotation=15)
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0, 1.05)
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_cam_overlay(image, cam, path: str | Path, alpha: float = 0.45) -> Path:
    """Heatmap blended over the input image; also usable for the raw map."""
    img = image.permute(1, 2, 0).numpy() if hasattr(image, "permute") else image
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(np.clip(img, 0, 1))
    ax.imshow(cam, cmap="jet", alpha=alpha, vmin=0.0, vmax=1.0)
    ax.axis("off")
    fig.tight_layout(pad=0)
    path = Path(path)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path
