"""Offline figures rendered next to the delimited outputs."""
from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def render_training_curves(metrics: list, path) -> None:
    """Loss components and evaluation metrics against the step axis."""
    lines = [m for m in metrics if "eval" in m]
    if not lines:
        return
    steps = [m["step"] for m in lines]
    fig, axes = plt.subplots(2, 2, figsize=(10, 7), constrained_layout=True)

    ax = axes[0][0]
    for key in ("total", "fm", "anchor", "corridor"):
        ax.plot(steps, [m["train"].get(key, math.nan) for m in lines], label=key)
    ax.set_title("training loss components")
    ax.set_xlabel("step")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)

    panels = [
        ("endpoint_error", "endpoint error (m)", axes[0][1]),
        ("corridor_violation_rate", "corridor violation rate", axes[1][0]),
        ("fm_val_loss", "validation FM loss", axes[1][1]),
    ]
    for key, title, ax in panels:
        ax.plot(steps, [m["eval"][key] for m in lines], marker="o", ms=3)
        ax.set_title(title)
        ax.set_xlabel("step")
        ax.grid(alpha=0.3)
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_ablation_chart(rows: list, path) -> None:
    """Per-variant bars for the headline evaluation metrics."""
    names = [r["variant"] for r in rows]
    fig, axes = plt.subplots(1, 3, figsize=(13, 4), constrained_layout=True)
    for ax, key, title in zip(
        axes,
        ("violation_rate", "endpoint_error", "anchor_mae"),
        ("corridor violation rate", "endpoint error (m)", "anchor MAE (m)"),
    ):
        vals = [r.get(key, math.nan) for r in rows]
        ax.barh(range(len(names)), vals, color="tab:blue")
        ax.set_yticks(range(len(names)))
        ax.set_yticklabels(names, fontsize=8)
        ax.invert_yaxis()
        ax.set_title(title)
        ax.grid(alpha=0.3, axis="x")
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_eval_families(report: dict, path) -> None:
    """Per-family breakdown bars for one evaluation report."""
    fams = sorted(report.get("per_family", {}))
    if not fams:
        return
    keys = ("endpoint_error", "violation_rate", "anchor_mae")
    fig, axes = plt.subplots(1, len(keys), figsize=(4 * len(keys), 3.5),
                             constrained_layout=True)
    for ax, key in zip(axes, keys):
        ax.bar(range(len(fams)), [report["per_family"][f][key] for f in fams],
               color="tab:green")
        ax.set_xticks(range(len(fams)))
        ax.set_xticklabels(fams, rotation=20, fontsize=8)
        ax.set_title(key)
        ax.grid(alpha=0.3, axis="y")
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_sample_paths(gt_disp_paths: np.ndarray, gen_disp_paths: np.ndarray,
                        path, max_paths: int = 8) -> None:
    """Cumulative displacement overlays (xy and xz projections)."""
    n = min(max_paths, gt_disp_paths.shape[0])
    fig, axes = plt.subplots(1, 2, figsize=(10, 4.5), constrained_layout=True)
    for ax, (i, j), title in zip(axes, ((0, 1), (0, 2)), ("xy", "xz")):
        for b in range(n):
            gt = gt_disp_paths[b]
            gen = gen_disp_paths[b]
            ax.plot(gt[:, i], gt[:, j], color="k", lw=1.2,
                    label="reference" if b == 0 else None)
            ax.plot(gen[:, i], gen[:, j], color="tab:red", lw=1.0, alpha=0.7,
                    label="generated" if b == 0 else None)
        ax.set_title(f"cumulative displacement ({title})")
        ax.set_aspect("equal", adjustable="datalim")
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
    fig.savefig(path, dpi=150)
    plt.close(fig)


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
