"""Matplotlib figure rendering for the evaluation and simulation reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def render_evaluation_figures(result: dict, fig_dir) -> list[Path]:
    """Per-image PSNR comparison and aggregate summary charts."""
    fig_dir = Path(fig_dir)
    fig_dir.mkdir(parents=True, exist_ok=True)
    rows = result["rows"]
    names = [r["name"] for r in rows]
    src = [r["psnr_source"] for r in rows]
    fused = [r["psnr_fused"] for r in rows]
    paths = []

    fig, ax = plt.subplots(figsize=(max(6, 0.3 * len(rows)), 4))
    x = np.arange(len(rows))
    ax.bar(x - 0.2, src, width=0.4, label="source")
    ax.bar(x + 0.2, fused, width=0.4, label="fused")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=90, fontsize=6)
    ax.set_ylabel("masked PSNR (dB)")
    ax.legend()
    fig.tight_layout()
    p = fig_dir / "psnr_per_image.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    paths.append(p)

    agg = result["aggregate"]
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.bar(["source", "fused"], [agg["mean_psnr_source"], agg["mean_psnr_fused"]])
    ax.set_ylabel("mean masked PSNR (dB)")
    ax.set_title(f"fusion rate {agg['fusion_rate']:.0%}")
    fig.tight_layout()
    p = fig_dir / "psnr_aggregate.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    paths.append(p)
    return paths


def render_session_figures(report_dict: dict, active_trace, fig_dir) -> list[Path]:
    """Timeline of ultrawide activity with shutter presses marked."""
    fig_dir = Path(fig_dir)
    fig_dir.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(8, 3))
    ax.step(range(len(active_trace)), active_trace, where="post", label="UW streaming")
    for p in report_dict["presses"]:
        color = "tab:green" if p["result"] == "fused" else "tab:red"
        ax.axvline(p["frame"], color=color, alpha=0.6)
    ax.set_xlabel("frame")
    ax.set_yticks([0, 1])
    ax.set_yticklabels(["off", "on"])
    ax.set_title(f"duty cycle {report_dict['duty_cycle']:.1%}")
    fig.tight_layout()
    path = fig_dir / "session_timeline.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return [path]


def render_loss_curve(history: list[float], fig_dir) -> Path:
    fig_dir = Path(fig_dir)
    fig_dir.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(history)
    ax.set_xlabel("step")
    ax.set_ylabel("total loss")
    ax.set_yscale("log")
    fig.tight_layout()
    path = fig_dir / "training_loss.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
