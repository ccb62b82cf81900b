"""Matplotlib figure rendering for training and evaluation reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from PIL import Image


def render_training_curves(report, out_path) -> Path:
    """Loss / lambda / admitted-fraction curves from a TrainReport."""
    epochs = [rec["epoch"] for rec in report.epochs]
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))

    axes[0].plot(epochs, [rec["mean_bilevel"] for rec in report.epochs], label="bi-level")
    axes[0].plot(epochs, [rec["mean_content"] for rec in report.epochs], label="content")
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("loss")
    axes[0].legend()
    axes[0].set_title("content losses")

    lam = [rec["lambda"] for rec in report.epochs]
    lam = [np.nan if v == "inf" else v for v in lam]
    axes[1].plot(epochs, lam, color="tab:orange")
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel("lambda")
    axes[1].set_title("self-paced threshold")

    axes[2].plot(epochs, [rec["admitted_fraction"] for rec in report.epochs],
                 color="tab:green")
    axes[2].set_ylim(-0.05, 1.05)
    axes[2].set_xlabel("epoch")
    axes[2].set_ylabel("admitted fraction")
    axes[2].set_title("sample admission")

    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def render_eval_summary(report, out_path) -> Path:
    """Per-image PSNR/SSIM bar chart for an EvalReport."""
    ids = [r["id"] for r in report.rows]
    psnrs = [r["psnr_db"] if np.isfinite(r["psnr_db"]) else np.nan for r in report.rows]
    ssims = [r["ssim"] for r in report.rows]
    pos = np.arange(len(ids))

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(max(8, len(ids) * 0.7), 4))
    ax1.bar(pos, psnrs, color="tab:blue")
    ax1.set_xticks(pos, ids, rotation=90, fontsize=7)
    ax1.set_ylabel("PSNR (dB)")
    if report.aggregates.get("mean_psnr_db") is not None:
        ax1.axhline(report.aggregates["mean_psnr_db"], color="k", ls="--", lw=0.8)
    ax2.bar(pos, ssims, color="tab:purple")
    ax2.set_xticks(pos, ids, rotation=90, fontsize=7)
    ax2.set_ylabel("SSIM")
    ax2.set_ylim(0, 1.05)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def save_saliency_maps(sample_id, maps: dict, images: dict, out_dir) -> list[Path]:
    """Write grayscale saliency PNGs plus heatmap overlays for one sample."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    stem = Path(sample_id).stem
    for tag, smap in maps.items():
        gray_path = out_dir / f"{stem}_{tag}_saliency.png"
        Image.fromarray((smap * 255).astype(np.uint8)).save(gray_path)
        written.append(gray_path)

        image = images.get(tag)
        if image is not None:
            overlay_path = out_dir / f"{stem}_{tag}_saliency_overlay.png"
            heat = plt.get_cmap("jet")(smap)[:, :, :3]
            base = image.astype(np.float64) / 255.0
            blend = np.clip(0.55 * base + 0.45 * heat, 0, 1)
            Image.fromarray((blend * 255).astype(np.uint8)).save(overlay_path)
            written.append(overlay_path)
    return written


def render_prior_trace(trace, out_path, snapshots: dict | None = None) -> Path:
    """MSE trace of a deep-prior fit, log scale."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy(np.arange(1, len(trace) + 1), trace)
    ax.set_xlabel("iteration")
    ax.set_ylabel("MSE")
    ax.set_title("deep-prior fit")
    if snapshots:
        for it in snapshots:
            ax.axvline(it, color="gray", ls=":", lw=0.8)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
