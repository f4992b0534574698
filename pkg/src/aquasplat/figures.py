"""Matplotlib report rendering: every delimited output gets a figure next to it."""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .geom import Camera
from .waterfield import field_forward

LOSS_KEYS = ("loss_total", "loss_recon", "loss_trans", "loss_depth_var",
             "loss_depth_corr", "loss_patch_freq")


def save_loss_curves(csv_path, out_png) -> None:
    """Loss terms and train-view PSNR over iterations, from the training CSV."""
    with open(csv_path, "r", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    if not rows:
        return
    iters = np.array([int(r["iteration"]) for r in rows])
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(11, 4))
    for key in LOSS_KEYS:
        vals = np.array([float(r[key]) for r in rows])
        ax1.plot(iters, np.maximum(vals, 1e-12), label=key.replace("loss_", ""))
    ax1.set_yscale("log")
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=8)
    ax1.set_title("training losses")
    ax2.plot(iters, [float(r["psnr"]) for r in rows], color="tab:green")
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("train-view PSNR (dB)")
    ax2.set_title("reconstruction quality")
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)


def save_metric_bars(names, psnr_vals, ssim_vals, out_png) -> None:
    """Per-view PSNR/SSIM bars for an evaluation run."""
    x = np.arange(len(names))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(11, 3.6))
    ax1.bar(x, psnr_vals, color="tab:blue")
    ax1.set_xticks(x, names, rotation=60, fontsize=7)
    ax1.set_ylabel("PSNR (dB)")
    ax2.bar(x, ssim_vals, color="tab:orange")
    ax2.set_xticks(x, names, rotation=60, fontsize=7)
    ax2.set_ylabel("SSIM")
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)


def direction_grid(n: int) -> np.ndarray:
    """(n, n, 3) unit directions on an azimuth/elevation lat-long grid."""
    az = np.linspace(-np.pi, np.pi, n)
    el = np.linspace(-0.49 * np.pi, 0.49 * np.pi, n)
    a, e = np.meshgrid(az, el, indexing="xy")
    return np.stack([np.cos(e) * np.sin(a), np.sin(e), np.cos(e) * np.cos(a)], axis=-1)


def water_maps(field, n: int = 64):
    """Ambient light and water coefficients over a direction grid."""
    dirs = direction_grid(n)
    ambient, atten, back, _ = field_forward(field, dirs.reshape(-1, 3))
    return (ambient.reshape(n, n, 3), atten.reshape(n, n, 3), back.reshape(n, n, 3))


def save_water_figure(field, out_png, n: int = 64) -> None:
    ambient, atten, back = water_maps(field, n)
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.6))
    axes[0].imshow(np.clip(ambient, 0, 1), origin="lower")
    axes[0].set_title("ambient light")
    for ax, buf, title in ((axes[1], atten, "attenuation"), (axes[2], back, "backscatter")):
        scale = max(buf.max(), 1e-9)
        ax.imshow(np.clip(buf / scale, 0, 1), origin="lower")
        ax.set_title(f"{title} (max {scale:.3f})")
    for ax in axes:
        ax.set_xlabel("azimuth")
        ax.set_ylabel("elevation")
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)


def depth_to_turbo(depth, r_max) -> np.ndarray:
    """Display-encoded turbo colormap of a depth/distance map."""
    norm = np.clip(np.asarray(depth, dtype=np.float64) / float(r_max), 0.0, 1.0)
    return matplotlib.colormaps["turbo"](norm)[..., :3]
