"""Matplotlib figures for analysis reports.

Imported only when figures are requested, so the core library and the PGM/CSV
outputs do not depend on a plotting backend.
"""
from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def mass_ratio_figure(report, path):
    fig, ax = plt.subplots(figsize=(5, 3.6))
    for la in report.layers:
        ax.plot(la.mass.sizes, la.mass.ratios, marker="o", ms=3, label=f"{la.index}: {la.name} ({la.size[0]}x{la.size[1]})")
    ax.axhline(report.threshold, color="gray", lw=0.8, ls="--")
    ax.set_xlabel("centered window side")
    ax.set_ylabel("mean kernel mass ratio")
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def pca_figure(la, domain, path, max_components=16):
    rep = la.pca[domain]
    h, w = la.size
    imgs = rep.component_images(h, w)[:max_components]
    k = len(imgs)
    fig, axes = plt.subplots(2, k, figsize=(1.1 * k + 0.5, 2.6), squeeze=False,
                             gridspec_kw={"height_ratios": [1, 0.8]})
    for i in range(k):
        lim = np.abs(imgs[i]).max() or 1.0
        axes[0, i].imshow(imgs[i], cmap="RdBu_r", vmin=-lim, vmax=lim)
        axes[0, i].set_axis_off()
        axes[1, i].set_axis_off()
    gs = axes[1, 0].get_gridspec()
    bar = fig.add_subplot(gs[1, :])
    bar.bar(np.arange(k), rep.explained_variance_ratio[:k], color="tab:blue")
    bar.set_xlim(-0.5, k - 0.5)
    bar.set_ylabel("expl. var.", fontsize=7)
    bar.tick_params(labelsize=6)
    fig.suptitle(f"layer {la.index} {la.name}: {domain} PCA (rank {rep.rank})", fontsize=8)
    fig.savefig(path, dpi=120)
    plt.close(fig)


def effective_size_figure(report, path):
    fig, ax = plt.subplots(figsize=(5, 3))
    idx = np.arange(len(report.layers))
    ax.bar(idx, [la.mean_effective_size for la in report.layers], color="tab:orange", label="mean effective size")
    ax.plot(idx, [min(la.size) for la in report.layers], "k_", ms=20, label="feature-map side")
    ax.set_xticks(idx)
    ax.set_xlabel("NIFF layer")
    ax.set_ylabel(f"window side (ratio >= {report.threshold})")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_report(report, out_dir, max_components=16):
    """Write all figures; returns their file names."""
    files = ["mass_ratio.png", "effective_size.png"]
    mass_ratio_figure(report, os.path.join(out_dir, files[0]))
    effective_size_figure(report, os.path.join(out_dir, files[1]))
    for la in report.layers:
        for domain in la.pca:
            name = f"layer{la.index}_pca_{domain}.png"
            pca_figure(la, domain, os.path.join(out_dir, name), max_components)
            files.append(name)
    return files


def training_curves(rows, path):
    """Loss and accuracy per epoch from metric rows."""
    ep = [r["epoch"] for r in rows]
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3))
    a.plot(ep, [r["train_loss"] for r in rows], marker="o")
    a.set_xlabel("epoch")
    a.set_ylabel("train loss")
    b.plot(ep, [r["train_acc"] for r in rows], marker="o", label="train")
    b.plot(ep, [r["test_acc"] for r in rows], marker="s", label="test")
    b.set_xlabel("epoch")
    b.set_ylabel("top-1")
    b.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def bench_figure(rows, path):
    """Log-log median time against N for each op, one line per kernel size."""
    fig, ax = plt.subplots(figsize=(5, 3.6))
    keys = sorted({(r["op"], r["M"]) for r in rows})
    for op, m in keys:
        sel = sorted((r for r in rows if r["op"] == op and r["M"] == m), key=lambda r: r["N"])
        ax.loglog([r["N"] for r in sel], [r["median_ns"] for r in sel], marker="o", ms=3, label=f"{op} M={m}")
    ax.set_xlabel("feature-map side N")
    ax.set_ylabel("median ns per call")
    ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
