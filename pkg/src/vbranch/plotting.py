"""Report figures written next to the CSV outputs."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FIGSIZE = (5.0, 3.2)


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_cmc(report, path, max_rank: int = 20):
    cmc = np.asarray(report.cmc)[:max_rank]
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax.plot(np.arange(1, len(cmc) + 1), cmc, marker="o", ms=3)
    ax.set_xlabel("rank")
    ax.set_ylabel("matching rate")
    ax.set_ylim(0, 1.02)
    ax.set_title(f"CMC (mAP {report.map:.3f})")
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_history(history, path):
    steps = [r["step"] for r in history]
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax.plot(steps, [r["triplet"] for r in history], label="triplet", lw=1)
    for region in ("neck", "hip", "ankle"):
        vals = [r[f"loc_{region}"] for r in history]
        if any(vals):
            ax.plot(steps, vals, label=f"loc {region}", lw=1)
    ax.plot(steps, [r["total"] for r in history], label="total", lw=1, color="k")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_bench(rows, path):
    b = [r["b"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.0, 3.2))
    ax1.plot(b, [r["train_s_per_epoch"] for r in rows], marker="o", label="train s/epoch")
    ax1.plot(b, [r["infer_s_per_1k"] for r in rows], marker="s", label="infer s/1k")
    ax1.set_xlabel("branches")
    ax1.set_ylabel("seconds")
    ax1.legend(fontsize=7)
    ax2.plot(b, [r["flops_fwd"] for r in rows], marker="o", color="C2")
    ax2.set_xlabel("branches")
    ax2.set_ylabel("forward ops / sample")
    return _save(fig, path)


def plot_heatmap(grid, path, title=""):
    fig, ax = plt.subplots(figsize=(2.4, 3.6))
    im = ax.imshow(grid, cmap="viridis", vmin=0, vmax=1)
    fig.colorbar(im, ax=ax, fraction=0.08)
    ax.set_title(title, fontsize=8)
    ax.set_xticks([])
    ax.set_yticks([])
    return _save(fig, path)


def plot_heatmaps(grids, titles, path, cols: int = 6):
    n = len(grids)
    cols = min(cols, n)
    rows = -(-n // cols)
    fig, axes = plt.subplots(rows, cols, figsize=(1.3 * cols, 2.2 * rows), squeeze=False)
    for ax in axes.flat:
        ax.axis("off")
    for ax, grid, title in zip(axes.flat, grids, titles):
        ax.imshow(grid, cmap="viridis", vmin=0, vmax=1)
        ax.set_title(title, fontsize=6)
    return _save(fig, path)
