"""Figure rendering for benchmark, training, and retrieval reports.

Every report command writes its delimited output first and then an
accompanying PNG next to it; all figures use the Agg backend so they
work headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .bench import BenchRecord, scaling_exponents


def render_bench_figure(records: list[BenchRecord], path: str) -> None:
    """Log-log scaling curves (madds, peak memory, latency) per model."""
    ex = scaling_exponents(records)
    fig, axes = plt.subplots(1, 3, figsize=(13, 4))
    series = (("madds", "multiply-adds", lambda r: r.madds),
              ("peak_bytes", "peak bytes (forward)", lambda r: r.peak_bytes),
              ("latency", "median latency (ms)", lambda r: r.latency_ms))
    colors = {"selective": "tab:blue", "attention": "tab:red"}
    for ax, (key, title, get) in zip(axes, series):
        for model in ("selective", "attention"):
            ok = [r for r in records if r.model == model and r.status == "ok"]
            if not ok:
                continue
            xs = [r.tokens for r in ok]
            ys = [get(r) for r in ok]
            slope = ex.get(model, {}).get(key, float("nan"))
            ax.loglog(xs, ys, "o-", color=colors[model],
                      label=f"{model} (slope {slope:.2f})")
        ax.set_xlabel("tokens")
        ax.set_title(title)
        ax.grid(True, which="both", alpha=0.3)
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_training_curves(history: list[dict], path: str, title: str = "training") -> None:
    """Loss (and accuracy, when present) against epoch."""
    epochs = [h["epoch"] for h in history]
    losses = [h["loss"] for h in history]
    has_acc = history and "train_acc" in history[0]
    fig, axes = plt.subplots(1, 2 if has_acc else 1, figsize=(9 if has_acc else 5, 3.5))
    axes = np.atleast_1d(axes)
    axes[0].plot(epochs, losses, "o-")
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("loss")
    axes[0].grid(alpha=0.3)
    if has_acc:
        axes[1].plot(epochs, [100 * h["train_acc"] for h in history], "o-", color="tab:green")
        axes[1].set_xlabel("epoch")
        axes[1].set_ylabel("train accuracy (%)")
        axes[1].grid(alpha=0.3)
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_retrieval_panel(query_img: np.ndarray, result_imgs: list[np.ndarray],
                           result_ok: list[bool], path: str) -> None:
    """Query image beside its ranked results; green/red frames mark relevance."""
    n = len(result_imgs)
    fig, axes = plt.subplots(1, n + 1, figsize=(1.6 * (n + 1), 2.0))
    axes[0].imshow(query_img)
    axes[0].set_title("query", fontsize=8)
    for i, (img, ok) in enumerate(zip(result_imgs, result_ok)):
        axes[i + 1].imshow(img)
        axes[i + 1].set_title(f"#{i + 1}", fontsize=8)
        for s in axes[i + 1].spines.values():
            s.set_edgecolor("tab:green" if ok else "tab:red")
            s.set_linewidth(3)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_change_panel(img_a: np.ndarray, img_b: np.ndarray, truth: np.ndarray,
                        prob: np.ndarray, path: str) -> None:
    """Before/after pair with ground-truth mask and predicted probability."""
    fig, axes = plt.subplots(1, 4, figsize=(10, 2.6))
    for ax, (img, title) in zip(axes, ((img_a, "image a"), (img_b, "image b"),
                                       (truth, "truth"), (prob, "predicted"))):
        if img.ndim == 2:
            ax.imshow(img, cmap="viridis", vmin=0, vmax=1)
        else:
            ax.imshow(img)
        ax.set_title(title, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
