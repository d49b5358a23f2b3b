"""Task heads and training loops built on the shared backbone.

Three consumers of the pyramid: scene classification (pooled finest
level), change detection (per-level feature differences of a shared-
weight pass over both images), and image retrieval (a projection of the
last trunk stage, optionally sign-hashed to compact binary codes).
"""

from __future__ import annotations

import math
import os
import time

import numpy as np

from . import tensor as T
from .backbone import Backbone, BackboneConfig
from .data import epoch_batches, to_model_input
from .io import append_csv_row, save_checkpoint
from .nn import AdamW, Conv2d, Linear, Module, cosine_lr, global_avg_pool, resize_bilinear
from .rng import SeedStream
from .tensor import Tensor


class Classifier(Module):
    """Scene classifier: pooled finest pyramid level -> class logits."""

    def __init__(self, cfg: BackboneConfig, num_classes: int, rng: np.random.Generator):
        self.backbone = Backbone(cfg, rng)
        self.head = Linear(cfg.fpn_dim, num_classes, rng)
        self.cfg = cfg
        self.num_classes = num_classes

    def __call__(self, x, progress=None, noise=None) -> Tensor:
        feats, _, _ = self.backbone.trunk_features(x, progress, noise)
        pyr = self.backbone.pyramid(feats)
        return self.head(global_avg_pool(pyr[0]))


class ChangeDetector(Module):
    """Pixel change map from per-level absolute feature differences.

    Both images run through the same backbone.  Each level's |F_a - F_b|
    is upsampled to the finest level's resolution, the stack is fused by
    two pointwise convolutions, and the single-channel logit map is
    resized back to the input and cropped to the original extent.
    """

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator,
                 signed: bool = False):
        self.backbone = Backbone(cfg, rng)
        d = cfg.fpn_dim
        self.fuse = Conv2d(5 * d, d, 1, rng)
        self.out = Conv2d(d, 1, 1, rng)
        self.cfg = cfg
        self.signed = signed  # keep the sign of F_a - F_b instead of |.|

    def __call__(self, xa, xb, progress=None, noise=None) -> Tensor:
        if np.shape(xa) != np.shape(xb):
            raise ValueError(f"image shapes differ: {np.shape(xa)} vs {np.shape(xb)}")
        fa, h0, w0 = self.backbone.trunk_features(xa, progress, noise)
        fb, _, _ = self.backbone.trunk_features(xb, progress, noise)
        pa = self.backbone.pyramid(fa)
        pb = self.backbone.pyramid(fb)
        top_h, top_w = pa[0].data.shape[2:]
        diffs = []
        for a, b in zip(pa, pb):
            d = T.sub(a, b) if self.signed else T.absolute(T.sub(a, b))
            if d.data.shape[2:] != (top_h, top_w):
                d = resize_bilinear(d, top_h, top_w)
            diffs.append(d)
        fused = T.silu(self.fuse(T.concat(diffs, axis=1)))
        logits = self.out(fused)                      # (B, 1, H/4, W/4)
        pad_h, pad_w = top_h * 4, top_w * 4
        logits = resize_bilinear(logits, pad_h, pad_w)
        return T.slice_axis(T.slice_axis(logits, 2, 0, h0), 3, 0, w0)


class Embedder(Module):
    """Whole-image embedding: mean of the last trunk stage, projected."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.backbone = Backbone(cfg, rng)
        self.proj = Linear(cfg.dims[-1], cfg.d_embed, rng)
        self.cfg = cfg

    def __call__(self, x, progress=None, noise=None) -> Tensor:
        feats, _, _ = self.backbone.trunk_features(x, progress, noise)
        return self.proj(global_avg_pool(feats[-1]))


def dice_loss(logits: Tensor, target: np.ndarray, smooth: float = 1.0) -> Tensor:
    """1 - Dice overlap between sigmoid(logits) and a {0,1} mask, batch mean."""
    b = logits.data.shape[0]
    p = T.reshape(T.sigmoid(logits), (b, -1))
    y = Tensor(np.asarray(target, dtype=logits.data.dtype).reshape(b, -1))
    inter = T.reduce_sum(T.mul(p, y), axis=1)
    denom = T.add(T.reduce_sum(p, axis=1), T.reduce_sum(y, axis=1))
    dice = T.div(T.add(T.mul(inter, 2.0), smooth), T.add(denom, smooth))
    return T.sub(1.0, T.reduce_mean(dice))


def change_loss(logits: Tensor, masks: np.ndarray, dice_weight: float = 1.0) -> Tensor:
    y = np.asarray(masks, dtype=logits.data.dtype).reshape(logits.data.shape)
    bce = T.bce_with_logits(logits, y)
    return T.add(bce, T.mul(dice_loss(logits, y), dice_weight))


def f1_iou(pred: np.ndarray, target: np.ndarray) -> tuple[float, float]:
    """Foreground F1 and IoU of boolean maps, pooled over the whole set."""
    pred = np.asarray(pred, dtype=bool).ravel()
    target = np.asarray(target, dtype=bool).ravel()
    tp = float(np.sum(pred & target))
    fp = float(np.sum(pred & ~target))
    fn = float(np.sum(~pred & target))
    f1 = 2 * tp / max(2 * tp + fp + fn, 1e-12)
    iou = tp / max(tp + fp + fn, 1e-12)
    return f1, iou


# ---------------------------------------------------------------------------
# retrieval


def trivial_hash(embeddings: np.ndarray, bits: int) -> np.ndarray:
    """Sign-binarize embeddings, average-pooling dimensions down to ``bits``.

    With bits == d the pooling is skipped and codes are sign(e) > 0
    exactly; fewer bits average equal spans of dimensions first.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    d = e.shape[-1]
    if bits < 1:
        raise ValueError(f"bits must be positive, got {bits}")
    if bits > d:
        raise ValueError(f"bits ({bits}) exceeds embedding width ({d})")
    if bits != d:
        bounds = (np.arange(bits + 1) * d) // bits
        e = np.stack([e[..., bounds[i]:bounds[i + 1]].mean(axis=-1)
                      for i in range(bits)], axis=-1)
    return e > 0


def hamming_distances(query: np.ndarray, codes: np.ndarray) -> np.ndarray:
    return (np.asarray(query, dtype=bool)[None, :] ^ np.asarray(codes, dtype=bool)).sum(axis=1)


def cosine_scores(query: np.ndarray, embs: np.ndarray) -> np.ndarray:
    q = query / max(np.linalg.norm(query), 1e-12)
    e = embs / np.maximum(np.linalg.norm(embs, axis=1, keepdims=True), 1e-12)
    return e @ q


def retrieve(query, index, k: int, mode: str = "hamming") -> np.ndarray:
    """Top-k index positions; Hamming ascending or cosine descending.

    Stable sort keeps insertion order among ties.
    """
    if len(index) == 0:
        raise ValueError("empty index")
    if mode == "hamming":
        order = np.argsort(hamming_distances(query, index), kind="stable")
    elif mode == "cosine":
        order = np.argsort(-cosine_scores(query, index), kind="stable")
    else:
        raise ValueError(f"unknown retrieval mode {mode!r}")
    return order[:k]


def average_precision_at_k(relevant: np.ndarray, k: int, total_relevant: int) -> float:
    """AP@k over a ranked relevance mask (True = relevant at that rank)."""
    rel = np.asarray(relevant, dtype=bool)[:k]
    if total_relevant <= 0:
        return 0.0
    hits = np.cumsum(rel)
    ranks = np.arange(1, len(rel) + 1)
    precisions = hits[rel] / ranks[rel]
    return float(precisions.sum() / min(total_relevant, k))


def mean_average_precision(query_embs, query_labels, index_embs, index_labels,
                           k: int, mode: str = "hamming") -> float:
    total = 0.0
    labels = np.asarray(index_labels)
    for q, y in zip(query_embs, np.asarray(query_labels)):
        top = retrieve(q, index_embs, k, mode=mode)
        rel = labels[top] == y
        total += average_precision_at_k(rel, k, int((labels == y).sum()))
    return total / max(len(query_labels), 1)


# ---------------------------------------------------------------------------
# training loops


def _finite_or_abort(loss: Tensor, where: str, log) -> bool:
    if np.isfinite(loss.data):
        return True
    log(f"non-finite loss at {where}; keeping last saved checkpoint")
    return False


def train_classifier(model: Classifier, images: np.ndarray, labels: np.ndarray,
                     *, epochs: int, batch_size: int, seed_stream: SeedStream,
                     lr: float = 2e-4, out_dir: str | None = None,
                     eval_data=None, eval_every: int = 0, log=print) -> dict:
    """Cross-entropy loop; returns history plus last train accuracy."""
    params = dict(model.named_parameters())
    opt = AdamW(params, lr=lr)
    n = images.shape[0]
    total_steps = epochs * math.ceil(n / batch_size)
    header = ["epoch", "loss", "train_acc", "lr", "seconds"]
    csv_path = os.path.join(out_dir, "train_metrics.csv") if out_dir else None
    history, evals, step = [], [], 0
    best_acc = -1.0
    for epoch in range(epochs):
        t0 = time.monotonic()
        order_rng = seed_stream.child("order", epoch).generator()
        progress = epoch / max(1, epochs)
        tot_loss, tot_hit = 0.0, 0
        for bi, idx in enumerate(epoch_batches(n, batch_size, order_rng)):
            x = to_model_input(images[idx])
            y = labels[idx]
            noise = seed_stream.child("noise", epoch, bi)
            opt.lr = cosine_lr(step, total_steps, lr)
            opt.zero_grad()
            with T.Tape() as tape:
                logits = model(x, progress, noise)
                loss = T.cross_entropy(logits, y)
                if not _finite_or_abort(loss, f"epoch {epoch} step {bi}", log):
                    return {"history": history, "evals": evals, "aborted": True}
                tape.backward(loss)
            opt.step()
            tot_loss += loss.item() * len(idx)
            tot_hit += int((logits.data.argmax(1) == y).sum())
            step += 1
        dt = time.monotonic() - t0
        acc = tot_hit / n
        history.append({"epoch": epoch, "loss": tot_loss / n, "train_acc": acc,
                        "lr": opt.lr, "seconds": dt})
        if csv_path:
            append_csv_row(csv_path, header, [epoch, f"{tot_loss/n:.6f}",
                                              f"{100*acc:.2f}", f"{opt.lr:.6e}",
                                              f"{dt:.2f}"])
        log(f"epoch {epoch}: loss {tot_loss/n:.4f} train acc {100*acc:.2f}% [{dt:.1f}s]")
        if eval_every and eval_data is not None and (epoch + 1) % eval_every == 0:
            ev = evaluate_classifier(model, *eval_data, batch_size=batch_size)
            evals.append({"epoch": epoch, "eval_acc": ev})
            log(f"  eval acc {100*ev:.2f}%")
        if out_dir:
            save_checkpoint(os.path.join(out_dir, "cls_last.ckpt"), model, opt, epoch + 1)
            if acc > best_acc:
                best_acc = acc
                save_checkpoint(os.path.join(out_dir, "cls_best.ckpt"), model, opt, epoch + 1)
    if out_dir:
        save_checkpoint(os.path.join(out_dir, "cls_final.ckpt"), model, opt, epochs)
    return {"history": history, "evals": evals, "aborted": False}


def evaluate_classifier(model: Classifier, images: np.ndarray, labels: np.ndarray,
                        batch_size: int = 64) -> float:
    hit = 0
    with T.no_tape():
        for idx in epoch_batches(images.shape[0], batch_size):
            logits = model(to_model_input(images[idx]))
            hit += int((logits.data.argmax(1) == labels[idx]).sum())
    return hit / images.shape[0]


def train_change_detector(model: ChangeDetector, imgs_a: np.ndarray,
                          imgs_b: np.ndarray, masks: np.ndarray, *,
                          epochs: int, batch_size: int, seed_stream: SeedStream,
                          lr: float = 2e-4, out_dir: str | None = None,
                          log=print) -> dict:
    params = dict(model.named_parameters())
    opt = AdamW(params, lr=lr)
    n = imgs_a.shape[0]
    total_steps = epochs * math.ceil(n / batch_size)
    header = ["epoch", "loss", "lr", "seconds"]
    csv_path = os.path.join(out_dir, "cd_metrics.csv") if out_dir else None
    history, step = [], 0
    for epoch in range(epochs):
        t0 = time.monotonic()
        order_rng = seed_stream.child("order", epoch).generator()
        progress = epoch / max(1, epochs)
        tot = 0.0
        for bi, idx in enumerate(epoch_batches(n, batch_size, order_rng)):
            xa = to_model_input(imgs_a[idx])
            xb = to_model_input(imgs_b[idx])
            m = masks[idx][:, None]  # (B, 1, H, W)
            noise = seed_stream.child("noise", epoch, bi)
            opt.lr = cosine_lr(step, total_steps, lr)
            opt.zero_grad()
            with T.Tape() as tape:
                logits = model(xa, xb, progress, noise)
                loss = change_loss(logits, m)
                if not _finite_or_abort(loss, f"epoch {epoch} step {bi}", log):
                    return {"history": history, "aborted": True}
                tape.backward(loss)
            opt.step()
            tot += loss.item() * len(idx)
            step += 1
        dt = time.monotonic() - t0
        history.append({"epoch": epoch, "loss": tot / n, "lr": opt.lr, "seconds": dt})
        if csv_path:
            append_csv_row(csv_path, header,
                           [epoch, f"{tot/n:.6f}", f"{opt.lr:.6e}", f"{dt:.2f}"])
        log(f"epoch {epoch}: loss {tot/n:.4f} [{dt:.1f}s]")
        if out_dir:
            save_checkpoint(os.path.join(out_dir, "cd_last.ckpt"), model, opt, epoch + 1)
    if out_dir:
        save_checkpoint(os.path.join(out_dir, "cd_final.ckpt"), model, opt, epochs)
    return {"history": history, "aborted": False}


def evaluate_change_detector(model: ChangeDetector, imgs_a, imgs_b, masks,
                             batch_size: int = 32, threshold: float = 0.5):
    """Pooled F1 and IoU over the set at the given probability threshold."""
    preds = []
    with T.no_tape():
        for idx in epoch_batches(imgs_a.shape[0], batch_size):
            logits = model(to_model_input(imgs_a[idx]), to_model_input(imgs_b[idx]))
            preds.append(1.0 / (1.0 + np.exp(-logits.data[:, 0])) >= threshold)
    return f1_iou(np.concatenate(preds), masks)


def embed_images(model: Embedder, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = []
    with T.no_tape():
        for idx in epoch_batches(images.shape[0], batch_size):
            out.append(model(to_model_input(images[idx])).data.copy())
    return np.concatenate(out, axis=0)
