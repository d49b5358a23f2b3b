"""Region-contrastive pretraining.

Each annotated box is pooled from all five pyramid levels into one region
embedding, and a learned per-category "meta" embedding acts as its text
side.  Training pulls matched (region, category) pairs together against
the other categories present in the batch using a multiple-instance
noise-contrastive ratio, plus a scene-classification term on the image
embedding.
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
from .nn import AdamW, Conv2d, Linear, Module, cosine_lr, global_avg_pool
from .rng import SeedStream
from .tensor import Tensor

FPN_STRIDES = (4, 8, 16, 32, 64)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Rows to unit length; the small floor keeps zero vectors finite."""
    sq = T.reduce_sum(T.mul(x, x), axis=axis, keepdims=True)
    return T.div(x, T.sqrt(T.add(sq, 1e-12)))


class MetaEmbeddings(Module):
    """One trainable unit-norm vector per category."""

    def __init__(self, num_categories: int, dim: int, rng: np.random.Generator,
                 dtype=np.float32):
        v = rng.normal(size=(num_categories, dim))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        self.table = Tensor(v.astype(dtype), requires_grad=True)
        self.num_categories = num_categories

    def __call__(self, cats: np.ndarray) -> Tensor:
        return T.take_axis(self.table, np.asarray(cats, dtype=np.int64), axis=0)


def _bilinear_flat_gather(tokens: Tensor, w: int, ys: np.ndarray, xs: np.ndarray,
                          h: int, base: np.ndarray) -> Tensor:
    """Sample (len(ys),) points from row-major tokens (1, B*h*w, C).

    ``base`` holds each sample's image offset (image_index * h * w); the
    four-corner weights are constants, so gradients flow to the features
    only.
    """
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0).astype(tokens.data.dtype)
    fx = (xs - x0).astype(tokens.data.dtype)
    idx = np.concatenate([base + y0 * w + x0, base + y0 * w + x1,
                          base + y1 * w + x0, base + y1 * w + x1])
    wts = np.concatenate([(1 - fy) * (1 - fx), (1 - fy) * fx,
                          fy * (1 - fx), fy * fx])
    picked = T.gather_rows(tokens, idx[None, :])            # (1, 4K, C)
    weighted = T.mul(picked, Tensor(wts[None, :, None]))
    k = len(ys)
    corners = T.reshape(weighted, (4, k, weighted.data.shape[-1]))
    return T.reduce_sum(corners, axis=0)                    # (K, C)


def roi_extract(pyramid: list[Tensor], boxes: np.ndarray, image_idx: np.ndarray,
                grid: int = 7) -> Tensor:
    """Pool each box from every pyramid level and sum the grids.

    pyramid: five (B, C, H_l, W_l) maps at strides 4..64.
    boxes: (R, 4) as (x0, y0, x1, y1) in input pixels; image_idx: (R,).
    Returns (R, C, grid, grid).  Sampling takes one bilinear tap at each
    bin center, with the half-pixel convention (feature cell (i, j) sits
    at input pixel ((i + 0.5) * stride)).  Degenerate boxes are widened
    to one pixel.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    image_idx = np.asarray(image_idx, dtype=np.int64)
    r = boxes.shape[0]
    if r == 0:
        raise ValueError("need at least one box")
    x0, y0, x1, y1 = boxes.T
    bw = np.maximum(x1 - x0, 1.0)
    bh = np.maximum(y1 - y0, 1.0)
    steps = (np.arange(grid) + 0.5) / grid
    cx = x0[:, None] + steps[None, :] * bw[:, None]          # (R, grid)
    cy = y0[:, None] + steps[None, :] * bh[:, None]
    gx = np.broadcast_to(cx[:, None, :], (r, grid, grid)).reshape(-1)
    gy = np.broadcast_to(cy[:, :, None], (r, grid, grid)).reshape(-1)
    total = None
    for level, stride in zip(pyramid, FPN_STRIDES):
        b, c, h, w = level.data.shape
        tokens = T.reshape(level, (b, c, h * w))
        tokens = T.reshape(T.transpose(tokens, (0, 2, 1)), (1, b * h * w, c))
        base = np.repeat(image_idx, grid * grid) * (h * w)
        sampled = _bilinear_flat_gather(tokens, w, gy / stride - 0.5,
                                        gx / stride - 0.5, h, base)
        total = sampled if total is None else T.add(total, sampled)
    total = T.reshape(total, (r, grid, grid, -1))
    return T.transpose(total, (0, 3, 1, 2))


class RegionEncoder(Module):
    """(R, C, 7, 7) pooled grids -> (R, d_embed) region embeddings."""

    def __init__(self, fpn_dim: int, d_embed: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.conv = Conv2d(fpn_dim, fpn_dim, 3, rng, dtype=dtype)
        self.proj = Linear(fpn_dim, d_embed, rng, dtype=dtype)

    def __call__(self, grids: Tensor) -> Tensor:
        h = T.silu(self.conv(grids))
        return self.proj(global_avg_pool(h))


def mil_nce(regions: Tensor, metas: Tensor, labels: np.ndarray,
            present: np.ndarray, tau: float = 0.07,
            per_region: bool = False) -> Tensor:
    """Contrastive ratio between matched and mismatched (region, category) pairs.

    regions: (R, d) embeddings; metas: (M, d) embeddings of the ``present``
    categories (present[m] is the category id of metas row m); labels: (R,)
    category per region.  Batch mode scores all matched pairs jointly:

        -log( sum_P exp(s/tau) / (sum_P exp(s/tau) + sum_N exp(s/tau)) )

    with P the matched pairs and N every (region, other present category)
    pair.  ``per_region`` switches to a per-row softmax averaged over
    regions.
    """
    if regions.data.shape[0] == 0 or metas.data.shape[0] == 0:
        raise ValueError("empty batch: need at least one region and one category")
    v = l2_normalize(regions)
    t = l2_normalize(metas)
    sims = T.matmul(v, T.transpose(t))                      # (R, M)
    scaled = T.div(sims, tau)
    pos = (np.asarray(labels)[:, None] == np.asarray(present)[None, :])
    if not pos.any():
        raise ValueError("no matched (region, category) pair in batch")
    if per_region:
        if not pos.any(axis=1).all():
            raise ValueError("some region's category is missing from metas")
        logp = T.log(T.softmax(scaled, axis=-1))
        picked = T.reduce_sum(T.mul(logp, Tensor(pos.astype(scaled.data.dtype))),
                              axis=-1)
        return T.neg(T.reduce_mean(picked))
    e = T.exp(scaled)
    mask = Tensor(pos.astype(scaled.data.dtype))
    num = T.reduce_sum(T.mul(e, mask))
    den = T.reduce_sum(e)
    return T.neg(T.log(T.div(num, den)))


class PretrainModel(Module):
    """Backbone + region encoder + meta table + region-category head.

    The auxiliary cross-entropy classifies each region embedding into its
    category through a linear head, alongside the contrastive term.
    """

    def __init__(self, cfg: BackboneConfig, num_categories: int,
                 rng: np.random.Generator):
        self.backbone = Backbone(cfg, rng)
        self.regions = RegionEncoder(cfg.fpn_dim, cfg.d_embed, rng)
        self.metas = MetaEmbeddings(num_categories, cfg.d_embed, rng)
        self.cls_head = Linear(cfg.d_embed, num_categories, rng)
        self.cfg = cfg

    def __call__(self, x, boxes, image_idx, progress=None, noise=None):
        feats, h0, w0 = self.backbone.trunk_features(x, progress, noise)
        pyr = self.backbone.pyramid(feats)
        grids = roi_extract(pyr, boxes, image_idx)
        region_emb = self.regions(grids)
        logits = self.cls_head(region_emb)
        return region_emb, logits


def pretrain(model: PretrainModel, images: np.ndarray,
             boxes_per_image: list[np.ndarray], cats_per_image: list[np.ndarray],
             *, epochs: int, batch_size: int, seed_stream: SeedStream,
             lr: float = 4e-4, tau: float = 0.07, ce_weight: float = 1.0,
             per_region: bool = False, out_dir: str | None = None,
             log=print) -> dict:
    """Joint MIL-NCE + region-category cross-entropy loop.

    images: (N, H, W, 3) in [0, 1]; boxes/cats per image index the
    annotations.  Returns the per-epoch history.
    """
    params = dict(model.named_parameters())
    opt = AdamW(params, lr=lr)
    n = images.shape[0]
    steps_per_epoch = math.ceil(n / batch_size)
    total_steps = epochs * steps_per_epoch
    csv_path = os.path.join(out_dir, "pretrain_metrics.csv") if out_dir else None
    header = ["epoch", "loss", "mil_nce", "cross_entropy", "lr", "seconds"]
    history = []
    step = 0
    for epoch in range(epochs):
        t0 = time.monotonic()
        order_rng = seed_stream.child("order", epoch).generator()
        progress = epoch / max(1, epochs)
        sums = np.zeros(3)
        count = 0
        for bi, idx in enumerate(epoch_batches(n, batch_size, order_rng)):
            x = to_model_input(images[idx])
            boxes = np.concatenate([boxes_per_image[i] for i in idx], axis=0)
            cats = np.concatenate([cats_per_image[i] for i in idx], axis=0)
            image_of = np.concatenate([np.full(len(boxes_per_image[i]), j)
                                       for j, i in enumerate(idx)]).astype(np.int64)
            present = np.unique(cats)
            noise = seed_stream.child("noise", epoch, bi)
            opt.lr = cosine_lr(step, total_steps, lr)
            opt.zero_grad()
            with T.Tape() as tape:
                region_emb, logits = model(x, boxes, image_of, progress, noise)
                mil = mil_nce(region_emb, model.metas(present), cats, present,
                              tau=tau, per_region=per_region)
                ce = T.cross_entropy(logits, cats)
                loss = T.add(mil, T.mul(ce, ce_weight))
                if not np.isfinite(loss.data):
                    log(f"non-finite loss at epoch {epoch} step {bi}; stopping")
                    return {"history": history, "aborted": True}
                tape.backward(loss)
            opt.step()
            sums += [loss.item(), mil.item(), ce.item()]
            count += 1
            step += 1
        dt = time.monotonic() - t0
        row = [epoch, *(sums / count), opt.lr, dt]
        history.append(dict(zip(header, row)))
        if csv_path:
            append_csv_row(csv_path, header, [epoch, f"{sums[0]/count:.6f}",
                                              f"{sums[1]/count:.6f}",
                                              f"{sums[2]/count:.6f}",
                                              f"{opt.lr:.6e}", f"{dt:.2f}"])
        log(f"pretrain epoch {epoch}: loss {sums[0]/count:.4f} "
            f"(mil {sums[1]/count:.4f}, ce {sums[2]/count:.4f}) [{dt:.1f}s]")
        if out_dir:
            save_checkpoint(os.path.join(out_dir, "pretrain_last.ckpt"),
                            model, opt, epoch + 1)
    if out_dir:
        save_checkpoint(os.path.join(out_dir, "pretrain_final.ckpt"),
                        model, opt, epochs)
    return {"history": history, "aborted": False}
