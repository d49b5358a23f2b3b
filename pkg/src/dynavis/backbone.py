"""Vision backbone: dynamic token selection over a state-space mixer.

Each stage downsamples with a strided conv, flattens the map row-major
into tokens, and runs a stack of token mixers.  A mixer scores every
token, keeps the top (1-r)·L under a bit of training-time exploration
noise, runs the kept tokens (plus a pooled global summary) through the
state-space block, and writes the result back softly:

    out_j = s_j + w_j * s_j              for unselected positions
    out_j = s_j + w_j * mixed_j          for selected positions

with w the (noise-free) selection weights.  Unselected tokens therefore
cost no mixer compute at all, which is where the subquadratic scaling
comes from, and the residual form keeps every position differentiable.

A small FPN sits on top for dense and region-level heads: 1x1 laterals,
nearest-neighbour top-down fusion, 3x3 smoothing, and an extra stride-64
level from max pooling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .nn import Conv2d, LayerNorm, Linear, Module, pad_to_multiple, resize_bilinear
from .rng import SeedStream, gumbel
from .ssm import MambaBlock
from .tensor import Tensor


@dataclass
class BackboneConfig:
    dims: tuple = (96, 192, 384, 768)
    depths: tuple = (2, 4, 16, 4)
    ratios: tuple = (7 / 8, 3 / 4, 1 / 2, 0.0)
    patch: tuple = (7, 3, 3, 3)
    stride: tuple = (4, 2, 2, 2)
    n_state: int = 16
    expand: int = 2
    conv_width: int = 4
    fpn_dim: int = 256
    d_embed: int = 256
    img_size: int = 64
    in_chans: int = 3
    noise_v: float = 0.1
    noise_mode: str = "decay"         # decay | fixed | none
    global_pos: str = "head"          # none | head | mid | tail
    weighting: str = "softmax"        # softmax | sigmoid
    scan_paths: str = "bidirectional"  # forward | bidirectional

    def dense(self) -> "BackboneConfig":
        """Same architecture with selection disabled (every token kept)."""
        return replace(self, ratios=(0.0,) * len(self.ratios))


VARIANTS = {
    "tiny": dict(dims=(16, 32, 64, 128), depths=(1, 1, 2, 1), n_state=4,
                 fpn_dim=16, d_embed=64),
    "base": dict(dims=(96, 192, 384, 768), depths=(2, 4, 16, 4)),
    "large": dict(dims=(128, 256, 512, 1024), depths=(2, 4, 32, 4)),
}


def make_config(variant: str = "base", **overrides) -> BackboneConfig:
    if variant not in VARIANTS:
        raise KeyError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    kw = dict(VARIANTS[variant])
    kw.update(overrides)
    return BackboneConfig(**kw)


def keep_count(length: int, ratio: float) -> int:
    """Tokens kept at prune ratio r: max(1, round-half-up((1-r)*L))."""
    return max(1, int(math.floor((1.0 - ratio) * length + 0.5)))


class DynamicTokenMixer(Module):
    """Score, select, mix, reintegrate (one token-mixing layer).

    Selection order comes from noise-perturbed weights during training
    (Gumbel noise, scale given by the caller); output weighting always
    uses the clean weights so evaluation is deterministic.  The layer
    stashes its last selection (weights and indices, as plain arrays)
    for diagnostics.
    """

    def __init__(self, dim: int, ratio: float, rng: np.random.Generator,
                 cfg: BackboneConfig, dtype=np.float32):
        self.ratio = ratio
        self.global_pos = cfg.global_pos
        self.weighting = cfg.weighting
        self.score = Linear(dim, 1, rng, dtype=dtype, w_scale=0.02, zero_bias=True)
        self.mixer = MambaBlock(dim, rng, n_state=cfg.n_state, expand=cfg.expand,
                                conv_width=cfg.conv_width,
                                bidirectional=(cfg.scan_paths == "bidirectional"),
                                dtype=dtype)
        self.last_selection: dict | None = None

    def _weights(self, p: Tensor) -> Tensor:
        return T.softmax(p, axis=-1) if self.weighting == "softmax" else T.sigmoid(p)

    def _noisy_weights(self, p: np.ndarray) -> np.ndarray:
        if self.weighting == "softmax":
            z = p - p.max(axis=-1, keepdims=True)
            e = np.exp(z)
            return e / e.sum(axis=-1, keepdims=True)
        return 1.0 / (1.0 + np.exp(-p))

    def __call__(self, s: Tensor, noise_rng: np.random.Generator | None = None,
                 noise_scale: float = 0.0) -> Tensor:
        B, L, D = s.shape
        k = keep_count(L, self.ratio)

        p = T.reshape(self.score(s), (B, L))

        if k == L:
            # Nothing is dropped: the ordering, gather, and scatter all
            # collapse to the identity, and selection noise cannot change
            # an all-selected outcome, so skip that machinery entirely.
            # The output weighting below is exactly the general formula
            # specialised to "every row selected".
            self.last_selection = {"weights": self._noisy_weights(p.data),
                                   "indices": np.broadcast_to(np.arange(L), (B, L))}
            seq, t_g = self._assemble(s, s, k)
            mixed = self.mixer(seq)
            x_r2 = self._extract(mixed, k, t_g)
            w3 = T.reshape(self._weights(p), (B, L, 1))
            return T.add(s, T.mul(w3, x_r2))

        p_sel = p.data
        if noise_rng is not None and noise_scale > 0.0:
            p_sel = p_sel + gumbel(noise_rng, (B, L), noise_scale).astype(p.dtype)
        w_noisy = self._noisy_weights(p_sel)
        # stable argsort on negated weights: ties resolve to the lower index
        order = np.argsort(-w_noisy, axis=-1, kind="stable")
        omega = np.sort(order[:, :k], axis=-1)
        self.last_selection = {"weights": w_noisy, "indices": omega}

        x_r = T.gather_rows(s, omega)
        seq, t_g = self._assemble(s, x_r, k)
        mixed = self.mixer(seq)
        x_r2 = self._extract(mixed, k, t_g)

        w = self._weights(p)
        w3 = T.reshape(w, (B, L, 1))
        base = T.mul(w3, s)
        rows = T.mul(T.gather_rows(w3, omega), x_r2)
        s_prime = T.scatter_rows(base, omega, rows)
        return T.add(s, s_prime)

    def _assemble(self, s: Tensor, x_r: Tensor, k: int) -> tuple[Tensor, int]:
        if self.global_pos == "none":
            return x_r, 0
        L = s.shape[1]
        t_g = max(1, math.isqrt(L))
        x_g = T.adaptive_avg_pool1d(s, t_g)
        if self.global_pos == "head":
            return T.concat([x_g, x_r], axis=1), t_g
        if self.global_pos == "tail":
            return T.concat([x_r, x_g], axis=1), t_g
        half = k // 2
        return T.concat([T.slice_axis(x_r, 1, 0, half), x_g,
                         T.slice_axis(x_r, 1, half, k)], axis=1), t_g

    def _extract(self, mixed: Tensor, k: int, t_g: int) -> Tensor:
        if self.global_pos == "none":
            return mixed
        if self.global_pos == "head":
            return T.slice_axis(mixed, 1, t_g, t_g + k)
        if self.global_pos == "tail":
            return T.slice_axis(mixed, 1, 0, k)
        half = k // 2
        return T.concat([T.slice_axis(mixed, 1, 0, half),
                         T.slice_axis(mixed, 1, half + t_g, k + t_g)], axis=1)


class PatchMerge(Module):
    """Strided conv downsampling followed by token layer norm."""

    def __init__(self, cin: int, cout: int, k: int, stride: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.conv = Conv2d(cin, cout, k, rng, stride=stride, pad=k // 2, dtype=dtype)
        self.norm = LayerNorm(cout, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        y = self.conv(x)
        B, C, H, W = y.shape
        tok = T.reshape(T.transpose(y, (0, 2, 3, 1)), (B, H * W, C))
        tok = self.norm(tok)
        return T.transpose(T.reshape(tok, (B, H, W, C)), (0, 3, 1, 2))


def tokens_from_map(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, H*W, C), rows scanned top-to-bottom, left-to-right."""
    B, C, H, W = x.shape
    return T.reshape(T.transpose(x, (0, 2, 3, 1)), (B, H * W, C))


def map_from_tokens(tok: Tensor, h: int, w: int) -> Tensor:
    B, L, C = tok.shape
    return T.transpose(T.reshape(tok, (B, h, w, C)), (0, 3, 1, 2))


class Backbone(Module):
    """Four-stage pyramid of patch merging + dynamic token mixing.

    ``trunk_features`` returns the per-stage maps (strides 4/8/16/32);
    ``pyramid`` fuses them into five uniform-width FPN maps (strides
    4/8/16/32/64).  Inputs of any size >= img-size work: they are
    reflection-padded up to a multiple of 32 and the original size is
    reported back so dense heads can crop.
    """

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        dims = cfg.dims
        chans = (cfg.in_chans,) + tuple(dims[:-1])
        self.merges = [PatchMerge(chans[i], dims[i], cfg.patch[i], cfg.stride[i], rng, dtype)
                       for i in range(4)]
        self.stages = [[DynamicTokenMixer(dims[i], cfg.ratios[i], rng, cfg, dtype)
                        for _ in range(cfg.depths[i])] for i in range(4)]
        self.stage_norms = [LayerNorm(dims[i], dtype=dtype) for i in range(4)]
        side = cfg.img_size // 4
        self.pos_embed = Tensor((rng.normal(size=(1, dims[0], side, side)) * 0.02).astype(dtype),
                                requires_grad=True)
        self.laterals = [Conv2d(dims[i], cfg.fpn_dim, 1, rng, stride=1, pad=0, dtype=dtype)
                         for i in range(4)]
        self.smooths = [Conv2d(cfg.fpn_dim, cfg.fpn_dim, 3, rng, stride=1, pad=1, dtype=dtype)
                        for i in range(4)]

    def _noise_scale(self, progress: float | None) -> float:
        if progress is None:
            return 0.0
        mode = self.cfg.noise_mode
        if mode == "none":
            return 0.0
        if mode == "fixed":
            return self.cfg.noise_v
        return self.cfg.noise_v * (1.0 - min(max(progress, 0.0), 1.0))

    def trunk_features(self, x, progress: float | None = None,
                       noise: SeedStream | None = None) -> tuple[list[Tensor], int, int]:
        """Run the four stages; returns ([C1..C4], orig_h, orig_w)."""
        x, h0, w0 = pad_to_multiple(T.tensorize(x), 32)
        scale = self._noise_scale(progress)
        feats = []
        for i in range(4):
            x = self.merges[i](x)
            B, C, H, W = x.shape
            if i == 0:
                pe = self.pos_embed
                if pe.shape[2:] != (H, W):
                    pe = resize_bilinear(pe, H, W)
                x = T.add(x, pe)
            tok = tokens_from_map(x)
            for j, mixer in enumerate(self.stages[i]):
                rng = noise.child("sel", i, j).generator() if (noise is not None and scale > 0) else None
                tok = mixer(tok, noise_rng=rng, noise_scale=scale)
            tok = self.stage_norms[i](tok)
            x = map_from_tokens(tok, H, W)
            feats.append(x)
        return feats, h0, w0

    def pyramid(self, feats: list[Tensor]) -> list[Tensor]:
        """[C1..C4] -> [F1..F5] at a common width, strides 4..64."""
        p = self.laterals[3](feats[3])
        outs = [None, None, None, self.smooths[3](p)]
        for i in (2, 1, 0):
            p = T.add(self.laterals[i](feats[i]), T.upsample2x_nearest(p))
            outs[i] = self.smooths[i](p)
        outs.append(T.maxpool2x2(outs[3]))
        return outs

    def selection_stats(self) -> list[dict]:
        """Last selection of every mixer, stage-major order."""
        return [m.last_selection for stage in self.stages for m in stage if m.last_selection]
