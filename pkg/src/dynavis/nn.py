"""Layers, parameter management, the optimizer and schedule helpers.

Modules are thin containers: any attribute that is a grad-requiring
Tensor is a parameter, any attribute that is a Module (or list of
Modules) is a child.  Names follow attribute paths ("stage0.norm.gamma"),
and since construction order is deterministic, so is parameter order --
checkpoints and optimizer state rely on that.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}

        def visit(path, value):
            if isinstance(value, Tensor) and value.requires_grad:
                out[path] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(path))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    visit(f"{path}.{i}", item)

        for name, value in vars(self).items():
            visit(f"{prefix}.{name}" if prefix else name, value)
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.data.shape}")
            p.data = T.track_array(arr.copy())
            p.grad = None

    def num_params(self) -> int:
        return sum(p.data.size for p in self.parameters())


class Linear(Module):
    """Affine layer, weight stored (in, out).

    Uniform(-1/sqrt(in), 1/sqrt(in)) init for weight and bias; ``w_scale``
    shrinks the weight after init (used by scoring heads that should start
    near-uniform), ``zero_bias`` pins the bias at zero.
    """

    def __init__(self, din: int, dout: int, rng: np.random.Generator, bias: bool = True,
                 dtype=np.float32, w_scale: float = 1.0, zero_bias: bool = False):
        bound = 1.0 / math.sqrt(din)
        w = rng.uniform(-bound, bound, size=(din, dout)) * w_scale
        self.w = Tensor(w.astype(dtype), requires_grad=True)
        if bias:
            b = np.zeros(dout) if zero_bias else rng.uniform(-bound, bound, size=dout)
            self.b = Tensor(b.astype(dtype), requires_grad=True)
        else:
            self.b = None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.gamma, self.beta, self.eps)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 stride: int = 1, pad: int | None = None, bias: bool = True, dtype=np.float32):
        bound = 1.0 / math.sqrt(cin * k * k)
        w = rng.uniform(-bound, bound, size=(cout, cin, k, k))
        self.w = Tensor(w.astype(dtype), requires_grad=True)
        self.b = Tensor(rng.uniform(-bound, bound, size=cout).astype(dtype), requires_grad=True) if bias else None
        self.stride = stride
        self.pad = k // 2 if pad is None else pad

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


# ---------------------------------------------------------------------------
# optimizer and schedule


class AdamW:
    """Adam with decoupled weight decay.

    Decay is skipped for rank<=1 parameters (biases, norm scales), the
    usual convention.  ``state_dict``/``load_state_dict`` round-trip the
    moments and step counter so resumed runs continue bit-identically.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 2e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.05):
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if self.weight_decay and p.data.ndim > 1:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        state = {"t": self.t}
        for k in self.params:
            state[f"m.{k}"] = self.m[k]
            state[f"v.{k}"] = self.v[k]
        return state

    def load_state_dict(self, state: dict):
        self.t = int(state["t"])
        for k in self.params:
            self.m[k] = np.asarray(state[f"m.{k}"], dtype=self.m[k].dtype).copy()
            self.v[k] = np.asarray(state[f"v.{k}"], dtype=self.v[k].dtype).copy()


def cosine_lr(step: int, total_steps: int, base_lr: float,
              warmup_frac: float = 0.05, min_lr: float = 0.0) -> float:
    """Linear warmup for the first ``warmup_frac`` of steps, cosine decay after."""
    warm = max(1, int(round(total_steps * warmup_frac)))
    if step < warm:
        return base_lr * (step + 1) / warm
    span = max(1, total_steps - warm)
    frac = min(1.0, (step - warm) / span)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * frac))


# ---------------------------------------------------------------------------
# resampling helpers


def bilinear_matrix(src: int, dst: int, dtype=np.float32) -> np.ndarray:
    """Row-stochastic (dst, src) interpolation matrix, half-pixel-centre convention."""
    w = np.zeros((dst, src), dtype=np.float64)
    for i in range(dst):
        pos = (i + 0.5) * src / dst - 0.5
        lo = math.floor(pos)
        t = pos - lo
        j0 = min(max(lo, 0), src - 1)
        j1 = min(max(lo + 1, 0), src - 1)
        w[i, j0] += 1.0 - t
        w[i, j1] += t
    return w.astype(dtype)


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of (B, C, H, W), differentiable through two matmuls."""
    B, C, H, W = x.shape
    if (H, W) == (out_h, out_w):
        return x
    flat = T.reshape(x, (B * C, H, W))
    wh = Tensor(bilinear_matrix(H, out_h, x.dtype))
    ww = Tensor(bilinear_matrix(W, out_w, x.dtype).T)
    out = T.matmul(T.matmul(wh, flat), ww)
    return T.reshape(out, (B, C, out_h, out_w))


def _reflect_index(size: int, target: int) -> np.ndarray:
    idx = np.arange(target)
    over = idx >= size
    idx[over] = 2 * size - 2 - idx[over]
    return idx


def pad_to_multiple(x: Tensor, multiple: int = 32) -> tuple[Tensor, int, int]:
    """Reflection-pad (B, C, H, W) on the bottom/right up to a size multiple.

    Returns the padded tensor and the original (H, W) so dense outputs can
    be cropped back.  Requires the pad to be smaller than the input, true
    for any image of at least ``multiple`` pixels per side.
    """
    B, C, H, W = x.shape
    hp = -H % multiple
    wp = -W % multiple
    out = x
    if hp:
        out = T.take_axis(out, _reflect_index(H, H + hp), axis=2)
    if wp:
        out = T.take_axis(out, _reflect_index(W, W + wp), axis=3)
    return out, H, W


def global_avg_pool(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C)."""
    return T.reduce_mean(x, axis=(2, 3))
