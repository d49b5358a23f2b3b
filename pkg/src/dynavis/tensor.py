"""Define-by-run autodiff on numpy arrays, with compute and memory meters.

The engine is a plain Wengert list: ops execute eagerly on ``numpy``
arrays, and when a tape is active each op appends one node holding the
output tensor, the input tensors and a backward closure.  ``Tape.backward``
replays the nodes in exact reverse recording order, accumulating gradients
into ``Tensor.grad`` buffers.  Running without a tape (the default) is
inference mode: no graph is kept and intermediates free as soon as the
last reference drops.

Two global meters live in ``COUNTERS``:

``madds``
    Multiply-accumulate count, incremented by every op's forward pass.
    Matmul and convolution count exact MACs; elementwise ops count one
    per output element; reductions one per input element; fused ops
    document a small constant factor in their docstring.  Backward passes
    are not metered -- the counter is a model of *forward* compute.

``live_bytes`` / ``peak_bytes``
    Bytes held by arrays the engine owns: tensor payloads, gradient
    buffers, and buffers saved for backward.  Only arrays that own their
    memory (``arr.base is None``) are counted, and each buffer at most
    once; a ``weakref.finalize`` hook decrements the meter the moment the
    buffer is garbage collected, which under CPython refcounting is
    deterministic.  Transient temporaries inside an op's kernel are not
    seen by the meter, so treat it as tensor-level accounting, not an
    allocator trace.  ``COUNTERS.rebase_peak()`` resets the high-water
    mark to the current level so a single pass can be measured as a delta.
"""

from __future__ import annotations

import threading
import weakref

import numpy as np

from . import kernels


# ---------------------------------------------------------------------------
# meters


class _Counters:
    __slots__ = ("madds", "live_bytes", "peak_bytes")

    def __init__(self):
        self.madds = 0
        self.live_bytes = 0
        self.peak_bytes = 0

    def reset_madds(self):
        self.madds = 0

    def rebase_peak(self):
        self.peak_bytes = self.live_bytes


COUNTERS = _Counters()

_tracked: dict[int, object] = {}


def _untrack(key: int, nbytes: int):
    COUNTERS.live_bytes -= nbytes
    _tracked.pop(key, None)


def track_array(arr: np.ndarray) -> np.ndarray:
    """Register an owning array with the memory meter (idempotent)."""
    if arr.base is not None or not isinstance(arr, np.ndarray):
        return arr
    key = id(arr)
    if key in _tracked:
        return arr
    n = arr.nbytes
    COUNTERS.live_bytes += n
    if COUNTERS.live_bytes > COUNTERS.peak_bytes:
        COUNTERS.peak_bytes = COUNTERS.live_bytes
    fin = weakref.finalize(arr, _untrack, key, n)
    fin.atexit = False
    _tracked[key] = fin
    return arr


# ---------------------------------------------------------------------------
# tape


class Tape:
    """Records op applications; ``backward`` replays them in reverse.

    Use as a context manager around the forward pass::

        with Tape() as tape:
            loss = model(x)
        tape.backward(loss)

    A tape is single-use: backward clears the node list so saved buffers
    free as early as possible.
    """

    __slots__ = ("_nodes",)

    def __init__(self):
        self._nodes = []

    def __enter__(self):
        _STATE.stack.append(self)
        return self

    def __exit__(self, *exc):
        popped = _STATE.stack.pop()
        assert popped is self
        return False

    def backward(self, loss: "Tensor", grad: np.ndarray | None = None):
        if grad is None:
            if loss.data.size != 1:
                raise ValueError("backward() needs an explicit grad for non-scalar outputs")
            grad = np.ones_like(loss.data)
        loss.grad = track_array(np.asarray(grad, dtype=loss.data.dtype))
        for out, inputs, bw in reversed(self._nodes):
            g = out.grad
            if g is None:
                continue
            grads = bw(g)
            seen = set()
            for t, gt in zip(inputs, grads):
                if gt is None or not t.requires_grad:
                    continue
                if t.grad is None and id(gt) in seen:
                    gt = gt.copy()
                seen.add(id(gt))
                _accumulate(t, gt)
        self._nodes.clear()


class _State(threading.local):
    def __init__(self):
        self.stack = []


_STATE = _State()


def _active_tape() -> Tape | None:
    stack = _STATE.stack
    return stack[-1] if stack else None


class no_tape:
    """Context manager that suspends recording on the active tape."""

    def __enter__(self):
        _STATE.stack.append(None)
        return self

    def __exit__(self, *exc):
        _STATE.stack.pop()
        return False


def _accumulate(t: "Tensor", g: np.ndarray):
    if g.shape != t.data.shape:
        raise ValueError(f"gradient shape {g.shape} != tensor shape {t.data.shape}")
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    if t.grad is None:
        if g.base is not None or not g.flags.writeable:
            g = g.copy()
        t.grad = track_array(g)
    else:
        t.grad += g


def record(out: "Tensor", inputs: tuple, backward) -> None:
    """Append a node to the active tape if any input requires grad.

    ``backward`` receives the output gradient array and returns one
    gradient array (or None) per input, in order.  Exposed so other
    modules can define fused ops.
    """
    tape = _active_tape()
    if tape is None:
        return
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._nodes.append((out, inputs, backward))


# ---------------------------------------------------------------------------
# tensor


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        self.data = track_array(arr)
        self.grad = None
        self.requires_grad = requires_grad

    # -- introspection ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return self.data.item()

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def tensorize(x, like: Tensor | None = None) -> Tensor:
    """Wrap ``x`` as a constant Tensor, matching ``like``'s dtype for scalars."""
    if isinstance(x, Tensor):
        return x
    if like is not None and np.isscalar(x):
        return Tensor(np.asarray(x, dtype=like.data.dtype))
    return Tensor(np.asarray(x))


def _new(data: np.ndarray) -> Tensor:
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a = tensorize(a)
    b = tensorize(b, like=a)
    out = _new(a.data + b.data)
    COUNTERS.madds += out.data.size

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    record(out, (a, b), bw)
    return out


def sub(a, b) -> Tensor:
    a = tensorize(a)
    b = tensorize(b, like=a)
    out = _new(a.data - b.data)
    COUNTERS.madds += out.data.size

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    record(out, (a, b), bw)
    return out


def mul(a, b) -> Tensor:
    a = tensorize(a)
    b = tensorize(b, like=a)
    out = _new(a.data * b.data)
    COUNTERS.madds += out.data.size

    def bw(g):
        ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    record(out, (a, b), bw)
    return out


def div(a, b) -> Tensor:
    a = tensorize(a)
    b = tensorize(b, like=a)
    out_data = a.data / b.data
    out = _new(out_data)
    COUNTERS.madds += out.data.size

    def bw(g):
        ga = _unbroadcast(g / b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out_data / b.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    record(out, (a, b), bw)
    return out


def neg(a: Tensor) -> Tensor:
    out = _new(-a.data)
    COUNTERS.madds += out.data.size
    record(out, (a,), lambda g: (-g,))
    return out


# ---------------------------------------------------------------------------
# unary / activations


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = _new(y)
    COUNTERS.madds += y.size
    record(out, (a,), lambda g: (g * y,))
    return out


def log(a: Tensor) -> Tensor:
    out = _new(np.log(a.data))
    COUNTERS.madds += out.data.size
    record(out, (a,), lambda g: (g / a.data,))
    return out


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    out = _new(y)
    COUNTERS.madds += y.size
    record(out, (a,), lambda g: (g / (2.0 * y),))
    return out


def absolute(a: Tensor) -> Tensor:
    out = _new(np.abs(a.data))
    COUNTERS.madds += out.data.size
    record(out, (a,), lambda g: (g * np.sign(a.data),))
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp overflow for very negative x saturates to inf and the reciprocal
    # collapses to exactly 0, which is the right limit -- so just mute it.
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    out = _new(y)
    COUNTERS.madds += 2 * y.size
    record(out, (a,), lambda g: (g * y * (1.0 - y),))
    return out


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = _new(a.data * s)
    COUNTERS.madds += 3 * s.size

    def bw(g):
        ga = np.empty_like(s)
        kernels.silu_bwd(np.ascontiguousarray(g).reshape(-1),
                         np.ascontiguousarray(a.data).reshape(-1),
                         s.reshape(-1), ga.reshape(-1))
        return (ga,)

    record(out, (a,), bw)
    return out


def softplus(a: Tensor) -> Tensor:
    x = a.data
    t = np.exp(-np.abs(x))
    track_array(t)
    out = _new(np.maximum(x, 0.0) + np.log1p(t))
    COUNTERS.madds += 2 * out.data.size

    def bw(g):
        # sigmoid(x) rebuilt from the saved exp(-|x|), no fresh transcendental
        ga = np.empty_like(t)
        kernels.softplus_bwd(np.ascontiguousarray(g).reshape(-1),
                             np.ascontiguousarray(x).reshape(-1),
                             t.reshape(-1), ga.reshape(-1))
        return (ga,)

    record(out, (a,), bw)
    return out


def expm1_over_x(a: Tensor) -> Tensor:
    """Elementwise (exp(x) - 1) / x with the removable singularity filled in.

    For |x| < 1e-6 the value and derivative come from the Taylor series
    (1 + x/2 + x^2/6 and 1/2 + x/3), so x == 0 is exact and the gradient
    stays finite.
    """
    x = a.data
    small = np.abs(x) < 1e-6
    safe = np.where(small, 1.0, x)
    y = np.where(small, 1.0 + x * (0.5 + x / 6.0), np.expm1(safe) / safe)
    out = _new(y)
    COUNTERS.madds += 3 * y.size

    def bw(g):
        d = np.where(small, 0.5 + x / 3.0, (np.exp(safe) * (safe - 1.0) + 1.0) / (safe * safe))
        return (g * d,)

    record(out, (a,), bw)
    return out


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    out = _new(a.data.reshape(shape))
    record(out, (a,), lambda g: (g.reshape(old),))
    return out


def flip_axis(a: Tensor, axis: int) -> Tensor:
    """Reverse a tensor along one axis (its own adjoint)."""
    out = _new(np.ascontiguousarray(np.flip(a.data, axis)))
    record(out, (a,), lambda g: (np.ascontiguousarray(np.flip(g, axis)),))
    return out


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is not None and len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = axes[0]
    if not axes:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = _new(a.data.transpose(axes))
    record(out, (a,), lambda g: (g.transpose(inv),))
    return out


def concat(tensors, axis: int) -> Tensor:
    tensors = [tensorize(t) for t in tensors]
    out = _new(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        g = np.moveaxis(g, axis, 0)
        parts = []
        for i in range(len(sizes)):
            parts.append(np.moveaxis(g[offsets[i]:offsets[i + 1]], 0, axis))
        return tuple(parts)

    record(out, tuple(tensors), bw)
    return out


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = tuple(slice(None) if i != axis else slice(start, stop) for i in range(a.data.ndim))
    out = _new(a.data[idx])

    def bw(g):
        gx = np.zeros_like(a.data)
        gx[idx] = g
        return (gx,)

    record(out, (a,), bw)
    return out


def take_axis(a: Tensor, idx: np.ndarray, axis: int) -> Tensor:
    """Gather along ``axis`` with a shared integer index array.

    Covers sequence reversal, reflection padding and embedding lookup;
    repeated indices are fine (backward scatter-adds).
    """
    idx = np.asarray(idx)
    out = _new(np.take(a.data, idx, axis=axis))

    def bw(g):
        gx = np.zeros_like(a.data)
        np.add.at(np.moveaxis(gx, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (gx,)

    record(out, (a,), bw)
    return out


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Per-batch row gather: (B, L, D) x (B, K) -> (B, K, D)."""
    idx = np.asarray(idx)
    barange = np.arange(a.data.shape[0])[:, None]
    out = _new(a.data[barange, idx])

    def bw(g):
        gx = np.zeros_like(a.data)
        np.add.at(gx, (barange, idx), g)
        return (gx,)

    record(out, (a, ), bw)
    return out


def scatter_rows(a: Tensor, idx: np.ndarray, rows: Tensor) -> Tensor:
    """Copy of ``a`` with rows at per-batch indices replaced by ``rows``.

    (B, L, D) with idx (B, K) and rows (B, K, D); indices must be unique
    within each batch row for the gradient to be exact.
    """
    idx = np.asarray(idx)
    barange = np.arange(a.data.shape[0])[:, None]
    data = a.data.copy()
    data[barange, idx] = rows.data
    out = _new(data)

    def bw(g):
        grows = g[barange, idx]
        ga = g.copy()
        ga[barange, idx] = 0.0
        return ga, grows

    record(out, (a, rows), bw)
    return out


# ---------------------------------------------------------------------------
# reductions


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _new(a.data.sum(axis=axis, keepdims=keepdims))
    COUNTERS.madds += a.data.size

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape),)
        if not keepdims:
            ax = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.data.shape),)

    record(out, (a,), bw)
    return out


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _new(a.data.mean(axis=axis, keepdims=keepdims))
    COUNTERS.madds += a.data.size
    count = a.data.size // max(out.data.size, 1)

    def bw(g):
        if axis is None:
            gg = g
        elif not keepdims:
            ax = axis if isinstance(axis, tuple) else (axis,)
            gg = np.expand_dims(g, ax)
        else:
            gg = g
        return (np.broadcast_to(gg / count, a.data.shape),)

    record(out, (a,), bw)
    return out


# ---------------------------------------------------------------------------
# fused dense ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = tensorize(a), tensorize(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must have ndim >= 2")
    y = np.matmul(a.data, b.data)
    out = _new(y)
    COUNTERS.madds += y.size * a.data.shape[-1]

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)
        return ga, gb

    record(out, (a, b), bw)
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Fused affine map: x @ w + b, with w laid out (in, out)."""
    y = np.matmul(x.data, w.data)
    if b is not None:
        y += b.data
    out = _new(y)
    COUNTERS.madds += y.size * w.data.shape[0]

    def bw(g):
        gx = np.matmul(g, w.data.T) if x.requires_grad else None
        gw = None
        if w.requires_grad:
            g2 = g.reshape(-1, g.shape[-1])
            x2 = x.data.reshape(-1, x.data.shape[-1])
            gw = x2.T @ g2
        gb = None
        if b is not None and b.requires_grad:
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return (gx, gw, gb) if b is not None else (gx, gw)

    record(out, (x, w, b) if b is not None else (x, w), bw)
    return out


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis (fused; counts ~6 madds/elem)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data
    out = _new(y)
    track_array(xhat)
    COUNTERS.madds += 6 * x.data.size

    def bw(g):
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (dxhat - m1 - xhat * m2) if x.requires_grad else None
        axes = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        return gx, ggamma, gbeta

    record(out, (x, gamma, beta), bw)
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically shifted softmax (fused; counts ~4 madds/elem)."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _new(y)
    COUNTERS.madds += 4 * y.size

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    record(out, (x,), bw)
    return out


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits``.

    logits (B, C), labels (B,) int.  Fused log-softmax for stability.
    """
    labels = np.asarray(labels)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    n = logits.data.shape[0]
    picked = logp[np.arange(n), labels]
    out = _new(np.asarray(-picked.mean(), dtype=logits.data.dtype))
    COUNTERS.madds += 4 * logits.data.size

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    record(out, (logits,), bw)
    return out


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy on raw logits (stable log1p form)."""
    t = np.asarray(targets, dtype=logits.data.dtype)
    z = logits.data
    loss = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = _new(np.asarray(loss.mean(), dtype=z.dtype))
    COUNTERS.madds += 4 * z.size
    n = z.size

    def bw(g):
        return ((_sigmoid(z) - t) * (g / n),)

    record(out, (logits,), bw)
    return out


# ---------------------------------------------------------------------------
# convolutions and pooling


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, pad: int = 0) -> Tensor:
    """2D cross-correlation via im2col + GEMM.

    x (B, C, H, W), w (Co, C, kh, kw), symmetric zero padding ``pad``;
    output spatial size is floor((H + 2*pad - kh)/stride) + 1.  The patch
    matrix is saved for backward and is the op's main memory cost.
    """
    B, C, H, W = x.data.shape
    Co, Ci, kh, kw = w.data.shape
    assert Ci == C
    s = stride
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    Ho = (xp.shape[2] - kh) // s + 1
    Wo = (xp.shape[3] - kw) // s + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::s, ::s]  # (B, C, Ho, Wo, kh, kw)
    col = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B, Ho * Wo, C * kh * kw)
    track_array(col)
    wmat = w.data.reshape(Co, -1)
    y = col @ wmat.T
    if b is not None:
        y += b.data
    out = _new(np.ascontiguousarray(y.transpose(0, 2, 1)).reshape(B, Co, Ho, Wo))
    COUNTERS.madds += B * Ho * Wo * C * kh * kw * Co

    def bw(g):
        gmat = g.reshape(B, Co, Ho * Wo).transpose(0, 2, 1)  # (B, P, Co)
        gw = None
        if w.requires_grad:
            gw = (gmat.reshape(-1, Co).T @ col.reshape(-1, C * kh * kw)).reshape(w.data.shape)
        gx = None
        if x.requires_grad:
            gcol = np.matmul(gmat, wmat)  # (B, P, C*kh*kw)
            gxp = np.zeros_like(xp)
            kernels.col2im(gcol.reshape(B, Ho * Wo, C, kh, kw), gxp, Wo, s)
            gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
        gb = None
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3)).reshape(b.data.shape)
        return (gx, gw, gb) if b is not None else (gx, gw)

    record(out, (x, w, b) if b is not None else (x, w), bw)
    return out


def causal_conv1d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Depthwise causal 1D convolution: x (B, L, D), w (D, W).

    The sequence is left-padded with W-1 zeros so position l sees inputs
    l-W+1 .. l only.
    """
    B, L, D = x.data.shape
    Dw, W = w.data.shape
    assert Dw == D
    xp = np.zeros((B, L + W - 1, D), dtype=x.data.dtype)
    xp[:, W - 1:, :] = x.data
    track_array(xp)
    wt = np.ascontiguousarray(w.data.T)
    bias = b.data if b is not None else np.zeros(D, dtype=x.data.dtype)
    y = np.empty((B, L, D), dtype=x.data.dtype)
    kernels.dwconv_fwd(xp, wt, bias, y)
    out = _new(y)
    COUNTERS.madds += B * L * D * W

    def bw(g):
        gp = np.zeros((B, L + 2 * (W - 1), D), dtype=g.dtype)
        gp[:, W - 1:W - 1 + L, :] = g
        gx = None
        if x.requires_grad or w.requires_grad:
            gxp = np.empty_like(xp)
            gwt = np.zeros_like(wt)
            kernels.dwconv_bwd(gp, xp, wt, gxp, gwt)
            gx = gxp[:, W - 1:, :].copy() if x.requires_grad else None
            gw = np.ascontiguousarray(gwt.T) if w.requires_grad else None
        else:
            gw = None
        gb = None
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 1))
        return (gx, gw, gb) if b is not None else (gx, gw)

    record(out, (x, w, b) if b is not None else (x, w), bw)
    return out


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped."""
    B, C, H, W = x.data.shape
    Hh, Wh = H // 2, W // 2
    xc = x.data[:, :, :2 * Hh, :2 * Wh]
    m = xc.reshape(B, C, Hh, 2, Wh, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Hh, Wh, 4)
    idx = m.argmax(axis=-1)
    out = _new(np.take_along_axis(m, idx[..., None], axis=-1)[..., 0])
    COUNTERS.madds += xc.size

    def bw(g):
        gm = np.zeros((B, C, Hh, Wh, 4), dtype=g.dtype)
        np.put_along_axis(gm, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(x.data)
        gx[:, :, :2 * Hh, :2 * Wh] = (
            gm.reshape(B, C, Hh, Wh, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, 2 * Hh, 2 * Wh)
        )
        return (gx,)

    record(out, (x,), bw)
    return out


def upsample2x_nearest(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling of (B, C, H, W)."""
    out = _new(x.data.repeat(2, axis=2).repeat(2, axis=3))
    B, C, H, W = x.data.shape

    def bw(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    record(out, (x,), bw)
    return out


def adaptive_avg_pool1d(x: Tensor, t: int) -> Tensor:
    """Bucket-mean pooling of (B, L, D) down to (B, t, D).

    Bucket j covers rows [floor(j*L/t), floor((j+1)*L/t)); with t <= L
    every bucket is non-empty.
    """
    B, L, D = x.data.shape
    if not 1 <= t <= L:
        raise ValueError(f"pool size {t} out of range for length {L}")
    bounds = (np.arange(t + 1) * L) // t
    starts = bounds[:-1]
    counts = (bounds[1:] - bounds[:-1]).astype(x.data.dtype)
    sums = np.add.reduceat(x.data, starts, axis=1)
    out = _new(sums / counts[:, None])
    COUNTERS.madds += x.data.size

    def bw(g):
        return (np.repeat(g / counts[:, None], bounds[1:] - bounds[:-1], axis=1),)

    record(out, (x,), bw)
    return out
