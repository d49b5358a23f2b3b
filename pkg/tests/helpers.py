"""Shared test utilities: finite-difference gradient checking."""

from __future__ import annotations

import numpy as np

from dynavis.tensor import Tape, Tensor


def numeric_grad(fn, t: Tensor, h: float = 1e-5, coords=None) -> np.ndarray:
    """Central-difference gradient of scalar fn() w.r.t. tensor t.

    Perturbs t.data in place and restores it.  ``coords`` optionally
    restricts the check to a subset of flat indices (for large tensors).
    """
    flat = t.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    num = np.zeros_like(flat)
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        lp = fn().item()
        flat[i] = orig - h
        lm = fn().item()
        flat[i] = orig
        num[i] = (lp - lm) / (2.0 * h)
    return num.reshape(t.data.shape)


def gradcheck(fn, tensors, h: float = 1e-5, rtol: float = 1e-4, atol: float = 1e-7,
              max_coords: int | None = None, rng: np.random.Generator | None = None):
    """Compare tape gradients of scalar fn() against central differences.

    All tensors should be float64.  The relative-error criterion is
    |a - n| <= atol + rtol * (|a| + |n|) elementwise.  Returns the worst
    relative error observed (for reporting).
    """
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        coords = None
        if max_coords is not None and t.data.size > max_coords:
            r = rng or np.random.default_rng(0)
            coords = r.choice(t.data.size, size=max_coords, replace=False)
        num = numeric_grad(fn, t, h=h, coords=coords)
        a = analytic.reshape(-1)
        n = num.reshape(-1)
        sel = np.arange(a.size) if coords is None else np.asarray(list(coords))
        gap = np.abs(a[sel] - n[sel])
        tol = atol + rtol * (np.abs(a[sel]) + np.abs(n[sel]))
        if not np.all(gap <= tol):
            bad = int(np.argmax(gap - tol))
            raise AssertionError(
                f"gradient mismatch: analytic={a[sel][bad]:.8g} numeric={n[sel][bad]:.8g} "
                f"(|diff|={gap[bad]:.3g}, tol={tol[bad]:.3g})")
        denom = np.abs(a[sel]) + np.abs(n[sel]) + 1e-12
        worst = max(worst, float((gap / denom).max()) if gap.size else 0.0)
    return worst
