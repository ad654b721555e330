"""Central finite-difference gradient checking (64-bit)."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward


DEFAULT_EPS = 1e-5
FLOOR_FRACTION = 1e-3
ABS_FLOOR = 1e-5


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, eps: float = DEFAULT_EPS,
                   index: Optional[np.ndarray] = None) -> np.ndarray:
    """d fn() / d t by central differences, perturbing ``t.data`` in place.

    With ``index`` (flat positions) only those entries are estimated; the
    rest stay zero.
    """
    grad = np.zeros_like(t.data, dtype=np.float64)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in (range(flat.size) if index is None else index):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(fn().data.sum())
        flat[i] = orig - eps
        lo = float(fn().data.sum())
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float | None = None) -> float:
    """Element-wise max of |a - n| / max(|a|, |n|, floor).

    The default floor is ``FLOOR_FRACTION`` of the largest gradient magnitude
    in the tensor (at least ``ABS_FLOOR``), so entries that are zero up to
    round-off do not dominate.  Key-projection biases, for instance, have an
    exactly zero gradient through softmax.
    """
    if floor is None:
        scale = max(float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)))
        floor = max(FLOOR_FRACTION * scale, ABS_FLOOR)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = DEFAULT_EPS,
              max_entries: Optional[int] = None, seed: int = 0) -> float:
    """Return the worst relative error between tape and finite-difference grads.

    ``fn`` must build a scalar from ``params``; all params should be float64.
    The error floor is taken from the largest gradient over *all* params, so
    a tensor whose gradient is identically zero is judged against the scale
    of the loss rather than against its own round-off.  ``max_entries``
    limits each tensor to a fixed random subset of entries (for big models).
    """
    for p in params:
        if p.data.dtype != np.float64:
            raise TypeError("gradcheck needs float64 tensors")
        p.grad = None
    with Tape() as tape:
        out = fn()
    tape.backward(out)
    rng = np.random.default_rng(seed)
    pairs = []
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        index = None
        if max_entries is not None and p.data.size > max_entries:
            index = np.sort(rng.choice(p.data.size, size=max_entries, replace=False))
        numeric = numerical_grad(fn, p, eps, index)
        if index is not None:
            analytic, numeric = analytic.reshape(-1)[index], numeric.reshape(-1)[index]
        pairs.append((analytic, numeric))
    scale = max((max(float(np.abs(a).max(initial=0.0)), float(np.abs(n).max(initial=0.0))) for a, n in pairs),
                default=0.0)
    floor = max(FLOOR_FRACTION * scale, ABS_FLOOR)
    return max((max_rel_error(a, n, floor) for a, n in pairs), default=0.0)
