"""Differentiable primitives.

All operations accept an optional leading batch dimension where it makes
sense.  Broadcasting follows numpy's trailing-dimension rules.  Convolution
is cross-correlation: the kernel is applied as stored, without flipping.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import NonFiniteError, ShapeMismatchError, Tensor, as_tensor, make_result

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


class AxisOutOfRangeError(IndexError):
    pass


def _check_finite(name: str, arr: np.ndarray) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{name} produced non-finite values")
    return arr


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise AxisOutOfRangeError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        ref = b.dtype if isinstance(b, Tensor) else None
        a = Tensor(np.asarray(a, dtype=ref))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


def broadcast_shape(sa: tuple, sb: tuple) -> tuple:
    try:
        return tuple(np.broadcast_shapes(sa, sb))
    except ValueError:
        raise ShapeMismatchError(f"cannot broadcast shapes {tuple(sa)} and {tuple(sb)}") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def elementwise(kind: str, a, b) -> Tensor:
    """Binary elementwise op, ``kind`` in {add, sub, mul, div}."""
    a, b = _coerce(a, b)
    broadcast_shape(a.shape, b.shape)
    x, y = a.data, b.data
    sa, sb = a.shape, b.shape
    if kind == "add":
        out = x + y

        def bw(g):
            return unbroadcast(g, sa), unbroadcast(g, sb)
    elif kind == "sub":
        out = x - y

        def bw(g):
            return unbroadcast(g, sa), unbroadcast(-g, sb)
    elif kind == "mul":
        out = x * y

        def bw(g):
            return unbroadcast(g * y, sa), unbroadcast(g * x, sb)
    elif kind == "div":
        out = _check_finite("div", x / y)

        def bw(g):
            return unbroadcast(g / y, sa), unbroadcast(-g * x / (y * y), sb)
    else:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return make_result(out, (a, b), bw)


def add(a, b) -> Tensor:
    return elementwise("add", a, b)


def sub(a, b) -> Tensor:
    return elementwise("sub", a, b)


def mul(a, b) -> Tensor:
    return elementwise("mul", a, b)


def div(a, b) -> Tensor:
    return elementwise("div", a, b)


def power(a: Tensor, exponent: float) -> Tensor:
    x = a.data
    out = _check_finite("power", x ** exponent)
    return make_result(out, (a,), lambda g: (g * exponent * x ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = _check_finite("exp", np.exp(a.data))
    return make_result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = _check_finite("log", np.log(x))
    return make_result(out, (a,), lambda g: (g / x,))


def sqrt(a: Tensor) -> Tensor:
    out = _check_finite("sqrt", np.sqrt(a.data))
    return make_result(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_result(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(a: Tensor, kind: str) -> Tensor:
    """Pointwise nonlinearity; ``kind`` in {relu, gelu, sigmoid}.

    ``gelu`` is the tanh approximation.
    """
    x = a.data
    if kind == "relu":
        mask = x > 0
        return make_result(x * mask, (a,), lambda g: (g * mask,))
    if kind == "sigmoid":
        s = _sigmoid(x)
        return make_result(s, (a,), lambda g: (g * s * (1.0 - s),))
    if kind == "gelu":
        x2 = x * x
        t = x2 * 0.044715
        t += 1.0
        t *= x
        t *= _GELU_C
        np.tanh(t, out=t)
        out = t + 1.0
        out *= x
        out *= 0.5

        def bw(g):
            # 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3 a x^2)
            d = x2 * (3 * 0.044715)
            d += 1.0
            d *= x
            d *= 0.5 * _GELU_C
            d *= 1.0 - t * t
            d += 0.5
            d += 0.5 * t
            d *= g
            return (d,)

        return make_result(out, (a,), bw)
    raise ValueError(f"unknown activation {kind!r}")


def relu(a: Tensor) -> Tensor:
    return activation(a, "relu")


def gelu(a: Tensor) -> Tensor:
    return activation(a, "gelu")


def sigmoid(a: Tensor) -> Tensor:
    return activation(a, "sigmoid")


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), stable for large |x|."""
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return make_result(out, (a,), lambda g: (g * _sigmoid(x),))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with broadcast leading (batch) dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    broadcast_shape(a.shape[:-2], b.shape[:-2])
    x, y = a.data, b.data
    out = x @ y

    def bw(g):
        ga = unbroadcast(g @ np.swapaxes(y, -1, -2), x.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(x, -1, -2) @ g, y.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), bw)


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def reduce(a: Tensor, kind: str, axis=None, keepdims: bool = False) -> Tensor:
    """``kind`` in {sum, mean}; ``axis`` may be None, an int or a tuple."""
    x = a.data
    if axis is None:
        axes = tuple(range(x.ndim))
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(sorted(_norm_axis(ax, x.ndim) for ax in axes))
    if kind == "sum":
        out = x.sum(axis=axes, keepdims=keepdims)
        scale = 1.0
    elif kind == "mean":
        out = x.mean(axis=axes, keepdims=keepdims)
        scale = 1.0 / max(1, int(np.prod([x.shape[ax] for ax in axes])))
    else:
        raise ValueError(f"unknown reduction {kind!r}")
    shape = x.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g * scale, shape),)

    return make_result(np.asarray(out, dtype=x.dtype), (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatchError(f"cannot reshape {src} to {shape}") from None
    return make_result(out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(_norm_axis(ax, a.ndim) for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise AxisOutOfRangeError(f"invalid permutation {axes} for {a.ndim}-d tensor")
    inv = tuple(np.argsort(axes))
    return make_result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    perm = list(range(a.ndim))
    i, j = _norm_axis(ax1, a.ndim), _norm_axis(ax2, a.ndim)
    perm[i], perm[j] = perm[j], perm[i]
    return transpose(a, perm)


def _is_advanced(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (list, np.ndarray, Tensor)) for p in parts)


def getitem(a: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)
    out = a.data[index]
    shape, dtype = a.shape, a.dtype
    advanced = _is_advanced(index)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return make_result(np.array(out, copy=True), (a,), bw)


def take(a: Tensor, indices, axis: int) -> Tensor:
    """Gather ``indices`` along ``axis`` (repeats allowed; grads summed)."""
    axis = _norm_axis(axis, a.ndim)
    idx = np.asarray(indices, dtype=np.int64)
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        sel = [slice(None)] * len(shape)
        sel[axis] = idx
        np.add.at(full, tuple(sel), g)
        return (full,)

    return make_result(np.take(a.data, idx, axis=axis), (a,), bw)


def pad_edge(a: Tensor, width: int) -> Tensor:
    """Replicate-pad the last two axes by ``width`` pixels."""
    if width == 0:
        return a
    p = width
    h, w = a.shape[-2], a.shape[-1]
    lead = [(0, 0)] * (a.ndim - 2)
    out = np.pad(a.data, lead + [(p, p), (p, p)], mode="edge")

    def bw(g):
        gc = g[..., p:p + w].copy()
        gc[..., 0] += g[..., :p].sum(axis=-1)
        gc[..., -1] += g[..., p + w:].sum(axis=-1)
        gr = gc[..., p:p + h, :].copy()
        gr[..., 0, :] += gc[..., :p, :].sum(axis=-2)
        gr[..., -1, :] += gc[..., p + h:, :].sum(axis=-2)
        return (gr,)

    return make_result(out, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = _norm_axis(axis, tensors[0].ndim)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeMismatchError(f"cannot concatenate shapes {shapes} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(out, tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = []
    for t in tensors:
        t = as_tensor(t)
        ax = axis if axis >= 0 else t.ndim + 1 + axis
        parts.append(reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]))
    return concat(parts, axis=axis)


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (a,), bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (a,), bw)


def layer_norm(a: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis, then apply optional affine gain/bias."""
    x = a.data
    n = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat
    if gain is not None:
        if gain.shape != (n,):
            raise ShapeMismatchError(f"layer_norm gain {gain.shape} does not match features {n}")
        out = out * gain.data
    if bias is not None:
        if bias.shape != (n,):
            raise ShapeMismatchError(f"layer_norm bias {bias.shape} does not match features {n}")
        out = out + bias.data
    inputs = [a] + [t for t in (gain, bias) if t is not None]

    def bw(g):
        dxhat = g * gain.data if gain is not None else g
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        res = [dx]
        lead = tuple(range(x.ndim - 1))
        if gain is not None:
            res.append((g * xhat).sum(axis=lead))
        if bias is not None:
            res.append(g.sum(axis=lead))
        return tuple(res)

    return make_result(out, inputs, bw)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv_output_extent(n: int, k: int, stride: int, pad: int) -> int:
    span = n + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeMismatchError(
            f"non-integral conv output extent: ({n} + 2*{pad} - {k}) / {stride} + 1"
        )
    return span // stride + 1


def conv2d(x: Tensor, k: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation.

    x: [c_in, h, w] or [batch, c_in, h, w]; k: [c_out, c_in, kh, kw] with odd
    kh, kw.  Output extent is (h + 2*pad - kh) / stride + 1.
    """
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or k.ndim != 4:
        raise ShapeMismatchError(f"conv2d expects [b,c,h,w] and [o,c,kh,kw], got {x.shape} and {k.shape}")
    b, c, h, w = xd.shape
    o, ck, kh, kw = k.shape
    if ck != c:
        raise ShapeMismatchError(f"conv2d channel mismatch: input {c}, kernel {ck}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeMismatchError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    if pad < 0 or stride < 1:
        raise ValueError("conv2d needs pad >= 0 and stride >= 1")
    ho = conv_output_extent(h, kh, stride, pad)
    wo = conv_output_extent(w, kw, stride, pad)
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b, ho * wo, c * kh * kw)
    kmat = k.data.reshape(o, c * kh * kw)
    out = (cols @ kmat.T).transpose(0, 2, 1).reshape(b, o, ho, wo)
    if squeeze:
        out = out[0]

    def bw(g):
        g = g[None] if squeeze else g
        g2 = g.reshape(b, o, ho * wo)
        gk = None
        if k.requires_grad:
            gk = (g2.transpose(1, 0, 2).reshape(o, b * ho * wo)
                  @ cols.reshape(b * ho * wo, c * kh * kw)).reshape(k.shape)
        gx = None
        if x.requires_grad:
            dcols = (kmat.T @ g2).reshape(b, c, kh, kw, ho, wo)
            dxp = np.zeros(xp.shape, dtype=xd.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
            gx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
            if squeeze:
                gx = gx[0]
        return gx, gk

    return make_result(np.ascontiguousarray(out), (x, k), bw)


def upsample_transposed_conv(x: Tensor, k: Tensor, stride: int) -> Tensor:
    """Transposed convolution whose kernel extent equals its stride.

    x: [batch, c_in, h, w]; k: [c_in, c_out, stride, stride].  Each input
    pixel paints a disjoint stride x stride block, so the output is
    [batch, c_out, h*stride, w*stride].  Built from differentiable
    primitives.
    """
    if x.ndim != 4 or k.ndim != 4:
        raise ShapeMismatchError(f"expected [b,c,h,w] and [c_in,c_out,s,s], got {x.shape} and {k.shape}")
    b, c, h, w = x.shape
    ci, co, sh, sw = k.shape
    if ci != c:
        raise ShapeMismatchError(f"transposed conv channel mismatch: input {c}, kernel {ci}")
    if sh != stride or sw != stride:
        raise ShapeMismatchError(f"kernel extent {sh}x{sw} must equal stride {stride}")
    xt = reshape(transpose(x, (0, 2, 3, 1)), (b * h * w, c))
    y = matmul(xt, reshape(k, (c, co * stride * stride)))
    y = reshape(y, (b, h, w, co, stride, stride))
    y = transpose(y, (0, 3, 1, 4, 2, 5))
    return reshape(y, (b, co, h * stride, w * stride))
