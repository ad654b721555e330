"""Tensor type and the gradient tape.

Every differentiable operation records a node on the tape that is active for
the current thread.  ``backward`` replays the nodes of that tape in exact
reverse recording order.  A node is owned by its output tensor; the tape only
keeps weak references, so graphs nobody can reach any more are freed (this
matters for the ambient per-thread tape, which is never reset).  Gradients of leaf tensors accumulate across repeated
``backward`` calls until :meth:`Tensor.zero_grad` (or :func:`zero_grads`) is
called.
"""

from __future__ import annotations

import contextlib
import threading
import weakref
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class ShapeMismatchError(ValueError):
    """Raised when operand shapes cannot be combined."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or infinity."""


class GradientError(RuntimeError):
    """Raised for invalid ``backward`` requests."""


_local = threading.local()


def _state():
    if not hasattr(_local, "dtype"):
        _local.dtype = np.dtype(np.float32)
        _local.grad_enabled = True
        _local.tape_stack = [Tape()]
    return _local


def default_dtype() -> np.dtype:
    return _state().dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors.

    ``precision("float64")`` is the gradient-check mode.
    """
    st = _state()
    prev = st.dtype
    st.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        st.dtype = prev


@contextlib.contextmanager
def no_grad():
    st = _state()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


def grad_enabled() -> bool:
    return _state().grad_enabled


class _Node:
    __slots__ = ("inputs", "output_id", "backward", "__weakref__")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        # the output owns this node, so its id stays valid while the node lives
        self.output_id = id(output)
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager to make it the active tape of the current thread::

        with Tape() as tape:
            loss = model(x)
        tape.backward(loss)
    """

    COMPACT_MIN = 4096

    def __init__(self):
        self.nodes: list[weakref.ref] = []
        self._compact_at = self.COMPACT_MIN

    def __enter__(self) -> "Tape":
        _state().tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _state().tape_stack
        if stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()

    def __len__(self) -> int:
        return sum(1 for r in self.nodes if r() is not None)

    def record(self, inputs: Sequence["Tensor"], output: "Tensor", backward: Callable) -> None:
        node = _Node(tuple(inputs), output, backward)
        output._tape = self
        output._node = node
        self.nodes.append(weakref.ref(node))
        if len(self.nodes) >= self._compact_at:
            self.nodes = [r for r in self.nodes if r() is not None]
            self._compact_at = max(self.COMPACT_MIN, 2 * len(self.nodes))

    def reset(self) -> None:
        self.nodes.clear()

    def backward(self, loss: "Tensor") -> None:
        if loss.data.size != 1:
            raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad or loss._tape is not self:
            raise GradientError("loss was not recorded on this tape; nothing requires grad")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for ref in reversed(self.nodes):
            node = ref()
            if node is None:
                continue
            g = grads.pop(node.output_id, None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t._tape is None:
                    # leaf: accumulate into .grad
                    if t.grad is None:
                        t.grad = np.array(gi, dtype=t.data.dtype, copy=True)
                    else:
                        t.grad += gi
                else:
                    key = id(t)
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi


def current_tape() -> Tape:
    return _state().tape_stack[-1]


def backward(loss: "Tensor") -> None:
    """Populate ``.grad`` of every leaf that ``loss`` depends on."""
    if loss._tape is None:
        raise GradientError("loss is a constant; no operation was recorded")
    loss._tape.backward(loss)


class Tensor:
    """n-dimensional array with optional participation in the gradient tape."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not isinstance(data, np.ndarray) or not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(default_dtype())
        if arr.ndim > 0 and any(s <= 0 for s in arr.shape):
            raise ShapeMismatchError(f"extents must be positive, got {arr.shape}")
        self.data: np.ndarray = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None
        self._node: Optional[_Node] = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4, threshold=20)}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # -- operator sugar; implementations live in ops -----------------------
    def __add__(self, other):
        return _ops().add(self, other)

    def __radd__(self, other):
        return _ops().add(other, self)

    def __sub__(self, other):
        return _ops().sub(self, other)

    def __rsub__(self, other):
        return _ops().sub(other, self)

    def __mul__(self, other):
        return _ops().mul(self, other)

    def __rmul__(self, other):
        return _ops().mul(other, self)

    def __truediv__(self, other):
        return _ops().div(self, other)

    def __rtruediv__(self, other):
        return _ops().div(other, self)

    def __neg__(self):
        return _ops().mul(self, -1.0)

    def __pow__(self, exponent):
        return _ops().power(self, exponent)

    def __matmul__(self, other):
        return _ops().matmul(self, other)

    def __getitem__(self, index):
        return _ops().getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return _ops().reduce(self, "sum", axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return _ops().reduce(self, "mean", axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops().reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _ops().transpose(self, axes or None)

    @property
    def T(self):
        return _ops().transpose(self, None)


def _ops():
    from . import ops

    return ops


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data: np.ndarray, inputs: Iterable[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` and record a tape node when any input requires grad."""
    inputs = tuple(inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._tape = None
    out._node = None
    needs = grad_enabled() and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        current_tape().record(inputs, out, backward_fn)
    return out


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
