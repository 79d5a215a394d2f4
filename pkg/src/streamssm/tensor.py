"""numpy-backed reverse-mode autodiff with allocation tracking.

Everything in this package (blocks, stream mixing, adapters, the language
model) is composed from the primitives here. Each op installs a hand-written
backward closure; correctness is enforced by the finite-difference oracle in
``streamssm.numerics`` rather than by construction.

Design notes:
  - Gradients accumulate into ``Tensor.grad`` (a plain ndarray in the same
    dtype as the data). Mixed-precision flows insert explicit ``cast`` nodes
    whose backward converts gradients back to the source dtype.
  - A module-level :class:`MemoryTracker` records the bytes of every owned
    tensor buffer. Its high-water mark is the "peak memory" metric reported
    by the benchmark harness; views and non-tensor scratch arrays are not
    counted.
  - ``no_grad()`` suppresses graph construction for evaluation loops and the
    numeric side of finite-difference checks.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ShapeError


class MemoryTracker:
    """High-water-mark accounting of live tensor payload bytes."""

    def __init__(self):
        self.live = 0
        self.peak = 0
        self.enabled = False

    def alloc(self, nbytes: int) -> None:
        self.live += nbytes
        if self.live > self.peak:
            self.peak = self.live

    def free(self, nbytes: int) -> None:
        self.live -= nbytes

    def reset_peak(self) -> None:
        """Restart the high-water mark from the current live set."""
        self.enabled = True
        self.peak = self.live


_tracker = MemoryTracker()


def get_tracker() -> MemoryTracker:
    return _tracker


def set_tracker(tracker: MemoryTracker) -> MemoryTracker:
    """Swap the global tracker (used by tests); returns the previous one."""
    global _tracker
    old = _tracker
    _tracker = tracker
    return old


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense array with an optional gradient and backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward",
                 "_tracked", "_tracker", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, _track: bool = True):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data)
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        # Only count buffers this tensor owns; views share their base's bytes.
        self._tracker = _tracker
        self._tracked = data.nbytes if (_track and data.base is None) else 0
        if self._tracked:
            self._tracker.alloc(self._tracked)

    def __del__(self):
        if self._tracked:
            self._tracker.free(self._tracked)

    # -- basic introspection --------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, _track=False)

    # -- autograd ---------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar output."""
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar output")
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # Release the upstream gradient and graph edges eagerly so
                # activation buffers free as the sweep walks backward.
                if node is not self:
                    node.grad = None
                node._backward = None
                node._parents = ()

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- method sugar -------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self, None)

    def astype(self, dtype):
        return cast(self, dtype)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        # Always copy: the incoming array may be shared with a sibling's
        # gradient (e.g. both operands of an add receive the same upstream
        # buffer), and later in-place accumulation must not alias.
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _node(data: np.ndarray, parents: Sequence[Tensor],
          backward: Callable[[np.ndarray], None] | None) -> Tensor:
    requires = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    if requires:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _as_const(x):
    """Treat non-Tensor operands as differentiation constants."""
    return x.data if isinstance(x, Tensor) else x


# -- elementwise arithmetic ----------------------------------------------


def add(a, b):
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        def bw(g):
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g, a.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(g, b.shape))
        return _node(a.data + b.data, (a, b), bw)
    t, c = (a, b) if isinstance(a, Tensor) else (b, a)

    def bw(g):
        _accumulate(t, _unbroadcast(g, t.shape))
    return _node(t.data + c, (t,), bw)


def sub(a, b):
    if isinstance(b, Tensor):
        return add(a, neg(b))
    return add(a, -b)


def neg(a: Tensor):
    def bw(g):
        _accumulate(a, -g)
    return _node(-a.data, (a,), bw)


def mul(a, b):
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        def bw(g):
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(g * a.data, b.shape))
        return _node(a.data * b.data, (a, b), bw)
    t, c = (a, b) if isinstance(a, Tensor) else (b, a)

    def bw(g):
        _accumulate(t, _unbroadcast(g * c, t.shape))
    return _node(t.data * c, (t,), bw)


def div(a, b):
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        out_data = a.data / b.data

        def bw(g):
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(-g * out_data / b.data, b.shape))
        return _node(out_data, (a, b), bw)
    if isinstance(a, Tensor):
        def bw(g):
            _accumulate(a, _unbroadcast(g / b, a.shape))
        return _node(a.data / b, (a,), bw)
    # constant / tensor
    out_data = a / b.data

    def bw(g):
        _accumulate(b, _unbroadcast(-g * out_data / b.data, b.shape))
    return _node(out_data, (b,), bw)


def power(a: Tensor, exponent: float):
    out_data = a.data ** exponent

    def bw(g):
        _accumulate(a, g * exponent * a.data ** (exponent - 1))
    return _node(out_data, (a,), bw)


def exp(a: Tensor):
    out_data = np.exp(a.data)

    def bw(g):
        _accumulate(a, g * out_data)
    return _node(out_data, (a,), bw)


def log(a: Tensor):
    def bw(g):
        _accumulate(a, g / a.data)
    return _node(np.log(a.data), (a,), bw)


def sqrt(a: Tensor):
    out_data = np.sqrt(a.data)

    def bw(g):
        _accumulate(a, g * (0.5 / out_data))
    return _node(out_data, (a,), bw)


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    """Overflow-safe logistic on raw arrays."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor):
    out_data = sigmoid_np(a.data)

    def bw(g):
        _accumulate(a, g * out_data * (1.0 - out_data))
    return _node(out_data, (a,), bw)


def clip(a: Tensor, lo: float, hi: float):
    """Clamp with pass-through gradient strictly inside (lo, hi)."""
    out_data = np.clip(a.data, lo, hi)
    mask = (a.data > lo) & (a.data < hi)

    def bw(g):
        _accumulate(a, g * mask)
    return _node(out_data, (a,), bw)


# -- reductions and shape ops ---------------------------------------------


def tsum(a: Tensor, axis=None, keepdims=False):
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))
    return _node(np.asarray(out_data), (a,), bw)


def tmean(a: Tensor, axis=None, keepdims=False):
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape: tuple[int, ...]):
    def bw(g):
        _accumulate(a, g.reshape(a.shape))
    return _node(a.data.reshape(shape), (a,), bw)


def transpose(a: Tensor, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))

    def bw(g):
        _accumulate(a, g.transpose(inverse))
    return _node(a.data.transpose(axes), (a,), bw)


def narrow(a: Tensor, axis: int, start: int, length: int):
    """Contiguous slice along one axis; backward zero-pads."""
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def bw(g):
        full = np.zeros(a.shape, dtype=a.data.dtype)
        full[index] = g
        _accumulate(a, full)
    return _node(np.ascontiguousarray(a.data[index]), (a,), bw)


def cast(a: Tensor, dtype):
    dtype = np.dtype(dtype)
    if a.data.dtype == dtype:
        return a

    def bw(g):
        _accumulate(a, g.astype(a.data.dtype))
    return _node(a.data.astype(dtype), (a,), bw)


# -- linear algebra ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor):
    """2-D matrix product. Half-precision inputs accumulate in float32."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    half = a.data.dtype == np.float16 or b.data.dtype == np.float16

    def mm(x, y):
        if half:
            return (x.astype(np.float32) @ y.astype(np.float32)).astype(np.float16)
        return x @ y

    def bw(g):
        if a.requires_grad:
            _accumulate(a, mm(g, b.data.T))
        if b.requires_grad:
            _accumulate(b, mm(a.data.T, g))
    return _node(mm(a.data, b.data), (a, b), bw)


def embedding(table: Tensor, ids: np.ndarray):
    """Row gather out[..., :] = table[ids[...]]; backward scatter-adds."""
    out_data = table.data[ids]

    def bw(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        _accumulate(table, grad)
    return _node(out_data, (table,), bw)


def dropout(a: Tensor, rate: float, rng: np.random.Generator):
    """Inverted dropout; a no-op when rate == 0."""
    if rate <= 0.0:
        return a
    keep = 1.0 - rate
    mask = (rng.random(a.shape) < keep).astype(a.data.dtype)
    mask /= np.asarray(keep, dtype=a.data.dtype)

    def bw(g):
        _accumulate(a, g * mask)
    return _node(a.data * mask, (a,), bw)


def mix_streams(h: Tensor, x: Tensor):
    """out[b,t,i,d] = sum_j h[i,j] * x[b,t,j,d] with grads to both operands."""
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise ShapeError(f"mixing matrix must be square, got {h.shape}")
    if x.ndim != 4 or x.shape[2] != h.shape[0]:
        raise ShapeError(f"stream axis mismatch: {x.shape} vs {h.shape}")
    out_data = np.einsum("ij,btjd->btid", h.data, x.data)

    def bw(g):
        if h.requires_grad:
            _accumulate(h, np.einsum("btid,btjd->ij", g, x.data))
        if x.requires_grad:
            _accumulate(x, np.einsum("ij,btid->btjd", h.data, g))
    return _node(out_data, (h, x), bw)


def cross_entropy(logits: Tensor, targets: np.ndarray):
    """Mean token-level cross-entropy for [N, V] logits and [N] int targets.

    Computed in float32 or wider regardless of activation precision.
    """
    n, _ = logits.shape
    work_dtype = np.float64 if logits.data.dtype == np.float64 else np.float32
    z = logits.data.astype(work_dtype, copy=False)
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1)) + zmax[:, 0]
    picked = z[np.arange(n), targets]
    out_data = np.asarray((lse - picked).mean(), dtype=work_dtype)

    def bw(g):
        p = np.exp(shifted - (lse - zmax[:, 0])[:, None])
        p[np.arange(n), targets] -= 1.0
        _accumulate(logits, (float(g) / n) * p)
    return _node(out_data, (logits,), bw)


def global_grad_norm(grads: Iterable[np.ndarray]) -> float:
    """2-norm over the concatenation of all gradient arrays."""
    total = 0.0
    for g in grads:
        flat = g.reshape(-1).astype(np.float64, copy=False)
        total += float(flat @ flat)
    return float(np.sqrt(total))
