"""Dense numpy tensors with a reverse-mode gradient tape.

Operations record a node on the innermost active :class:`Tape` whenever one of
their inputs requires a gradient. Nodes are appended in creation order, which
is already a topological order, so the backward sweep is a single reverse
walk over the tape.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = (x * x).sum()
    >>> tape.gradient(y, [x])[0]
    array([6.], dtype=float32)
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class ShapeError(ValueError):
    pass


class Tensor:
    """An n-dimensional real array, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by a scalar")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: tuple, output: Tensor, backward: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Records differentiable operations executed inside its ``with`` block.

    Tapes are thread-local; nesting records on the innermost tape only.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:
            stack.remove(self)

    @property
    def leaves(self) -> list[Tensor]:
        produced = {id(n.output) for n in self.nodes}
        seen, out = set(), []
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and id(t) not in produced and id(t) not in seen:
                    seen.add(id(t))
                    out.append(t)
        return out

    def gradient(self, loss: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``loss`` with respect to each of ``sources``.

        Sources that the loss does not depend on get an all-zero gradient.
        """
        if loss.data.size != 1:
            raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        out = []
        for s in sources:
            g = grads.get(id(s))
            if g is None and s is loss:
                g = np.ones_like(s.data)
            out.append(np.zeros_like(s.data) if g is None else g.astype(s.dtype, copy=False))
        return out


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradient map from every requires-grad leaf recorded on ``tape``."""
    leaves = tape.leaves
    return dict(zip(leaves, tape.gradient(loss, leaves)))


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _record(op: str, out_data: np.ndarray, inputs: tuple, backward_fn: Callable) -> Tensor:
    stack = _tape_stack()
    track = bool(stack) and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        stack[-1].nodes.append(_Node(op, inputs, out, backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, float(b))
    if not isinstance(a, Tensor) and np.ndim(a) == 0:
        return scale(b, float(a))
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = a.dtype.type(c)
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    return _record("add_scalar", a.data + a.dtype.type(c), (a,), lambda g: (g,))


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _record("relu", np.maximum(a.data, a.dtype.type(0)), (a,),
                   lambda g: (g * mask,))


def clamp(a: Tensor, lo: float = 0.0, hi: float = 1.0) -> Tensor:
    """Clip into ``[lo, hi]``; gradient is 1 strictly inside and 0 on or outside the bounds."""
    a = _as_tensor(a)
    d = a.data
    inside = (d > lo) & (d < hi)
    return _record("clamp", np.clip(d, lo, hi).astype(a.dtype, copy=False), (a,),
                   lambda g: (g * inside,))


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    d = a.data
    return _record("log", np.log(d), (a,), lambda g: (g / d,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    e = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)
    return _record("softmax", s, (a,),
                   lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    s = np.exp(out)
    return _record("log_softmax", out, (a,),
                   lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


# reductions and shape


def sum_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    return _record("sum", np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                   lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    shape, n = a.shape, a.data.size
    return _record("mean", np.asarray(a.data.mean(), dtype=a.dtype), (a,),
                   lambda g: (np.full(shape, g / n, dtype=a.dtype),))


def sum_rows(a: Tensor) -> Tensor:
    """Sum a 2-D tensor over its last axis."""
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"sum_rows expects a 2-D tensor, got {a.shape}")
    shape = a.shape
    return _record("sum_rows", a.data.sum(axis=1), (a,),
                   lambda g: (np.broadcast_to(g[:, None], shape).copy(),))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return _record("reshape", out, (a,), lambda g: (g.reshape(old),))


def pick(a: Tensor, index: np.ndarray) -> Tensor:
    """Row-wise gather ``a[i, index[i]]`` from a 2-D tensor."""
    a = _as_tensor(a)
    index = np.asarray(index)
    if a.ndim != 2 or index.shape != (a.shape[0],):
        raise ShapeError(f"pick: expected (B, C) values and (B,) indices, got {a.shape} and {index.shape}")
    rows = np.arange(a.shape[0])
    shape = a.shape

    def back(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[rows, index] = g
        return (out,)

    return _record("pick", a.data[rows, index], (a,), back)


# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad
    return _record("matmul", ad @ bd, (a, b),
                   lambda g: (g @ bd.T if need_a else None, ad.T @ g if need_b else None))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation of ``x`` (N, C, H, W) with ``w`` (O, C, kh, kw)."""
    x = _as_tensor(x)
    w = _as_tensor(w, x)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible input {x.shape} and kernel {w.shape}")
    if b is not None:
        b = _as_tensor(b, x)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv2d: bias shape {b.shape} does not match {w.shape[0]} output channels")
    p = int(padding)
    kh, kw = w.shape[2], w.shape[3]
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {xp.shape}")
    N, C = xp.shape[:2]
    O = w.shape[0]
    Ho, Wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    # per-sample im2col: (N, C*kh*kw, Ho*Wo), so outputs land directly in NCHW order
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(N, C * kh * kw, Ho * Wo)
    wmat = w.data.reshape(O, -1)
    out = np.matmul(wmat, cols).reshape(N, O, Ho, Wo)
    if b is not None:
        out += b.data[None, :, None, None]
    H, W = x.shape[2], x.shape[3]
    need_x, need_w = x.requires_grad, w.requires_grad

    def back(g):
        g3 = np.ascontiguousarray(g).reshape(N, O, Ho * Wo)
        gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape) if need_w else None
        gx = None
        if need_x:
            dcols = np.matmul(wmat.T, g3).reshape(N, C, kh, kw, Ho, Wo)
            gxp = np.zeros(xp.shape, dtype=dcols.dtype)
            for di in range(kh):
                for dj in range(kw):
                    gxp[:, :, di:di + Ho, dj:dj + Wo] += dcols[:, :, di, dj]
            gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    inputs = (x, w) if b is None else (x, w, b)
    return _record("conv2d", out, inputs, back)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped.

    Ties route the gradient to the first maximal element in row-major order.
    """
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects (N, C, H, W), got {x.shape}")
    N, C, H, W = x.shape
    Ho, Wo = H // 2, W // 2
    d = x.data
    q = [d[:, :, i:2 * Ho:2, j:2 * Wo:2] for i in (0, 1) for j in (0, 1)]
    out = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))

    def back(g):
        gx = np.zeros((N, C, H, W), dtype=g.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for k, (i, j) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            hit = (q[k] == out) & ~taken
            taken |= hit
            gx[:, :, i:2 * Ho:2, j:2 * Wo:2] = g * hit
        return (gx,)

    return _record("maxpool2d", out, (x,), back)


# checking


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-4,
                      oracle_dtype=np.float64) -> float:
    """Max relative error between the tape gradient of ``f`` at ``x`` and central differences.

    The analytic gradient is taken at ``x``'s own precision. Differences are
    evaluated at ``oracle_dtype`` so a 32-bit gradient is checked against a
    64-bit reference rather than 32-bit rounding noise.
    """
    leaf = Tensor(x.data, requires_grad=True)
    with Tape() as tape:
        y = f(leaf)
    analytic = tape.gradient(y, [leaf])[0].astype(np.float64).ravel()

    base = x.data.astype(oracle_dtype).ravel()
    numeric = np.empty_like(analytic)
    for i in range(base.size):
        xp = base.copy()
        xp[i] += h
        xm = base.copy()
        xm[i] -= h
        fp = float(f(Tensor(xp.reshape(x.shape), dtype=oracle_dtype)).data)
        fm = float(f(Tensor(xm.reshape(x.shape), dtype=oracle_dtype)).data)
        numeric[i] = (fp - fm) / (2 * h)
    err = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(err.max()) if err.size else 0.0


def zeros(shape: Iterable[int], requires_grad: bool = False, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=dtype), requires_grad=requires_grad)
