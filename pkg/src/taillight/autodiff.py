"""Minimal reverse-mode autodiff over numpy arrays.

Operations executed inside an active :class:`Tape` are recorded whenever one
of their inputs requires a gradient; :func:`backward` replays the tape in
reverse.  Outside a tape everything runs as plain numpy (inference mode).
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PRECISIONS = {"test": np.float64, "train": np.float32}

_state = threading.local()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def dtype_for(precision: str):
    try:
        return PRECISIONS[precision]
    except KeyError:
        raise ValueError(f"unknown precision mode {precision!r}; expected one of {sorted(PRECISIONS)}")


def set_debug(flag: bool) -> None:
    """Toggle the per-op NaN/Inf sweep (off by default)."""
    _state.debug = bool(flag)


def debug_enabled() -> bool:
    return getattr(_state, "debug", False)


class Tensor:
    __slots__ = ("data", "requires_grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def attached(self) -> bool:
        return self.requires_grad or self.node is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self):
        return swapaxes(self, -1, -2)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


class Node:
    __slots__ = ("out", "parents", "backward", "op", "tape", "seq")

    def __init__(self, out: Tensor, parents: Sequence[Tensor], backward: Callable, op: str):
        self.out = out
        self.parents = parents
        self.backward = backward
        self.op = op
        self.tape: Tape | None = None
        self.seq = -1


class Tape:
    """Ordered record of executed differentiable operations.

    Single-owner: use one tape per forward/backward pass.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._prev = None

    def __enter__(self):
        self._prev = getattr(_state, "tape", None)
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, node: Node) -> None:
        node.tape = self
        node.seq = len(self.nodes)
        self.nodes.append(node)


def active_tape() -> Tape | None:
    return getattr(_state, "tape", None)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _finish(out_data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if debug_enabled() and not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    out = Tensor(out_data, dtype=out_data.dtype)
    tape = active_tape()
    if tape is not None and any(p.attached for p in parents):
        node = Node(out, parents, backward, op)
        out.node = node
        tape.record(node)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a} and {b}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _finish(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _finish(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _finish(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_shape(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _finish(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return _finish(-a.data, (a,), lambda g: (-g,), "neg")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _finish(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return _finish(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _finish(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _finish(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    return _finish(np.log(x), (a,), lambda g: (g / x,), "log")


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _finish(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


# ---------------------------------------------------------------- reductions / shape


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(out)


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _finish(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    shape = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape),)

    out = np.asarray(a.data.mean(axis=axes, keepdims=keepdims))
    return _finish(out, (a,), backward, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view shape {src} as {shape}") from None
    return _finish(out, (a,), lambda g: (g.reshape(src),), "reshape")


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return _finish(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    for have, want in zip(src[::-1], shape[::-1]):
        if have != want and have != 1:
            raise ShapeError(f"broadcast_to: extent {have} cannot expand to {want} ({src} -> {shape})")
    if len(src) > len(shape):
        raise ShapeError(f"broadcast_to: rank of {src} exceeds target {shape}")
    return _finish(np.broadcast_to(a.data, shape), (a,), lambda g: (_unbroadcast(g, src),), "broadcast_to")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def index(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype
    basic = _is_basic_index(idx)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _finish(np.asarray(a.data[idx]), (a,), backward, "index")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0]
    ndim = ref.ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != ref.shape[i] for i in range(ndim) if i != ax):
            raise ShapeError(f"concat along axis {axis}: shapes {[x.shape for x in tensors]} disagree off-axis")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=ax))

    return _finish(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim

    def backward(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return _finish(out, tuple(tensors), backward, "stack")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul: scalar operands not supported")
    ad = a.data[None, :] if a.ndim == 1 else a.data
    bd = b.data[:, None] if b.ndim == 1 else b.data
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    try:
        out = np.matmul(ad, bd)
    except ValueError:
        raise ShapeError(f"matmul: batch extents incompatible, {a.shape} @ {b.shape}") from None
    a_vec, b_vec = a.ndim == 1, b.ndim == 1

    def backward(g):
        if a_vec:
            g = np.expand_dims(g, -2)
        if b_vec:
            g = g[..., None]
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        ga = _unbroadcast(ga, ad.shape)
        gb = _unbroadcast(gb, bd.shape)
        return ga.reshape(a.shape), gb.reshape(b.shape)

    if a_vec:
        out = out.squeeze(-2)
    if b_vec:
        out = out.squeeze(-1)
    return _finish(out, (a, b), backward, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _finish(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _finish(out, (x,), backward, "log_softmax")


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation by patch gather.

    ``x`` is ``(C_in, H, W)`` or ``(N, C_in, H, W)``; ``kernel`` is
    ``(C_out, C_in, kH, kW)``.
    """
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: need stride >= 1 and pad >= 0, got stride={stride} pad={pad}")
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    wd = kernel.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ShapeError(f"conv2d: expected input rank 3/4 and kernel rank 4, got {x.shape} and {kernel.shape}")
    n, c, h, w = xd.shape
    co, ci, kh, kw = wd.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {ci} (input {x.shape}, kernel {kernel.shape})")
    oh, ow = conv_output_size(h, kh, stride, pad), conv_output_size(w, kw, stride, pad)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{w} with pad {pad}")

    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    # patch matrix laid out (n, oh, ow, kh, kw, c) so per-tap slices stay contiguous in c
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 4, 5, 1)).reshape(n * oh * ow, kh * kw * c)
    w2 = wd.transpose(0, 2, 3, 1).reshape(co, kh * kw * c)
    out = (cols @ w2.T).reshape(n, oh, ow, co).transpose(0, 3, 1, 2)
    need_gx = x.attached

    def backward(g):
        if unbatched:
            g = g[None]
        g2 = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, co)
        gw = (g2.T @ cols).reshape(co, kh, kw, c).transpose(0, 3, 1, 2)
        if not need_gx:
            return None, gw
        gcols = (g2 @ w2).reshape(n, oh, ow, kh, kw, c)
        gxp = np.zeros((n, xp.shape[2], xp.shape[3], c), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += gcols[:, :, :, i, j, :]
        gx = gxp.transpose(0, 3, 1, 2)
        if pad:
            gx = gx[:, :, pad:pad + h, pad:pad + w]
        gx = np.ascontiguousarray(gx)
        if unbatched:
            gx = gx[0]
        return gx, gw

    out = np.ascontiguousarray(out)
    if unbatched:
        out = out[0]
    return _finish(out, (x, kernel), backward, "conv2d")


# ---------------------------------------------------------------- gradients


def backward(loss: Tensor, wrt: Iterable[Tensor] | Mapping[str, Tensor] | None = None):
    """Reverse-mode sweep from a scalar ``loss``.

    Returns ``{tensor: grad}`` for every gradient-requiring leaf reached, or,
    when ``wrt`` is given, gradients for exactly those tensors (zeros for any
    the loss does not depend on).  A mapping ``wrt`` yields a mapping keyed
    by the same names.
    """
    if loss.node is None:
        raise RuntimeError("backward called on a tensor that is not attached to a tape")
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    # tape order is execution order, hence already topological
    nodes = loss.node.tape.nodes[: loss.node.seq + 1]
    for node in reversed(nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        parent_grads = node.backward(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.attached:
                continue
            key = id(parent)
            if parent.node is None:
                leaves[key] = parent
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg
    result = {leaves[k]: np.asarray(grads[k], dtype=leaves[k].dtype).reshape(leaves[k].shape) for k in leaves}
    if wrt is None:
        return result
    if isinstance(wrt, Mapping):
        return {name: result.get(t, np.zeros_like(t.data)) for name, t in wrt.items()}
    return [result.get(t, np.zeros_like(t.data)) for t in wrt]
