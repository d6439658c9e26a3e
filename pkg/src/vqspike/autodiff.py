"""A small dense-tensor reverse-mode autodiff engine on top of numpy.

Every value is float32. A :class:`Tensor` produced by an op on inputs that
require gradients records its parents and a closure mapping the upstream
gradient to one gradient per parent. :meth:`Tensor.backward` walks the graph
in reverse topological order (deterministic: parents are visited in the order
they were passed to the op) and accumulates into ``.grad`` of the leaves.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels

F32 = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=F32)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100  # make ndarray <op> Tensor dispatch to Tensor

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype != F32:
            arr = arr.astype(F32)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    # -------------------------------------------------------------- basics
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        """Stop-gradient: same values, no graph."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # -------------------------------------------------------------- graph
    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=F32)
        if grad.shape != self.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        order = _topo_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeError(
                        f"internal: gradient shape {pg.shape} for parent of shape {parent.shape}"
                    )
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -------------------------------------------------------------- operators
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
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (evaluation, sampling)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as the output of an op; ``backward(g)`` returns one grad per parent."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def tensor(x, requires_grad=False) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=requires_grad)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: np.ndarray, b: np.ndarray) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ------------------------------------------------------------------ elementwise


def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_shape("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return make_node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_shape("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return make_node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_shape("mul", a.data, b.data)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_node(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_shape("div", a.data, b.data)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), backward)


def power(a, exponent: float) -> Tensor:
    a = tensor(a)
    e = F32(exponent)
    ad = a.data
    return make_node(ad**e, (a,), lambda g: (g * e * ad ** (e - 1),))


def square(a) -> Tensor:
    a = tensor(a)
    ad = a.data
    return make_node(ad * ad, (a,), lambda g: (g * F32(2) * ad,))


def exp(a) -> Tensor:
    a = tensor(a)
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = tensor(a)
    ad = a.data
    return make_node(np.log(ad), (a,), lambda g: (g / ad,))


def sigmoid(a) -> Tensor:
    a = tensor(a)
    out = (F32(1) / (F32(1) + np.exp(-a.data))).astype(F32)
    return make_node(out, (a,), lambda g: (g * out * (F32(1) - out),))


def clamp(a, lo: float = 0.0, hi: float = 1.0) -> Tensor:
    a = tensor(a)
    ad = a.data
    inside = ((ad >= lo) & (ad <= hi)).astype(F32)
    return make_node(np.clip(ad, F32(lo), F32(hi)), (a,), lambda g: (g * inside,))


# ------------------------------------------------------------------ reductions / shape


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = tensor(a)
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims, dtype=F32)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).astype(F32),)

    return make_node(np.asarray(out, dtype=F32), (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axes, keepdims) * F32(1.0 / count)


def reshape(a, shape) -> Tensor:
    a = tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return make_node(out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_node(
        np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),)
    )


def broadcast_to(a, shape) -> Tensor:
    a = tensor(a)
    old = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {old} to {tuple(shape)}") from None
    return make_node(np.ascontiguousarray(out), (a,), lambda g: (_unbroadcast(g, old),))


def getitem(a, idx) -> Tensor:
    a = tensor(a)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=F32)
        np.add.at(full, idx, g)
        return (full,)

    return make_node(np.array(a.data[idx], dtype=F32), (a,), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_node(out, tensors, backward)


# ------------------------------------------------------------------ linear algebra


def matmul(a, b) -> Tensor:
    """``a @ b`` with ``a`` of shape (..., n, k) and ``b`` of shape (k, m)."""
    a, b = tensor(a), tensor(b)
    if b.ndim != 2 or a.ndim < 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return make_node(ad @ bd, (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` of shape (out, in)."""
    out = matmul(x, transpose(weight))
    return out if bias is None else add(out, bias)


def _conv_out(size, k, stride, pad, what):
    n = (size + 2 * pad - k) // stride + 1
    if n <= 0:
        raise ShapeError(f"{what}: kernel {k} with stride {stride}, padding {pad} does not fit size {size}")
    return n


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. x: (N, C, H, W), weight: (O, C, kh, kw)."""
    x, weight = tensor(x), tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    N, C, H, W = x.shape
    O, _, kh, kw = weight.shape
    Ho = _conv_out(H, kh, stride, padding, "conv2d")
    Wo = _conv_out(W, kw, stride, padding, "conv2d")
    cols = kernels.im2col(np.ascontiguousarray(x.data), kh, kw, stride, padding)
    cols2d = cols.reshape(-1, C * kh * kw)
    w2d = weight.data.reshape(O, -1)
    out = cols2d @ w2d.T
    if bias is not None:
        bias = tensor(bias)
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2))

    def backward(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, O)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = (gm @ w2d).reshape(N, Ho, Wo, C * kh * kw)
            gx = kernels.col2im(gcols, C, H, W, kh, kw, stride, padding)
        if weight.requires_grad:
            gw = (gm.T @ cols2d).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = gm.sum(axis=0)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward)


_COL_BLOCK = 1 << 21


def conv_transpose2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution (gradient of conv2d w.r.t. its input).

    x: (N, Cin, H, W), weight: (Cin, Cout, kh, kw); output side (H-1)*stride - 2*padding + kh.
    """
    x, weight = tensor(x), tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"conv_transpose2d: input {x.shape} incompatible with weight {weight.shape}")
    N, Cin, H, W = x.shape
    _, Cout, kh, kw = weight.shape
    Ho = (H - 1) * stride - 2 * padding + kh
    Wo = (W - 1) * stride - 2 * padding + kw
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"conv_transpose2d: empty output for input {x.shape}")
    xt = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))
    w2d = weight.data.reshape(Cin, -1)
    # the column buffer is H*W*Cout*kh*kw floats per image; process images in
    # blocks so it stays cache-sized (block size depends on shapes only)
    block = max(1, _COL_BLOCK // (H * W * w2d.shape[1]))
    out = np.empty((N, Cout, Ho, Wo), dtype=np.result_type(x.data, weight.data))
    for lo in range(0, N, block):
        cols = (xt[lo : lo + block].reshape(-1, Cin) @ w2d).reshape(-1, H, W, Cout * kh * kw)
        out[lo : lo + block] = kernels.col2im(cols, Cout, Ho, Wo, kh, kw, stride, padding)
    if bias is not None:
        bias = tensor(bias)
        out = out + bias.data.reshape(1, -1, 1, 1)

    def backward(g):
        g = np.ascontiguousarray(g)
        gx = np.empty(x.shape, dtype=out.dtype) if x.requires_grad else None
        gw = np.zeros_like(w2d) if weight.requires_grad else None
        for lo in range(0, N, block):
            gcols = kernels.im2col(g[lo : lo + block], kh, kw, stride, padding).reshape(-1, Cout * kh * kw)
            if gx is not None:
                gx[lo : lo + block] = (gcols @ w2d.T).reshape(-1, H, W, Cin).transpose(0, 3, 1, 2)
            if gw is not None:
                gw += xt[lo : lo + block].reshape(-1, Cin).T @ gcols
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, None if gw is None else gw.reshape(weight.shape), gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward)


# ------------------------------------------------------------------ probability


def softmax(a, axis: int = -1) -> Tensor:
    a = tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return make_node(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    probs = np.exp(out)
    return make_node(out, (a,), lambda g: (g - probs * g.sum(axis=axis, keepdims=True),))


def take_along(a, index: np.ndarray, axis: int) -> Tensor:
    """Gather ``a`` at integer ``index`` along ``axis`` (index has a size-1 ``axis``)."""
    a = tensor(a)
    index = np.asarray(index)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=F32)
        np.put_along_axis(full, index, g, axis=axis)
        return (full,)

    return make_node(np.take_along_axis(a.data, index, axis=axis), (a,), backward)


def embedding(table, index: np.ndarray) -> Tensor:
    """Row lookup ``table[index]``; gradients scatter-add into the used rows."""
    table = tensor(table)
    index = np.asarray(index)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise IndexError(f"embedding index out of range [0, {table.shape[0] - 1}]")
    shape = table.shape

    def backward(g):
        full = np.zeros(shape, dtype=F32)
        np.add.at(full, index.ravel(), g.reshape(-1, shape[1]))
        return (full,)

    return make_node(table.data[index], (table,), backward)


def one_hot(index, num_classes: int) -> Tensor:
    index = np.asarray(index)
    out = np.zeros(index.shape + (num_classes,), dtype=F32)
    np.put_along_axis(out, index[..., None], F32(1), axis=-1)
    return Tensor(out)


# ------------------------------------------------------------------ custom gradients


@dataclass(frozen=True)
class CustomGradFn:
    """An elementwise forward map paired with a hand-written local derivative.

    ``backward`` is evaluated at the forward *input*, never derived from
    ``forward``.
    """

    forward: Callable[[np.ndarray], np.ndarray]
    backward: Callable[[np.ndarray], np.ndarray]
    name: str = "custom"


def apply_custom(x, fn: CustomGradFn) -> Tensor:
    x = tensor(x)
    xd = x.data
    out = np.asarray(fn.forward(xd), dtype=F32)
    if out.shape != xd.shape:
        raise ShapeError(f"{fn.name}: forward changed shape {xd.shape} -> {out.shape}")
    return make_node(out, (x,), lambda g: (g * np.asarray(fn.backward(xd), dtype=F32),))


def straight_through(source, target) -> Tensor:
    """Value of ``target``; gradient delivered to ``source`` as an identity copy."""
    source, target = tensor(source), tensor(target)
    if source.shape != target.shape:
        raise ShapeError(f"straight_through: {source.shape} vs {target.shape}")
    return make_node(target.data.copy(), (source,), lambda g: (g,))
