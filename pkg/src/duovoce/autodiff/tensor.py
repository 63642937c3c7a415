"""Dense n-d tensor with reverse-mode automatic differentiation.

Every differentiable op creates an output node holding its parents and a
closure mapping the output gradient to one gradient per parent. Nodes carry
a global creation sequence number, so reverse creation order is a valid
topological order for the backward sweep. A graph is single use: after
``backward`` its interior nodes are released and may not be swept again.
"""

from __future__ import annotations

import contextlib
import itertools

import numpy as np
from scipy.special import expit

_seq = itertools.count()
_grad_enabled = True

_FLOATS = (np.float32, np.float64)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_prev", "_backward", "_seq", "_freed", "op")
    __array_ufunc__ = None  # numpy scalars defer to Tensor operators

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in _FLOATS else np.float32
        self.data = arr.astype(dtype, copy=False)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._prev = ()
        self._backward = None
        self._seq = next(_seq)
        self._freed = False
        self.op = "leaf"

    # -- basic accessors ---------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- graph -------------------------------------------------------------
    def backward(self):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every grad leaf."""
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._freed:
            raise RuntimeError("graph already consumed by a previous backward; re-run forward")
        if not self.requires_grad:
            raise RuntimeError("loss is detached from every tensor that requires grad")

        nodes = []
        seen = set()
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            if node._freed:
                raise RuntimeError("graph contains nodes freed by a previous backward")
            nodes.append(node)
            stack.extend(p for p in node._prev if p.requires_grad)
        nodes.sort(key=lambda n: n._seq, reverse=True)

        grads = {id(self): np.ones_like(self.data)}
        for node in nodes:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._prev, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=parent.data.dtype)
                if pg.shape != parent.shape:
                    raise RuntimeError(
                        f"op '{node.op}' produced grad of shape {pg.shape} for input of shape {parent.shape}"
                    )
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        for node in nodes:
            if node._backward is not None:
                node._backward = None
                node._prev = ()
                node._freed = True

    # -- operator sugar ----------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

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
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _make(data, parents, backward, op) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary_operands(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    return a, b


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise ------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    p = float(p)
    return _make(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2 * g * ad,), "square")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)
    return _make(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def clip_min(a: Tensor, floor: float) -> Tensor:
    keep = a.data > floor
    return _make(np.where(keep, a.data, np.asarray(floor, dtype=a.dtype)), (a,), lambda g: (g * keep,), "clip_min")


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    scale = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return _make(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


# -- reductions ---------------------------------------------------------------
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / n)


# -- linear algebra -----------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # fold leading axes into one GEMM instead of a broadcast stack
        a2 = ad.reshape(-1, ad.shape[-1])

        def backward2(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make((a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],)), (a, b), backward2, "matmul")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


# -- shape manipulation -------------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise ValueError(f"concat along axis {axis}: shapes {ref} and {t.shape} are incompatible")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(sl)])
        return tuple(out)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis % (t.ndim + 1), 1)
        expanded.append(reshape(t, tuple(shape)))
    return concat(expanded, axis)


def _is_basic_index(idx) -> bool:
    if not isinstance(idx, tuple):
        idx = (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in idx)


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype
    basic = _is_basic_index(idx)

    def backward(g):
        z = np.zeros(shape, dtype=dtype)
        if basic:
            z[idx] = g
        else:
            np.add.at(z, idx, g)
        return (z,)

    return _make(a.data[idx], (a,), backward, "slice")


def slice_axis(a: Tensor, start: int, stop: int, axis: int) -> Tensor:
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    return getitem(a, tuple(sl))


def split(a: Tensor, sections: int, axis: int) -> list:
    n = a.shape[axis]
    if n % sections:
        raise ValueError(f"split: axis of size {n} does not divide into {sections}")
    step = n // sections
    return [slice_axis(a, i * step, (i + 1) * step, axis) for i in range(sections)]


def _scatter_last(v: np.ndarray, idx: np.ndarray, length: int) -> np.ndarray:
    lead = v.shape[: v.ndim - idx.ndim]
    flat_v = v.reshape(-1, idx.size)
    flat_idx = idx.reshape(-1)
    out = np.empty((flat_v.shape[0], length), dtype=v.dtype)
    for r in range(flat_v.shape[0]):
        out[r] = np.bincount(flat_idx, weights=flat_v[r], minlength=length)
    return out.reshape(lead + (length,))


def gather_last(a: Tensor, idx) -> Tensor:
    """``a[..., idx]`` for an integer index array; gradients scatter-add back."""
    idx = np.asarray(idx, dtype=np.intp)
    n = a.shape[-1]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather index out of range for last axis of size {n}")
    return _make(a.data[..., idx], (a,), lambda g: (_scatter_last(g, idx, n),), "gather")


def scatter_add_last(v: Tensor, idx, length: int) -> Tensor:
    """Adjoint of :func:`gather_last`: trailing ``idx.ndim`` axes of ``v`` summed into ``length`` slots."""
    idx = np.asarray(idx, dtype=np.intp)
    if v.shape[v.ndim - idx.ndim :] != idx.shape:
        raise ValueError(f"scatter: value shape {v.shape} does not end with index shape {idx.shape}")
    return _make(_scatter_last(v.data, idx, length), (v,), lambda g: (g[..., idx],), "scatter_add")


# -- convolution --------------------------------------------------------------
def _pad_pairs(padding):
    if isinstance(padding, int):
        return (padding, padding), (padding, padding)
    ph, pw = padding
    ph = (ph, ph) if isinstance(ph, int) else tuple(ph)
    pw = (pw, pw) if isinstance(pw, int) else tuple(pw)
    return ph, pw


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def conv2d(x: Tensor, w: Tensor, stride=1, padding=0) -> Tensor:
    """Cross-correlation of ``x`` (N, C, H, W) with ``w`` (O, C, kH, kW).

    ``padding`` is an int, (pH, pW), or ((top, bottom), (left, right)) of zeros.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: input channels {x.shape} do not match kernel {w.shape}")
    sh, sw = _pair(stride)
    (pt, pb), (pl, pr) = _pad_pairs(padding)
    kh, kw = w.shape[2:]
    xd = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else x.data
    hp, wp = xd.shape[2:]
    if hp < kh or wp < kw:
        raise ValueError(f"conv2d: padded input {xd.shape} smaller than kernel {w.shape}")
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    wd = w.data
    win = np.lib.stride_tricks.sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    out = np.tensordot(win, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def backward(g):
        gx = gw = None
        if w.requires_grad:
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        if x.requires_grad:
            gxp = np.zeros(xd.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    contrib = np.tensordot(g, wd[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                    gxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += contrib
            gx = gxp[:, :, pt : hp - pb, pl : wp - pr]
        return gx, gw

    return _make(np.ascontiguousarray(out), (x, w), backward, "conv2d")


def conv2d_transpose(x: Tensor, w: Tensor, stride=1, padding=0, output_padding=0) -> Tensor:
    """Transposed convolution of ``x`` (N, Cin, H, W) with ``w`` (Cin, Cout, kH, kW).

    Output size per axis: (n - 1) * stride - pad_lo - pad_hi + k + output_padding.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d_transpose expects 4-d input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"conv2d_transpose: input channels {x.shape} do not match kernel {w.shape}")
    sh, sw = _pair(stride)
    (pt, pb), (pl, pr) = _pad_pairs(padding)
    oph, opw = _pair(output_padding)
    n, _, h, wi = x.shape
    _, cout, kh, kw = w.shape
    hf = (h - 1) * sh + kh + oph
    wf = (wi - 1) * sw + kw + opw
    if hf - pt - pb <= 0 or wf - pl - pr <= 0:
        raise ValueError("conv2d_transpose: padding removes the whole output")
    xd, wd = x.data, w.data
    full = np.zeros((n, cout, hf, wf), dtype=np.result_type(xd, wd))
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(xd, wd[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
            full[:, :, i : i + sh * h : sh, j : j + sw * wi : sw] += contrib
    out = full[:, :, pt : hf - pb, pl : wf - pr]

    def backward(g):
        gfull = np.zeros(full.shape, dtype=g.dtype)
        gfull[:, :, pt : hf - pb, pl : wf - pr] = g
        gx = np.zeros(xd.shape, dtype=g.dtype) if x.requires_grad else None
        gw = np.zeros(wd.shape, dtype=g.dtype) if w.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                gs = gfull[:, :, i : i + sh * h : sh, j : j + sw * wi : sw]
                if gx is not None:
                    gx += np.tensordot(gs, wd[:, :, i, j], axes=([1], [1])).transpose(0, 3, 1, 2)
                if gw is not None:
                    gw[:, :, i, j] = np.tensordot(xd, gs, axes=([0, 2, 3], [0, 2, 3]))
        return gx, gw

    return _make(np.ascontiguousarray(out), (x, w), backward, "conv2d_transpose")


# -- composites -----------------------------------------------------------------
def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a - Tensor(a.data.max(axis=axis, keepdims=True))
    e = exp(shifted)
    return e / tsum(e, axis, keepdims=True)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a - Tensor(a.data.max(axis=axis, keepdims=True))
    return shifted - log(tsum(exp(shifted), axis, keepdims=True))
