"""Dense f64 tensors with define-by-run reverse-mode autodiff.

Every array that participates in model forward/backward passes is a
``Tensor`` wrapping a numpy array.  Ops build an implicit DAG through
parent links; ``backward(loss)`` walks it in reverse topological order.
Convolutions are lowered to a single GEMM via im2col so the heavy lifting
stays inside BLAS.  All op outputs are checked for NaN/Inf and raise
``NonFiniteError`` instead of propagating silently.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, NonFiniteError, ShapeError

DEFAULT_DTYPE = np.float64


def _check_finite(data: np.ndarray, op: str) -> None:
    # one cheap reduction; NaN/Inf both poison the sum
    if data.size and not math.isfinite(float(np.sum(data))):
        bad = data[~np.isfinite(data)]
        raise NonFiniteError(
            f"{op} produced {bad.size} non-finite value(s), first={bad.flat[0]!r}"
        )


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._consumed = False

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad=False, dtype=DEFAULT_DTYPE):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    @staticmethod
    def ones(shape, requires_grad=False, dtype=DEFAULT_DTYPE):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)

    # -- basic introspection --------------------------------------------------

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

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar ---------------------------------------------------

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def permute(self, *axes):
        return permute(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# -- reverse-mode engine -------------------------------------------------------


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from root through grad-requiring parents, parents first."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad leaf reachable from a scalar loss."""
    if loss.data.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not require grad; nothing to differentiate")
    if loss._consumed:
        raise RuntimeError("backward called twice on the same graph; re-run the forward pass")
    loss._consumed = True
    order = topological_order(loss)
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            # intermediate grads are only needed transiently
            if node is not loss and node._parents:
                node.grad = None


# -- broadcasting helpers ------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise / reduction ops ------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from e

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as e:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}") from e

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from e

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data / b.data
    except ValueError as e:
        raise ShapeError(f"div: cannot broadcast {a.shape} with {b.shape}") from e

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(data, (a, b), bw, "div")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    data = a.data * c

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * c)

    return _make(data, (a,), bw, "scale")


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * data)

    return _make(data, (a,), bw, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    data = np.log(a.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(data, (a,), bw, "log")


def log1p(a) -> Tensor:
    a = as_tensor(a)
    data = np.log1p(a.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g / (1.0 + a.data))

    return _make(data, (a,), bw, "log1p")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    data = np.sqrt(a.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * 0.5 / data)

    return _make(data, (a,), bw, "sqrt")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # stable form avoids overflow in exp for large |x|
    data = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                    np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * data * (1.0 - data))

    return _make(data, (a,), bw, "sigmoid")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    data = np.logaddexp(0.0, a.data)

    def bw(g):
        if a.requires_grad:
            sig = 1.0 / (1.0 + np.exp(-a.data))
            a._accumulate(g * sig)

    return _make(data, (a,), bw, "softplus")


def swish(a) -> Tensor:
    """x * sigmoid(x)."""
    a = as_tensor(a)
    sig = 1.0 / (1.0 + np.exp(-np.clip(a.data, -60.0, 60.0)))
    data = a.data * sig

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * (sig + a.data * sig * (1.0 - sig)))

    return _make(data, (a,), bw, "swish")


def elementwise_mul(a, b) -> Tensor:
    """Alias kept for readability at call sites that gate features."""
    return mul(a, b)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gg, a.shape))

    return _make(np.asarray(data), (a,), bw, "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = 1
        for ax in axes:
            n *= a.shape[ax]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        if a.requires_grad:
            gy = g * data
            a._accumulate(gy - data * gy.sum(axis=axis, keepdims=True))

    return _make(data, (a,), bw, "softmax")


# -- shape ops -------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    if np.prod(shape, dtype=np.int64) != a.size and -1 not in shape:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    data = a.data.reshape(shape)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _make(data, (a,), bw, "reshape")


def permute(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permute: {axes} is not a permutation of {a.ndim} axes")
    inv = np.argsort(axes)
    data = np.ascontiguousarray(a.data.transpose(axes))

    def bw(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inv))

    return _make(data, (a,), bw, "permute")


def take(a, idx) -> Tensor:
    """Basic (slice/int) indexing with scatter-add backward."""
    a = as_tensor(a)
    data = a.data[idx]

    def bw(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            ga[idx] += g
            a._accumulate(ga)

    return _make(np.ascontiguousarray(data), (a,), bw, "take")


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(p) for p in parts]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _make(data, tuple(ts), bw, "concat")


def stack(parts: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(p) for p in parts]
    data = np.stack([t.data for t in ts], axis=axis)

    def bw(g):
        views = np.moveaxis(g, axis, 0)
        for t, gv in zip(ts, views):
            if t.requires_grad:
                t._accumulate(gv)

    return _make(data, tuple(ts), bw, "stack")


# -- matmul ---------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim>=2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError as e:
        raise ShapeError(f"matmul: batch extents incompatible, {a.shape} @ {b.shape}") from e

    def bw(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(data, (a, b), bw, "matmul")


# -- convolutions ------------------------------------------------------------
#
# Same-padding convention: total zero pad K-1, floor((K-1)/2) left, ceil right.
# The zero padding is load-bearing: it is the only way absolute position can
# leak into a conv stack, so it must not be replaced by reflect/edge modes.


def _pad_lr(k: int) -> tuple[int, int]:
    return (k - 1) // 2, k - 1 - (k - 1) // 2


def _im2col1d(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    # xp: [B, C, Lp] -> [B, L', C, K] contiguous
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=-1)  # [B, C, Lp-K+1, K]
    win = win[:, :, ::stride, :]
    return np.ascontiguousarray(win.transpose(0, 2, 1, 3))


def _col2im1d(gcols: np.ndarray, lp: int, k: int, stride: int) -> np.ndarray:
    # gcols: [B, L', C, K] -> [B, C, Lp] scatter-add
    b, lo, c, _ = gcols.shape
    out = np.zeros((b, c, lp), dtype=gcols.dtype)
    span = (lo - 1) * stride + 1
    for kk in range(k):
        out[:, :, kk:kk + span:stride] += gcols[:, :, :, kk].transpose(0, 2, 1)
    return out


def _conv1d_out_len(l: int, k: int, stride: int) -> int:
    pad = k - 1
    if k > l + pad:
        raise ShapeError(f"conv1d: kernel {k} exceeds padded length {l + pad}")
    return (l + pad - k) // stride + 1


def conv1d(x, w, stride: int = 1) -> Tensor:
    """1-D cross-correlation, same-padding at stride 1.

    x: [C_in, L] or [B, C_in, L]; w: [C_out, C_in, K]. Output [.., C_out, L'].
    """
    x, w = as_tensor(x), as_tensor(w)
    if stride < 1:
        raise ConfigError(f"conv1d: stride must be >= 1, got {stride}")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv1d: expected x [B,C,L] and w [Co,Ci,K], got {x.shape}, {w.shape}")
    b, ci, l = xd.shape
    co, ciw, k = w.shape
    if ci != ciw:
        raise ShapeError(f"conv1d: channel mismatch x {x.shape} vs w {w.shape}")
    lo = _conv1d_out_len(l, k, stride)
    pl, pr = _pad_lr(k)
    xp = np.pad(xd, ((0, 0), (0, 0), (pl, pr)))
    cols = _im2col1d(xp, k, stride)                      # [B, L', Ci, K]
    cm = cols.reshape(b * lo, ci * k)
    wm = w.data.reshape(co, ci * k)
    out = (cm @ wm.T).reshape(b, lo, co).transpose(0, 2, 1)
    out = np.ascontiguousarray(out[0] if squeeze else out)

    def bw(g):
        gd = g[None] if squeeze else g
        gm = np.ascontiguousarray(gd.transpose(0, 2, 1)).reshape(b * lo, co)
        if w.requires_grad:
            w._accumulate((gm.T @ cm).reshape(co, ci, k))
        if x.requires_grad:
            gcols = (gm @ wm).reshape(b, lo, ci, k)
            gxp = _col2im1d(gcols, xp.shape[-1], k, stride)
            gx = gxp[:, :, pl:pl + l]
            x._accumulate(gx[0] if squeeze else gx)

    return _make(out, (x, w), bw, "conv1d")


def deconv1d(x, w, stride: int = 1) -> Tensor:
    """Transposed 1-D convolution: exact adjoint of conv1d for the same w.

    x: [C_in, L'] or [B, C_in, L']; w: [C_in, C_out, K]. Output length
    (L'-1)*stride + 1, matching the conv1d input length at stride 1.
    """
    x, w = as_tensor(x), as_tensor(w)
    if stride < 1:
        raise ConfigError(f"deconv1d: stride must be >= 1, got {stride}")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"deconv1d: expected x [B,C,L] and w [Ci,Co,K], got {x.shape}, {w.shape}")
    b, ci, lo = xd.shape
    ciw, co, k = w.shape
    if ci != ciw:
        raise ShapeError(f"deconv1d: channel mismatch x {x.shape} vs w {w.shape}")
    pl, pr = _pad_lr(k)
    l = (lo - 1) * stride + 1
    lp = l + k - 1
    wm = w.data.reshape(ci, co * k)
    xm = np.ascontiguousarray(xd.transpose(0, 2, 1)).reshape(b * lo, ci)
    gcols = (xm @ wm).reshape(b, lo, co, k)
    out_p = _col2im1d(gcols, lp, k, stride)
    out = np.ascontiguousarray(out_p[:, :, pl:pl + l])

    def bw(g):
        gd = g[None] if squeeze else g
        gp = np.pad(gd, ((0, 0), (0, 0), (pl, pr)))
        cols = _im2col1d(gp, k, stride)                  # [B, L', Co, K]
        cm = cols.reshape(b * lo, co * k)
        if x.requires_grad:
            gx = (cm @ wm.T).reshape(b, lo, ci).transpose(0, 2, 1)
            x._accumulate(gx[0] if squeeze else gx)
        if w.requires_grad:
            w._accumulate((xm.T @ cm).reshape(ci, co, k))

    return _make(out[0] if squeeze else out, (x, w), bw, "deconv1d")


def _im2col2d(xp: np.ndarray, kt: int, kf: int) -> np.ndarray:
    # xp: [B, C, Tp, Fp] -> [B, T', F', C, kt, kf]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kt, kf), axis=(-2, -1))
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))


def _col2im2d(gcols: np.ndarray, tp: int, fp: int) -> np.ndarray:
    # gcols: [B, T', F', C, kt, kf] -> [B, C, Tp, Fp]
    b, to, fo, c, kt, kf = gcols.shape
    out = np.zeros((b, c, tp, fp), dtype=gcols.dtype)
    for it in range(kt):
        for jf in range(kf):
            out[:, :, it:it + to, jf:jf + fo] += gcols[:, :, :, :, it, jf].transpose(0, 3, 1, 2)
    return out


def conv2d(x, w) -> Tensor:
    """2-D cross-correlation with same-padding (stride 1), T and F preserved.

    x: [C_in, T, F] or [B, C_in, T, F]; w: [C_out, C_in, kt, kf].
    """
    x, w = as_tensor(x), as_tensor(w)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected x [B,C,T,F] and w [Co,Ci,kt,kf], got {x.shape}, {w.shape}")
    b, ci, t, f = xd.shape
    co, ciw, kt, kf = w.shape
    if ci != ciw:
        raise ShapeError(f"conv2d: channel mismatch x {x.shape} vs w {w.shape}")
    pt = _pad_lr(kt)
    pf = _pad_lr(kf)
    xp = np.pad(xd, ((0, 0), (0, 0), pt, pf))
    cols = _im2col2d(xp, kt, kf)                         # [B, T, F, Ci, kt, kf]
    cm = cols.reshape(b * t * f, ci * kt * kf)
    wm = w.data.reshape(co, ci * kt * kf)
    out = (cm @ wm.T).reshape(b, t, f, co).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out[0] if squeeze else out)

    def bw(g):
        gd = g[None] if squeeze else g
        gm = np.ascontiguousarray(gd.transpose(0, 2, 3, 1)).reshape(b * t * f, co)
        if w.requires_grad:
            w._accumulate((gm.T @ cm).reshape(co, ci, kt, kf))
        if x.requires_grad:
            gcols = (gm @ wm).reshape(b, t, f, ci, kt, kf)
            gxp = _col2im2d(gcols, xp.shape[-2], xp.shape[-1])
            gx = gxp[:, :, pt[0]:pt[0] + t, pf[0]:pf[0] + f]
            x._accumulate(gx[0] if squeeze else gx)

    return _make(out, (x, w), bw, "conv2d")


def deconv2d(x, w) -> Tensor:
    """Transposed 2-D convolution: exact adjoint of conv2d for the same w.

    x: [C_in, T, F] or [B, C_in, T, F]; w: [C_in, C_out, kt, kf].
    """
    x, w = as_tensor(x), as_tensor(w)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"deconv2d: expected x [B,C,T,F] and w [Ci,Co,kt,kf], got {x.shape}, {w.shape}")
    b, ci, t, f = xd.shape
    ciw, co, kt, kf = w.shape
    if ci != ciw:
        raise ShapeError(f"deconv2d: channel mismatch x {x.shape} vs w {w.shape}")
    pt = _pad_lr(kt)
    pf = _pad_lr(kf)
    tp, fp = t + kt - 1, f + kf - 1
    wm = w.data.reshape(ci, co * kt * kf)
    xm = np.ascontiguousarray(xd.transpose(0, 2, 3, 1)).reshape(b * t * f, ci)
    gcols = (xm @ wm).reshape(b, t, f, co, kt, kf)
    out_p = _col2im2d(gcols, tp, fp)
    out = np.ascontiguousarray(out_p[:, :, pt[0]:pt[0] + t, pf[0]:pf[0] + f])

    def bw(g):
        gd = g[None] if squeeze else g
        gp = np.pad(gd, ((0, 0), (0, 0), pt, pf))
        cols = _im2col2d(gp, kt, kf)
        cm = cols.reshape(b * t * f, co * kt * kf)
        if x.requires_grad:
            gx = (cm @ wm.T).reshape(b, t, f, ci).transpose(0, 3, 1, 2)
            x._accumulate(gx[0] if squeeze else gx)
        if w.requires_grad:
            w._accumulate((xm.T @ cm).reshape(ci, co, kt, kf))

    return _make(out[0] if squeeze else out, (x, w), bw, "deconv2d")


# -- normalizations ----------------------------------------------------------


def global_layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over every element of x [D, T, F], then per-channel affine.

    gain/bias broadcast as [D, 1, 1]; variance uses the 1/N convention.
    """
    x = as_tensor(x)
    if x.size < 2:
        raise ShapeError("global_layer_norm needs more than one element")
    m = tmean(x, axis=None, keepdims=False)
    centered = sub(x, m)
    v = tmean(mul(centered, centered), axis=None, keepdims=False)
    y = div(centered, sqrt(add(v, eps)))
    g = as_tensor(gain)
    b = as_tensor(bias)
    gx = g.reshape((-1, 1, 1)) if g.ndim == 1 else g
    bx = b.reshape((-1, 1, 1)) if b.ndim == 1 else b
    return add(mul(y, gx), bx)


def rms_group_norm(x, gain, groups: int, eps: float = 1e-5) -> Tensor:
    """Per-position grouped RMS normalization over the channel axis (-2).

    x: [.., D, L]; channels split into `groups` groups; each group divided by
    its root-mean-square; per-channel gain applied afterwards.
    """
    x = as_tensor(x)
    d = x.shape[-2]
    if d % groups != 0:
        raise ConfigError(f"rms_group_norm: {d} channels not divisible by {groups} groups")
    gs = d // groups
    lead = x.shape[:-2]
    l = x.shape[-1]
    xg = reshape(x, lead + (groups, gs, l))
    ms = tmean(mul(xg, xg), axis=-2, keepdims=True)
    y = div(xg, sqrt(add(ms, eps)))
    y = reshape(y, x.shape)
    g = as_tensor(gain)
    gx = g.reshape((-1, 1)) if g.ndim == 1 else g
    return mul(y, gx)


# -- verification oracle -------------------------------------------------------


def finite_diff_check(op, inputs: Sequence[Tensor], h: float = 1e-5,
                      max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    `op(*inputs)` is reduced with sum() to a scalar. Gradients are checked for
    every requires_grad input, coordinate by coordinate (or a seeded random
    subset of `max_coords` coordinates when the input is large).
    """
    for t in inputs:
        if t.requires_grad:
            t.zero_grad()
    out = op(*inputs)
    loss = tsum(out) if out.data.shape != () else out
    backward(loss)

    def f() -> float:
        o = op(*inputs)
        return float(np.sum(o.data))

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        assert t.grad is not None, "analytic gradient missing"
        flat = t.data.reshape(-1)
        gflat = t.grad.reshape(-1)
        n = flat.size
        if max_coords is not None and n > max_coords:
            coords = rng.choice(n, size=max_coords, replace=False)
        else:
            coords = range(n)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            analytic = float(gflat[i])
            rel = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
            worst = max(worst, rel)
    return worst
