"""Minimal deterministic reverse-mode autodiff engine on float64 numpy storage.

Tensors are row-major float64 arrays with an explicit shape record. There is
no broadcasting except scalar-tensor. Gradients are accumulated by replaying
an explicit Tape in reverse recording order.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class ContractError(ValueError):
    """A documented precondition was violated."""


# ---------------------------------------------------------------------------
# Tensor / Parameter / Tape
# ---------------------------------------------------------------------------


class Tensor:
    """N-d float64 array with optional gradient."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the storage."""
        return self.data.reshape(-1)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars may be python floats or size-1 tensors
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        return mul(self, power(other, -1.0))


class Parameter(Tensor):
    """Named trainable tensor; frozen parameters are skipped by optimizers."""

    __slots__ = ("name", "frozen")

    def __init__(self, data, name: str, frozen: bool = False):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.frozen = frozen

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


class _Node:
    __slots__ = ("out", "inputs", "bwd")

    def __init__(self, out, inputs, bwd):
        self.out = out
        self.inputs = inputs
        self.bwd = bwd


_ACTIVE_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of primitive applications; replayed in reverse for grads."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._out_ids: set[int] = set()
        self._cleared = False

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.remove(self)
        return False

    def _record(self, out, inputs, bwd):
        self.nodes.append(_Node(out, inputs, bwd))
        self._out_ids.add(id(out))

    def clear(self):
        self.nodes = []
        self._out_ids = set()
        self._cleared = True

    def backward(self, root: Tensor):
        if self._cleared:
            raise ContractError("backward on a cleared tape")
        if id(root) not in self._out_ids:
            raise ContractError("backward root was not recorded on this tape")
        if root.size != 1:
            raise ContractError(f"backward root must be scalar, got shape {root.shape}")
        root.grad = np.ones_like(root.data)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.bwd(g)):
                if gi is None or not inp.requires_grad:
                    continue
                inp.grad = gi if inp.grad is None else inp.grad + gi


def _maybe_record(out: Tensor, inputs: Sequence[Tensor], bwd: Callable):
    if _ACTIVE_TAPES and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        _ACTIVE_TAPES[-1]._record(out, list(inputs), bwd)
    return out


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x, requires_grad=False)


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# Elementwise primitives
# ---------------------------------------------------------------------------


def _binary_shapes(a: Tensor, b: Tensor):
    """Allow equal shapes, or one side scalar (size 1)."""
    if a.shape == b.shape:
        return
    if a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"shape mismatch {a.shape} vs {b.shape} (only scalar broadcast allowed)")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.sum(g).reshape(t.shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b)
    out = Tensor(a.data + b.data)
    return _maybe_record(out, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b)
    out = Tensor(a.data - b.data)
    return _maybe_record(out, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b)
    out = Tensor(a.data * b.data)
    return _maybe_record(
        out, (a, b), lambda g: (_reduce_to(g * b.data, a), _reduce_to(g * a.data, b))
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data)
    return _maybe_record(out, (a,), lambda g: (-g,))


def sigmoid(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(s)
    return _maybe_record(out, (x,), lambda g: (g * s * (1.0 - s),))


def silu(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(x.data * s)
    return _maybe_record(out, (x,), lambda g: (g * s * (1.0 + x.data * (1.0 - s)),))


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))
    return _maybe_record(out, (x,), lambda g: (g * (x.data > 0.0),))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    out = Tensor(e)
    return _maybe_record(out, (x,), lambda g: (g * e,))


def _domain_guard(x: Tensor, opname: str):
    bad = np.flatnonzero(x.data.reshape(-1) <= 0.0)
    if bad.size:
        raise DomainError(f"{opname} requires strictly positive input; offending flat index {bad[0]}")


def log(x: Tensor) -> Tensor:
    _domain_guard(x, "log")
    out = Tensor(np.log(x.data))
    return _maybe_record(out, (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    _domain_guard(x, "sqrt")
    r = np.sqrt(x.data)
    out = Tensor(r)
    return _maybe_record(out, (x,), lambda g: (g * 0.5 / r,))


def power(x: Tensor, p: float) -> Tensor:
    x = as_tensor(x)
    _domain_guard(x, "power")
    y = np.power(x.data, p)
    out = Tensor(y)
    return _maybe_record(out, (x,), lambda g: (g * p * np.power(x.data, p - 1.0),))


def absolute(x: Tensor) -> Tensor:
    out = Tensor(np.abs(x.data))
    return _maybe_record(out, (x,), lambda g: (g * np.sign(x.data),))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    out = Tensor(np.clip(x.data, lo, hi))
    mask = (x.data > lo) & (x.data < hi)
    return _maybe_record(out, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def mean(x: Tensor) -> Tensor:
    n = x.size
    out = Tensor(np.mean(x.data))
    return _maybe_record(out, (x,), lambda g: (np.full_like(x.data, float(g) / n),))


def tsum(x: Tensor) -> Tensor:
    out = Tensor(np.sum(x.data))
    return _maybe_record(out, (x,), lambda g: (np.full_like(x.data, float(g)),))


def sum_sq(x: Tensor) -> Tensor:
    """Sum of squared entries (realizes squared L2 norms)."""
    out = Tensor(np.sum(x.data * x.data))
    return _maybe_record(out, (x,), lambda g: (2.0 * float(g) * x.data,))


def sum_axis(x: Tensor, axis: int, keepdims: bool = True) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    out = Tensor(np.sum(x.data, axis=axis, keepdims=keepdims))

    def bwd(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape).copy(),)

    return _maybe_record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    return _maybe_record(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)))
    return _maybe_record(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    nd = tensors[0].data.ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"axis {axis} out of range for rank {nd}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _maybe_record(out, tensors, bwd)


def take_rows(x: Tensor, ids) -> Tensor:
    """Gather rows along axis 0 (embedding lookup / batch row select)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= x.shape[0]):
        raise ContractError(f"row index out of range [0, {x.shape[0]})")
    out = Tensor(x.data[ids])

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, ids, g)
        return (gx,)

    return _maybe_record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D @ 2-D, or batched 3-D @ 2-D."""
    if a.data.ndim == 2 and b.data.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul inner dims {a.shape} @ {b.shape}")
        out = Tensor(a.data @ b.data)
        return _maybe_record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))
    if a.data.ndim == 3 and b.data.ndim == 2:
        if a.shape[2] != b.shape[0]:
            raise ShapeError(f"matmul inner dims {a.shape} @ {b.shape}")
        out = Tensor(a.data @ b.data)

        def bwd(g):
            da = g @ b.data.T
            db = np.tensordot(a.data, g, axes=([0, 1], [0, 1]))
            return da, db

        return _maybe_record(out, (a, b), bwd)
    raise ShapeError(f"unsupported matmul ranks {a.data.ndim}, {b.data.ndim}")


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with learnable scale/shift."""
    d = x.shape[-1]
    if scale.shape != (d,) or shift.shape != (d,):
        raise ShapeError(f"scale/shift must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * scale.data + shift.data)

    def bwd(g):
        gy = g * scale.data
        dx = inv * (gy - gy.mean(axis=-1, keepdims=True) - xhat * np.mean(gy * xhat, axis=-1, keepdims=True))
        axes = tuple(range(g.ndim - 1))
        dscale = np.sum(g * xhat, axis=axes)
        dshift = np.sum(g, axis=axes)
        return dx, dscale, dshift

    return _maybe_record(out, (x, scale, shift), bwd)


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention; accepts [N,d] or batched [B,N,d]."""
    squeeze = q.data.ndim == 2
    qd = q.data[None] if squeeze else q.data
    kd = k.data[None] if squeeze else k.data
    vd = v.data[None] if squeeze else v.data
    if qd.shape[-1] != kd.shape[-1] or kd.shape[1] != vd.shape[1]:
        raise ShapeError(f"attention shapes q{q.shape} k{k.shape} v{v.shape}")
    scale = 1.0 / math.sqrt(qd.shape[-1])
    s = np.matmul(qd, kd.transpose(0, 2, 1)) * scale
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    a = e / e.sum(axis=-1, keepdims=True)
    o = np.matmul(a, vd)
    out = Tensor(o[0] if squeeze else o)

    def bwd(g):
        gd = g[None] if squeeze else g
        dv = np.matmul(a.transpose(0, 2, 1), gd)
        da = np.matmul(gd, vd.transpose(0, 2, 1))
        ds = a * (da - np.sum(da * a, axis=-1, keepdims=True))
        dq = np.matmul(ds, kd) * scale
        dk = np.matmul(ds.transpose(0, 2, 1), qd) * scale
        if squeeze:
            dq, dk, dv = dq[0], dk[0], dv[0]
        return dq, dk, dv

    return _maybe_record(out, (q, k, v), bwd)


# ---------------------------------------------------------------------------
# Convolutions
# ---------------------------------------------------------------------------


def _corr(x: np.ndarray, k: np.ndarray, stride: int) -> np.ndarray:
    """Valid cross-correlation: x [B,C,H,W], k [O,C,kh,kw] -> [B,O,Ho,Wo].

    Computed one batch item at a time so each item's reduction order is
    independent of batch size (batch-of-n is bitwise n batches of 1).
    """
    kh, kw = k.shape[2], k.shape[3]
    outs = []
    for i in range(x.shape[0]):
        win = sliding_window_view(x[i], (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
        o = np.tensordot(win, k, axes=([0, 3, 4], [1, 2, 3]))  # [Ho,Wo,O]
        outs.append(o.transpose(2, 0, 1))
    return np.ascontiguousarray(np.stack(outs))


def _pad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _dilate2d(x: np.ndarray, s: int) -> np.ndarray:
    if s == 1:
        return x
    b, c, h, w = x.shape
    out = np.zeros((b, c, (h - 1) * s + 1, (w - 1) * s + 1), dtype=x.dtype)
    out[:, :, ::s, ::s] = x
    return out


def _im2col(xp_i: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """One item [C,Hp,Wp] -> contiguous [Ho*Wo, C*kh*kw]."""
    win = sliding_window_view(xp_i, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    c, ho, wo = win.shape[0], win.shape[1], win.shape[2]
    return np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(ho * wo, c * kh * kw)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D correlation; kernel [Cout,Cin,kh,kw] applied to x [B,Cin,H,W].

    Each batch item is lowered to im2col + gemm independently, so a batch of n
    is bitwise n batches of 1.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input/kernel, got {x.shape}, {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if stride < 1:
        raise ContractError(f"stride must be >= 1, got {stride}")
    kh, kw = kernel.shape[2], kernel.shape[3]
    if kh > x.shape[2] + 2 * padding or kw > x.shape[3] + 2 * padding:
        raise ShapeError(f"kernel {kernel.shape} larger than padded input {x.shape} (padding={padding})")
    if padding > kh - 1 or padding > kw - 1:
        raise ContractError("padding must not exceed kernel_size - 1")
    b, cin = x.shape[0], x.shape[1]
    ho = (x.shape[2] + 2 * padding - kh) // stride + 1
    wo = (x.shape[3] + 2 * padding - kw) // stride + 1
    cout = kernel.shape[0]
    xp = _pad2d(x.data, padding)
    kmat = kernel.data.reshape(cout, -1)
    cols = [_im2col(xp[i], kh, kw, stride) for i in range(b)]
    out_arr = np.empty((b, cout, ho, wo))
    for i in range(b):
        out_arr[i] = (cols[i] @ kmat.T).T.reshape(cout, ho, wo)
    out = Tensor(out_arr)

    def bwd(g):
        dk = np.zeros_like(kmat)
        dxp = np.zeros_like(xp)
        for i in range(b):
            g2d = g[i].reshape(cout, ho * wo)
            dk += g2d @ cols[i]
            dcols = (g2d.T @ kmat).reshape(ho, wo, cin, kh, kw)
            for dy in range(kh):
                for dx in range(kw):
                    dxp[i, :, dy : dy + ho * stride : stride, dx : dx + wo * stride : stride] += (
                        dcols[:, :, :, dy, dx].transpose(2, 0, 1)
                    )
        if padding:
            dxp = dxp[:, :, padding:-padding, padding:-padding]
        return np.ascontiguousarray(dxp), dk.reshape(kernel.shape)

    return _maybe_record(out, (x, kernel), bwd)


def conv_transpose2d(x: Tensor, kernel: Tensor, stride: int = 1) -> Tensor:
    """Transposed convolution (adjoint of conv2d); kernel [Cin,Cout,kh,kw]."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects 4-d input/kernel, got {x.shape}, {kernel.shape}")
    if x.shape[1] != kernel.shape[0]:
        raise ShapeError(f"conv_transpose2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if stride < 1:
        raise ContractError(f"stride must be >= 1, got {stride}")
    kh, kw = kernel.shape[2], kernel.shape[3]
    if kh == stride and kw == stride:
        return _conv_transpose_blocks(x, kernel, stride)
    xd = _pad2d(_dilate2d(x.data, stride), kh - 1)
    kt = np.ascontiguousarray(kernel.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    out = Tensor(_corr(xd, kt, 1))

    def bwd(g):
        dx = _corr(g, kernel.data, stride)
        win = sliding_window_view(g, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        dk = np.tensordot(x.data, win, axes=([0, 2, 3], [0, 2, 3]))
        return dx, np.ascontiguousarray(dk)

    return _maybe_record(out, (x, kernel), bwd)


def _conv_transpose_blocks(x: Tensor, kernel: Tensor, s: int) -> Tensor:
    """kernel s x s with stride s: each input pixel paints one output block."""
    b, cin, h, w = x.shape
    cout = kernel.shape[1]
    kmat = kernel.data.reshape(cin, cout * s * s)
    out_arr = np.empty((b, cout, h * s, w * s))
    for i in range(b):
        t = (x.data[i].reshape(cin, h * w).T @ kmat).reshape(h, w, cout, s, s)
        out_arr[i] = t.transpose(2, 0, 3, 1, 4).reshape(cout, h * s, w * s)
    out = Tensor(out_arr)

    def bwd(g):
        dx = np.empty_like(x.data)
        dk = np.zeros_like(kmat)
        for i in range(b):
            gb = np.ascontiguousarray(
                g[i].reshape(cout, h, s, w, s).transpose(1, 3, 0, 2, 4)
            ).reshape(h * w, cout * s * s)
            dx[i] = (gb @ kmat.T).T.reshape(cin, h, w)
            dk += x.data[i].reshape(cin, h * w) @ gb
        return dx, dk.reshape(kernel.shape)

    return _maybe_record(out, (x, kernel), bwd)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    out = Tensor(np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3))

    def bwd(g):
        b, c, h, w = x.shape
        return (g.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _maybe_record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# Channel-indexed helpers for [B,C,H,W] maps
# ---------------------------------------------------------------------------


def add_channel(x: Tensor, shift: Tensor) -> Tensor:
    """x[b,c,h,w] + shift[c] (or per-item shift[b,c])."""
    if shift.data.ndim == 1:
        s = shift.data[None, :, None, None]
    elif shift.data.ndim == 2:
        s = shift.data[:, :, None, None]
    else:
        raise ShapeError(f"shift must be [C] or [B,C], got {shift.shape}")
    if s.shape[1] != x.shape[1] or (shift.data.ndim == 2 and shift.shape[0] != x.shape[0]):
        raise ShapeError(f"channel shift {shift.shape} does not match map {x.shape}")
    out = Tensor(x.data + s)

    def bwd(g):
        ds = g.sum(axis=(0, 2, 3)) if shift.data.ndim == 1 else g.sum(axis=(2, 3))
        return g, ds

    return _maybe_record(out, (x, shift), bwd)


def channel_scale(x: Tensor, v: Tensor) -> Tensor:
    """x[b,c,h,w] * v[c] (or per-item v[b,c])."""
    if v.data.ndim == 1:
        s = v.data[None, :, None, None]
    elif v.data.ndim == 2:
        s = v.data[:, :, None, None]
    else:
        raise ShapeError(f"scale must be [C] or [B,C], got {v.shape}")
    if s.shape[1] != x.shape[1] or (v.data.ndim == 2 and v.shape[0] != x.shape[0]):
        raise ShapeError(f"channel scale {v.shape} does not match map {x.shape}")
    out = Tensor(x.data * s)

    def bwd(g):
        dx = g * s
        dv = (g * x.data).sum(axis=(0, 2, 3)) if v.data.ndim == 1 else (g * x.data).sum(axis=(2, 3))
        return dx, dv

    return _maybe_record(out, (x, v), bwd)


def channel_sum(x: Tensor) -> Tensor:
    """Sum over the channel axis, keeping a singleton channel."""
    out = Tensor(x.data.sum(axis=1, keepdims=True))
    return _maybe_record(out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each row of x [B,D] by a per-row scalar s [B,1]."""
    if s.data.ndim != 2 or s.shape != (x.shape[0], 1):
        raise ShapeError(f"row scale must be [{x.shape[0]},1], got {s.shape}")
    out = Tensor(x.data * s.data)

    def bwd(g):
        return g * s.data, np.sum(g * x.data, axis=-1, keepdims=True)

    return _maybe_record(out, (x, s), bwd)


def bias_add_last(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector over the last axis of a 2-d or 3-d tensor."""
    if b.data.ndim != 1 or b.shape[0] != x.shape[-1]:
        raise ShapeError(f"bias {b.shape} does not match last axis of {x.shape}")
    out = Tensor(x.data + b.data)
    axes = tuple(range(x.data.ndim - 1))
    return _maybe_record(out, (x, b), lambda g: (g, g.sum(axis=axes)))


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    Error metric: max over coordinates of |analytic - numeric| / max(1, |numeric|).
    """
    inputs = list(inputs)
    zero_grads(inputs)
    with Tape() as tape:
        out = f(*inputs)
        if out.size != 1:
            raise ContractError(f"grad_check target must be scalar, got shape {out.shape}")
        tape.backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in inputs]
    worst = 0.0
    for p, ana in zip(inputs, analytic):
        flat = p.data.reshape(-1)
        aflat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*inputs).item()
            flat[i] = orig - h
            fm = f(*inputs).item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            err = abs(aflat[i] - num) / max(1.0, abs(num))
            worst = max(worst, err)
    return worst
