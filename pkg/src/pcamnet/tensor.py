"""Dense float64 tensors and a reverse-mode gradient tape.

Operations record themselves on the innermost active :class:`GradTape`
whenever one of their inputs has ``requires_grad`` set. Outside a tape
everything runs eagerly with no bookkeeping, which is what inference uses.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with GradTape() as tape:
    ...     y = reduce_sum(x * x)
    >>> tape.backward(y)[x.id].data
    array([2., 4.])

Spatial operations take ``(C, H, W, S)`` or batched ``(B, C, H, W, S)``
arrays; the last three axes are always the spatial ones.
"""
from __future__ import annotations

import itertools
import struct
import threading
from typing import BinaryIO, Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

__all__ = [
    "Tensor", "GradTape", "current_tape",
    "add", "sub", "mul", "div", "scale", "neg", "exp", "log",
    "matmul", "softmax", "leaky_relu", "reduce_sum", "reduce_mean",
    "reshape", "permute", "concat", "stack", "select",
    "conv3d", "instance_norm", "maxpool3d", "upsample_trilinear",
    "tensor_to_bytes", "tensor_from_bytes", "save_tensor", "load_tensor",
]

_ids = itertools.count()
_local = threading.local()


class Tensor:
    """N-dimensional array of 64-bit reals.

    ``data`` is a contiguous row-major ``numpy.ndarray``. Shape-changing
    operations return new tensors; the shape of an existing one never
    changes.
    """

    __slots__ = ("data", "requires_grad", "grad", "id")
    __array_priority__ = 1000  # ndarray <op> Tensor defers to Tensor

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: Tensor | None = None
        self.id = next(_ids)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        # ascontiguousarray would promote 0-d arrays to 1-d
        t.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        t.requires_grad = False
        t.grad = None
        t.id = next(_ids)
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    @property
    def T(self):
        return permute(self, tuple(range(self.ndim))[::-1])

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class GradTape:
    """Append-only record of differentiable operations.

    Use as a context manager; tapes nest per thread and are never shared
    between threads. :meth:`backward` may run once per recording; call
    :meth:`reset` to record again.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.gradients: dict[int, Tensor] = {}
        self._consumed = False

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.remove(self)
        return False

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward: Callable):
        self.nodes.append(_Node(op, tuple(inputs), output, backward))

    def reset(self):
        self.nodes.clear()
        self.gradients = {}
        self._consumed = False

    def backward(self, loss: Tensor) -> dict[int, Tensor]:
        """Populate gradients of ``loss`` w.r.t. every recorded ancestor.

        Returns a map from tensor id to gradient and also sets ``.grad`` on
        each ``requires_grad`` tensor reached.
        """
        if self._consumed:
            raise ContractError("backward already ran on this tape; call reset() first")
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._consumed = True
        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
        owners: dict[int, Tensor] = {loss.id: loss}
        for node in reversed(self.nodes):
            g = grads.get(node.output.id)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if gi.shape != inp.shape:
                    raise DimensionError(
                        f"{node.op}: gradient shape {gi.shape} != input shape {inp.shape}")
                if inp.id in grads:
                    grads[inp.id] = grads[inp.id] + gi
                else:
                    grads[inp.id] = gi
                    owners[inp.id] = inp
        self.gradients = {k: Tensor._wrap(v) for k, v in grads.items()}
        for k, t in owners.items():
            if t.requires_grad or t is loss:
                t.grad = self.gradients[k]
        return self.gradients

    def grad(self, t: Tensor) -> Tensor | None:
        return self.gradients.get(t.id)


def current_tape() -> GradTape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, arr: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor._wrap(arr)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, inputs, out, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _broadcast_shape(a, b, "add")
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _broadcast_shape(a, b, "sub")
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _broadcast_shape(a, b, "mul")
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _emit("div", out, (a, b), backward)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return _emit("scale", x.data * s, (x,), lambda g: (g * s,))


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _emit("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericError("log of non-positive value")
    return _emit("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    pos = x.data > 0
    factor = np.where(pos, 1.0, slope)
    return _emit("leaky_relu", x.data * factor, (x,), lambda g: (g * factor,))


# ------------------------------------------------------------------ reductions

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, (int, np.integer)) else tuple(axis)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise DimensionError(f"axis {a} out of range for rank {ndim}")
        out.append(a % ndim)
    return tuple(sorted(set(out)))


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("reduce_sum", out, (x,), backward)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(reduce_sum(x, axes, keepdims), 1.0 / count)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtracted)."""
    (ax,) = _norm_axes(axis, x.ndim)
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax input contains non-finite values")
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return _emit("softmax", out, (x,), backward)


# -------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes must match."""
    a, b = _t(a), _t(b)
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise DimensionError(f"matmul needs equal-rank >=2D operands, got {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        return (np.matmul(g, np.swapaxes(b.data, -1, -2)),
                np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _emit("matmul", out, (a, b), backward)


# ------------------------------------------------------------- shape handling

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from exc
    return _emit("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)) or len(axes) != x.ndim:
        raise DimensionError(f"invalid permutation {axes} for rank {x.ndim}")
    inv = tuple(np.argsort([a % x.ndim for a in axes]))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return _emit("permute", out, (x,), lambda g: (np.ascontiguousarray(np.transpose(g, inv)),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_t(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of nothing")
    (ax,) = _norm_axes(axis, tensors[0].ndim)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat shape mismatch {ref} vs {t.shape} on axis {ax}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=ax))

    return _emit("concat", out, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_t(t) for t in tensors]
    if not tensors or any(t.shape != tensors[0].shape for t in tensors):
        raise DimensionError("stack needs one or more equally shaped tensors")
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.ascontiguousarray(np.take(g, i, axis=axis)) for i in range(len(tensors)))

    return _emit("stack", out, tensors, backward)


def select(x: Tensor, index: int) -> Tensor:
    """``x[index]`` along the leading axis."""
    if not -x.shape[0] <= index < x.shape[0]:
        raise DimensionError(f"index {index} out of range for leading extent {x.shape[0]}")

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _emit("select", x.data[index], (x,), backward)


# ------------------------------------------------------------ volumetric ops

def _triple(v, name: str) -> tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise DimensionError(f"{name} must be an int or a triple, got {v}")
    return v


def _batched(x: Tensor, op: str):
    if x.ndim == 5:
        return x.data, False
    if x.ndim == 4:
        return x.data[None], True
    raise DimensionError(f"{op} expects (C,H,W,S) or (B,C,H,W,S), got {x.shape}")


def conv3d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride=1, padding=None) -> Tensor:
    """3D cross-correlation with zero padding.

    ``w`` has shape ``(C_out, C_in, kh, kw, ks)`` with odd kernel extents;
    the default padding keeps extents unchanged at stride 1.
    """
    xd, squeeze = _batched(x, "conv3d")
    if w.ndim != 5 or w.shape[1] != xd.shape[1]:
        raise DimensionError(f"kernel {w.shape} incompatible with input {x.shape}")
    k = w.shape[2:]
    if any(e % 2 == 0 for e in k):
        raise DimensionError(f"kernel extents must be odd, got {k}")
    st = _triple(stride, "stride")
    pad = tuple(e // 2 for e in k) if padding is None else _triple(padding, "padding")
    B, _, H, W, S = xd.shape
    out_ext = tuple((n + 2 * p - kk) // s + 1 for n, p, kk, s in zip((H, W, S), pad, k, st))
    if any(n + 2 * p < kk for n, p, kk in zip((H, W, S), pad, k)) or min(out_ext) < 1:
        raise DimensionError(f"input extents {(H, W, S)} too small for kernel {k}")
    if bias is not None and bias.shape != (w.shape[0],):
        raise DimensionError(f"bias shape {bias.shape} != ({w.shape[0]},)")
    if st == (1, 1, 1) and pad == tuple(e // 2 for e in k):
        out, grad_xw = _conv_same(xd, w.data)
    else:
        out, grad_xw = _conv_general(xd, w.data, st, pad, out_ext)
    if bias is not None:
        out += bias.data[None, :, None, None, None]

    def backward(g):
        g5 = g[None] if squeeze else g
        gx, gw = grad_xw(g5)
        grads = [gx[0] if squeeze else gx, gw]
        if bias is not None:
            grads.append(g5.sum(axis=(0, 2, 3, 4)))
        return tuple(grads)

    inputs = (x, w) if bias is None else (x, w, bias)
    return _emit("conv3d", out[0] if squeeze else out, inputs, backward)


_CHUNK = 1 << 15  # columns per im2col block; bounds temporary memory


def _shifted_sum(X: np.ndarray, wk: np.ndarray, offs: list[int], m: int) -> np.ndarray:
    """``R[:, q] = sum_k wk[k] @ X[:, q + offs[k]]`` for ``m <= q < N - m`` (zero elsewhere).

    Uses whichever of im2col (copies of the input side) or a stacked GEMM
    followed by shifted adds (copies of the output side) moves fewer values.
    """
    K, Co, Ci = wk.shape
    N = X.shape[1]
    R = np.zeros((Co, N))
    if Ci <= Co:
        wm = wk.transpose(1, 0, 2).reshape(Co, K * Ci)
        for lo in range(m, N - m, _CHUNK):
            hi = min(lo + _CHUNK, N - m)
            cols = np.empty((K * Ci, hi - lo))
            for j, off in enumerate(offs):
                cols[j * Ci:(j + 1) * Ci] = X[:, lo + off:hi + off]
            R[:, lo:hi] = wm @ cols
    else:
        group = max(1, min(K, 9))
        for g0 in range(0, K, group):
            ks = range(g0, min(K, g0 + group))
            Y = wk[g0:g0 + len(ks)].reshape(-1, Ci) @ X
            for j, kk in enumerate(ks):
                off = offs[kk]
                R[:, m:N - m] += Y[j * Co:(j + 1) * Co, m + off:N - m + off]
    return R


def _conv_same(xd: np.ndarray, wd: np.ndarray):
    # Volumes are zero-padded and flattened to (C, B*Hp*Wp*Sp); every kernel
    # tap then becomes a constant column shift.
    B, Ci, H, W, S = xd.shape
    Co, _, k0, k1, k2 = wd.shape
    p = (k0 // 2, k1 // 2, k2 // 2)
    Hp, Wp, Sp = H + 2 * p[0], W + 2 * p[1], S + 2 * p[2]
    N = B * Hp * Wp * Sp
    inner = (slice(None), slice(None), slice(p[0], p[0] + H), slice(p[1], p[1] + W),
             slice(p[2], p[2] + S))

    def to_flat(a):
        buf = np.zeros((a.shape[1], B, Hp, Wp, Sp))
        buf[inner] = a.transpose(1, 0, 2, 3, 4)
        return buf.reshape(a.shape[1], N)

    def from_flat(R):
        return np.ascontiguousarray(R.reshape(-1, B, Hp, Wp, Sp)[inner].transpose(1, 0, 2, 3, 4))

    taps = list(itertools.product(range(k0), range(k1), range(k2)))
    offs = [(a - p[0]) * Wp * Sp + (b - p[1]) * Sp + (c - p[2]) for a, b, c in taps]
    m = max(abs(o) for o in offs)
    wk = wd.transpose(2, 3, 4, 0, 1).reshape(len(taps), Co, Ci)
    X = to_flat(xd)
    out = from_flat(_shifted_sum(X, wk, offs, m))

    def grad_xw(g5):
        G = to_flat(g5)
        gx = from_flat(_shifted_sum(G, np.ascontiguousarray(wk.transpose(0, 2, 1)),
                                    [-o for o in offs], m))
        Gm = G[:, m:N - m]
        gw = np.empty((len(taps), Co, Ci))
        for j, off in enumerate(offs):
            gw[j] = Gm @ X[:, m + off:N - m + off].T
        return gx, np.ascontiguousarray(gw.reshape(k0, k1, k2, Co, Ci).transpose(3, 4, 0, 1, 2))

    return out, grad_xw


def _conv_general(xd, wd, st, pad, out_ext):
    B, Ci, H, W, S = xd.shape
    xp = np.pad(xd, ((0, 0), (0, 0)) + tuple((q, q) for q in pad)) if any(pad) else xd
    Ho, Wo, So = out_ext

    def window(a, b, c):
        return (slice(None), slice(None),
                slice(a, a + st[0] * (Ho - 1) + 1, st[0]),
                slice(b, b + st[1] * (Wo - 1) + 1, st[1]),
                slice(c, c + st[2] * (So - 1) + 1, st[2]))

    taps = list(itertools.product(*(range(e) for e in wd.shape[2:])))
    out = np.zeros((B, wd.shape[0], Ho, Wo, So))
    for a, b, c in taps:
        out += np.einsum("oi,bihws->bohws", wd[:, :, a, b, c], xp[window(a, b, c)], optimize=True)

    def grad_xw(g5):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wd)
        for a, b, c in taps:
            sl = window(a, b, c)
            gw[:, :, a, b, c] = np.einsum("bohws,bihws->oi", g5, xp[sl], optimize=True)
            gxp[sl] += np.einsum("oi,bohws->bihws", wd[:, :, a, b, c], g5, optimize=True)
        gx = gxp[(slice(None), slice(None)) + tuple(slice(q, q + n) for q, n in zip(pad, (H, W, S)))]
        return np.ascontiguousarray(gx), gw

    return out, grad_xw


def instance_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
                  eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalisation over the spatial axes, then affine."""
    xd, squeeze = _batched(x, "instance_norm")
    C = xd.shape[1]
    n = int(np.prod(xd.shape[2:]))
    if n < 2:
        raise DimensionError(f"instance_norm needs >= 2 spatial voxels, got {xd.shape[2:]}")
    for p in (weight, bias):
        if p is not None and p.shape != (C,):
            raise DimensionError(f"affine parameter shape {p.shape} != ({C},)")
    axes = (2, 3, 4)
    mu = xd.mean(axis=axes, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    gamma = np.ones(C) if weight is None else weight.data
    out = xhat * gamma[None, :, None, None, None]
    if bias is not None:
        out = out + bias.data[None, :, None, None, None]

    def backward(g):
        g5 = g[None] if squeeze else g
        gxhat = g5 * gamma[None, :, None, None, None]
        gx = inv * (gxhat - gxhat.mean(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True))
        grads = [gx[0] if squeeze else gx]
        if weight is not None:
            grads.append((g5 * xhat).sum(axis=(0, 2, 3, 4)))
        if bias is not None:
            grads.append(g5.sum(axis=(0, 2, 3, 4)))
        return tuple(grads)

    inputs = [x] + [p for p in (weight, bias) if p is not None]
    return _emit("instance_norm", out[0] if squeeze else out, inputs, backward)


def maxpool3d(x: Tensor, window=2, stride=None) -> Tensor:
    """Max over (possibly overlapping) windows of the spatial axes.

    Extents must tile exactly: ``(n - window) % stride == 0`` per axis.
    """
    k = _triple(window, "window")
    st = k if stride is None else _triple(stride, "stride")
    lead, sp = x.shape[:-3], x.shape[-3:]
    if x.ndim < 3:
        raise DimensionError(f"maxpool3d needs >= 3 axes, got {x.shape}")
    for n, kk, s in zip(sp, k, st):
        if kk < 1 or s < 1 or n < kk or (n - kk) % s:
            raise DimensionError(f"extents {sp} not divisible by window {k} / stride {st}")
    out_ext = tuple((n - kk) // s + 1 for n, kk, s in zip(sp, k, st))
    xd = x.data
    if k == st:
        # non-overlapping: pure reshape, no window copies
        r = xd.reshape(lead + (out_ext[0], k[0], out_ext[1], k[1], out_ext[2], k[2]))
        nl = len(lead)
        order = tuple(range(nl)) + tuple(nl + i for i in (0, 2, 4, 1, 3, 5))
        win = r.transpose(order).reshape(lead + out_ext + (-1,))
    else:
        v = np.lib.stride_tricks.sliding_window_view(xd, k, axis=(-3, -2, -1))
        v = v[..., ::st[0], ::st[1], ::st[2], :, :, :]
        win = v.reshape(lead + out_ext + (-1,))
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        if k == st:
            gw = np.zeros(lead + out_ext + (k[0] * k[1] * k[2],))
            np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
            nl = len(lead)
            gw = gw.reshape(lead + out_ext + k)
            inv = tuple(range(nl)) + tuple(nl + i for i in (0, 3, 1, 4, 2, 5))
            return (np.ascontiguousarray(gw.transpose(inv)).reshape(x.shape),)
        gx = np.zeros_like(xd)
        da, db, dc = np.unravel_index(arg, k)
        grid = np.indices(out_ext)
        ia = grid[0] * st[0] + da
        ib = grid[1] * st[1] + db
        ic = grid[2] * st[2] + dc
        flat_sp = (ia * sp[1] + ib) * sp[2] + ic
        gflat = gx.reshape(lead + (-1,))
        base = gflat.reshape(-1, gflat.shape[-1])
        idx = flat_sp.reshape(-1, int(np.prod(out_ext)))
        gg = g.reshape(-1, int(np.prod(out_ext)))
        for row in range(base.shape[0]):
            np.add.at(base[row], idx[row], gg[row])
        return (gx,)

    return _emit("maxpool3d", out, (x,), backward)


def _interp_matrix(n: int, factor: int) -> np.ndarray:
    # half-pixel aligned linear interpolation, clamped at the ends
    m = np.zeros((n * factor, n))
    for o in range(n * factor):
        src = (o + 0.5) / factor - 0.5
        src = min(max(src, 0.0), n - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


def _apply_axis(arr: np.ndarray, mat: np.ndarray, axis: int) -> np.ndarray:
    moved = np.moveaxis(arr, axis, -1)
    return np.ascontiguousarray(np.moveaxis(moved @ mat.T, -1, axis))


def upsample_trilinear(x: Tensor, factor: int = 2) -> Tensor:
    """Separable trilinear upsampling of the spatial axes by an integer factor."""
    if x.ndim < 3 or factor < 1:
        raise DimensionError(f"upsample needs >= 3 axes and factor >= 1, got {x.shape}, {factor}")
    mats = [_interp_matrix(n, factor) for n in x.shape[-3:]]
    out = x.data
    for i, m in enumerate(mats):
        out = _apply_axis(out, m, x.ndim - 3 + i)

    def backward(g):
        for i, m in enumerate(mats):
            g = _apply_axis(g, m.T, x.ndim - 3 + i)
        return (g,)

    return _emit("upsample_trilinear", out, (x,), backward)


# -------------------------------------------------------------- serialization

TENSOR_MAGIC = b"PCAMT1"


def tensor_to_bytes(t) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    header = TENSOR_MAGIC + struct.pack(f"<Q{arr.ndim}Q", arr.ndim, *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_tensor(fh: BinaryIO, t) -> None:
    fh.write(tensor_to_bytes(t))


def load_tensor(fh: BinaryIO) -> Tensor:
    magic = fh.read(len(TENSOR_MAGIC))
    if magic != TENSOR_MAGIC:
        raise ContractError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<Q", fh.read(8))
    shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
    count = int(np.prod(shape)) if rank else 1
    raw = fh.read(8 * count)
    if len(raw) != 8 * count:
        raise ContractError("truncated tensor payload")
    return Tensor._wrap(np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64))


def tensor_from_bytes(buf: bytes) -> Tensor:
    import io
    return load_tensor(io.BytesIO(buf))
