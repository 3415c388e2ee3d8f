"""Minimal dense tensor with tape-based reverse-mode differentiation.

Storage is float32 (float64 tensors are carried through unchanged, which the
gradient checker uses for tight finite differences).  Reductions and matrix
products accumulate in float64 and cast back.

Every op records a :class:`TapeNode` on its output when any input requires a
gradient and recording is enabled (see :func:`no_grad`).
"""

from __future__ import annotations

import contextlib
import io
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import DimensionError, EmptyTargetError, EvaluationError

MAGIC = b"PSFK1"
IGNORE_INDEX = 255

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


@dataclass
class TapeNode:
    op: str
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    saved: dict = field(default_factory=dict)


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype == np.float64:
        return arr
    return arr.astype(np.float32, copy=False)


class Tensor:
    """Dense row-major array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "node", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node: Optional[TapeNode] = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _size_error(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        src = self

        def back(g):
            return (g.astype(src.dtype),)

        return _make(self.data.astype(dtype), "astype", (self,), back)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})\n{self.data!r}"

    def __len__(self) -> int:
        return len(self.data)

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.shape)

        order = _topo_order(self)
        grads = {id(self): grad}
        for t in order:
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.node is None:
                if t.requires_grad:
                    t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            in_grads = t.node.backward(g)
            for inp, ig in zip(t.node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                ig = np.asarray(ig, dtype=inp.data.dtype)
                if ig.shape != inp.shape:
                    ig = ig.reshape(inp.shape)
                prev = grads.get(id(inp))
                grads[id(inp)] = ig if prev is None else prev + ig

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
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _size_error(t):
    raise DimensionError(f"item() needs a single element, got shape {t.shape}")


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, emitted = stack.pop()
        if emitted:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    order.reverse()
    return order


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64).astype(np.float32))


def _make(data: np.ndarray, op: str, inputs: tuple, backward, **saved) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise EvaluationError(f"non-finite values produced by op '{op}'")
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = TapeNode(op, inputs, backward, saved)
    return out


def _result_dtype(*ts: Tensor):
    return np.result_type(*(t.data.dtype for t in ts))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_check(a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# -- elementwise ------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_check(a, b)
    out = (a.data + b.data).astype(_result_dtype(a, b), copy=False)
    return _make(out, "add", (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_check(a, b)
    out = (a.data - b.data).astype(_result_dtype(a, b), copy=False)
    return _make(out, "sub", (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_check(a, b)
    out = (a.data * b.data).astype(_result_dtype(a, b), copy=False)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, "mul", (a, b), back)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_check(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (a.data / b.data).astype(_result_dtype(a, b), copy=False)

    def back(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * a.data / (b.data * b.data), b.shape)

    return _make(out, "div", (a, b), back)


def power(a: Tensor, exponent: float) -> Tensor:
    a = _lift(a)
    p = float(exponent)
    out = np.power(a.data, p).astype(a.dtype, copy=False)
    return _make(out, "pow", (a,), lambda g: (g * p * np.power(a.data, p - 1),))


def exp(a: Tensor) -> Tensor:
    a = _lift(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    a = _lift(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, "log", (a,), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    a = _lift(a)
    mask = a.data > 0
    return _make(a.data * mask, "relu", (a,), lambda g: (g * mask,))


# -- reductions and shape ---------------------------------------------------
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _make(np.asarray(out), "sum", (a,), back)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape),)

    return _make(np.asarray(out), "mean", (a,), back)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc
    return _make(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(out, "transpose", (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def back(g):
        full = np.zeros(a.shape, dtype=a.dtype)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out), "getitem", (a,), back)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty list")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from exc
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors)))

    return _make(out, "concat", tuple(tensors), back)


def split(a: Tensor, parts: int, axis: int = -1) -> list:
    """Split into ``parts`` equal contiguous pieces along ``axis``."""
    ax = axis % a.ndim
    n = a.shape[ax]
    if parts < 1 or n % parts:
        raise DimensionError(f"extent {n} not divisible into {parts} parts")
    w = n // parts
    idx = [slice(None)] * a.ndim
    pieces = []
    for k in range(parts):
        idx[ax] = slice(k * w, (k + 1) * w)
        pieces.append(getitem(a, tuple(idx)))
    return pieces


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


# -- linear algebra -----------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    dt = _result_dtype(a, b)
    a64, b64 = a.data.astype(np.float64), b.data.astype(np.float64)
    out = (a64 @ b64).astype(dt)

    def back(g):
        g64 = g.astype(np.float64)
        return (g64 @ b64.T).astype(dt), (a64.T @ g64).astype(dt)

    return _make(out, "matmul", (a, b), back)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, stabilised by subtracting the row max."""
    x = _lift(x)
    z = x.data.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y64 = e / e.sum(axis=-1, keepdims=True)
    y = y64.astype(x.dtype)

    def back(g):
        g64 = g.astype(np.float64)
        return (y64 * (g64 - (g64 * y64).sum(axis=-1, keepdims=True)),)

    return _make(y, "softmax_rows", (x,), back)


# -- convolution / normalisation / resampling ------------------------------
def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an N×C×H×W input with an OC×C×kh×kw kernel."""
    x, w = _lift(x), _lift(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects N×C×H×W input and OC×C×kh×kw kernel, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    oc, c2, kh, kw = w.shape
    if c != c2:
        raise DimensionError(f"conv2d channel mismatch: input {c}, kernel {c2}")
    if b is not None and b.shape != (oc,):
        raise DimensionError(f"conv2d bias must have shape ({oc},), got {b.shape}")
    s, p = int(stride), int(padding)
    oh = (h + 2 * p - kh) // s + 1
    ow = (wd + 2 * p - kw) // s + 1
    if oh < 1 or ow < 1:
        raise DimensionError(f"conv2d kernel {kh}x{kw} larger than padded input {h}x{wd}")
    dt = _result_dtype(x, w) if b is None else _result_dtype(x, w, b)
    xp = np.pad(x.data.astype(np.float64), ((0, 0), (0, 0), (p, p), (p, p)))
    cols = _im2col(xp, kh, kw, s, oh, ow)
    cmat = cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * kh * kw)
    wmat = w.data.astype(np.float64).reshape(oc, -1)
    y = cmat @ wmat.T
    if b is not None:
        y += b.data.astype(np.float64)
    out = y.reshape(n, oh, ow, oc).transpose(0, 3, 1, 2).astype(dt)

    def back(g):
        g2 = g.astype(np.float64).transpose(0, 2, 3, 1).reshape(-1, oc)
        gw = (g2.T @ cmat).reshape(w.shape)
        gcols = (g2 @ wmat).reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        gxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + s * oh : s, j : j + s * ow : s] += gcols[:, :, i, j]
        gx = gxp[:, :, p : p + h, p : p + wd]
        gb = g2.sum(axis=0) if b is not None else None
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _make(out, "conv2d", inputs, back)


def batchnorm2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation of an N×C×H×W input.

    In training mode the batch statistics normalise the input and the running
    buffers are updated in place (unbiased variance, like the usual convention);
    otherwise the running buffers are used and left untouched.
    """
    x = _lift(x)
    if x.ndim != 4 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"batchnorm2d expects N×{weight.shape[0]}×H×W, got {x.shape}")
    dt = x.dtype
    x64 = x.data.astype(np.float64)
    axes = (0, 2, 3)
    m = x.shape[0] * x.shape[2] * x.shape[3]
    if training:
        mean = x64.mean(axis=axes)
        var = x64.var(axis=axes)
        unbiased = var * m / max(m - 1, 1)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mean = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x64 - mean[None, :, None, None]) * inv[None, :, None, None]
    gamma = weight.data.astype(np.float64)[None, :, None, None]
    out = (xhat * gamma + bias.data.astype(np.float64)[None, :, None, None]).astype(dt)

    def back(g):
        g64 = g.astype(np.float64)
        gbeta = g64.sum(axis=axes)
        ggamma = (g64 * xhat).sum(axis=axes)
        gxhat = g64 * gamma
        if training:
            s1 = gxhat.sum(axis=axes, keepdims=True)
            s2 = (gxhat * xhat).sum(axis=axes, keepdims=True)
            gx = inv[None, :, None, None] / m * (m * gxhat - s1 - xhat * s2)
        else:
            gx = gxhat * inv[None, :, None, None]
        return gx, ggamma, gbeta

    return _make(out, "batchnorm2d", (x, weight, bias), back)


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Row-stochastic linear interpolation matrix, half-pixel centres."""
    a = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    rows = np.arange(n_out)
    np.add.at(a, (rows, i0), 1.0 - frac)
    np.add.at(a, (rows, i1), frac)
    return a


def upsample_bilinear(x: Tensor, size) -> Tensor:
    """Bilinear resize of the last two axes to ``size`` = (H, W)."""
    x = _lift(x)
    if x.ndim < 2:
        raise DimensionError("upsample_bilinear needs at least 2 axes")
    oh, ow = int(size[0]), int(size[1])
    ah = _interp_matrix(oh, x.shape[-2])
    aw = _interp_matrix(ow, x.shape[-1])
    out = (ah @ x.data.astype(np.float64) @ aw.T).astype(x.dtype)
    return _make(out, "upsample_bilinear", (x,), lambda g: (ah.T @ g.astype(np.float64) @ aw,))


# -- losses -------------------------------------------------------------------
def mse(a: Tensor, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    d = a.data.astype(np.float64) - b.data.astype(np.float64)
    n = max(d.size, 1)
    out = np.asarray((d * d).sum() / n).astype(_result_dtype(a, b))

    def back(g):
        ga = 2.0 * float(g) * d / n
        return ga, -ga

    return _make(out, "mse", (a, b), back)


def cross_entropy(logits: Tensor, target, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean softmax cross-entropy; class axis is 1 (or 0 for a single logit vector).

    ``target`` holds integer class ids with the same shape as ``logits`` minus
    its class axis.  Pixels whose target equals ``ignore_index`` do not count.
    """
    logits = _lift(logits)
    t = np.asarray(target.data if isinstance(target, Tensor) else target).astype(np.int64)
    z = logits.data.astype(np.float64)
    if z.ndim == 1:
        z = z[None, :]
        t = t.reshape(1)
    else:
        z = np.moveaxis(z, 1, -1)
    k = z.shape[-1]
    if t.shape != z.shape[:-1]:
        raise DimensionError(f"cross_entropy target shape {t.shape} does not match logits {logits.shape}")
    z = z.reshape(-1, k)
    t = t.reshape(-1)
    valid = t != ignore_index
    nv = int(valid.sum())
    if nv == 0:
        raise EmptyTargetError("cross_entropy target has no non-ignored entries")
    if np.any((t[valid] < 0) | (t[valid] >= k)):
        raise DimensionError(f"cross_entropy target ids outside 0..{k - 1}")
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    se = e.sum(axis=1, keepdims=True)
    lse = (np.log(se) + zmax)[:, 0]
    tv = np.where(valid, t, 0)
    picked = z[np.arange(z.shape[0]), tv]
    out = np.asarray(((lse - picked) * valid).sum() / nv).astype(logits.dtype)

    def back(g):
        p = e / se
        p[np.arange(p.shape[0]), tv] -= 1.0
        p *= valid[:, None] * (float(g) / nv)
        if logits.ndim == 1:
            return (p[0],)
        shp = list(logits.shape)
        moved = shp[:1] + shp[2:] + shp[1:2]
        return (np.moveaxis(p.reshape(moved), -1, 1),)

    return _make(out, "cross_entropy", (logits,), back)


# -- verification oracle --------------------------------------------------------
def grad_check(fn: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-3) -> float:
    """Max relative error between the tape gradient and central differences.

    The error per element is ``|analytic - numeric| / max(1, |numeric|)``.
    ``x`` is perturbed in place and restored.
    """
    if not 0.0 < step <= 0.1:
        raise ValueError(f"step must lie in (0, 0.1], got {step}")
    x.requires_grad = True
    x.grad = None
    out = fn(x)
    if out.size != 1:
        raise DimensionError("grad_check needs a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise EvaluationError("function value is not finite")
    out.backward()
    analytic = np.zeros(x.shape) if x.grad is None else x.grad.astype(np.float64)
    x.grad = None

    flat = x.data.reshape(-1)
    numeric = np.empty(flat.size)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi_x = float(flat[i])
            f_hi = float(fn(x).data)
            flat[i] = orig - step
            lo_x = float(flat[i])
            f_lo = float(fn(x).data)
            flat[i] = orig
            if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
                raise EvaluationError("function value is not finite under perturbation")
            numeric[i] = (f_hi - f_lo) / (hi_x - lo_x)
    err = np.abs(analytic.reshape(-1) - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0


# -- serialisation ------------------------------------------------------------------
def write_tensor(fh, t) -> None:
    """Write ``PSFK1`` + u32 rank + u32 extents + little-endian f32 payload."""
    arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f4", order="C")
    fh.write(MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    if arr.ndim:
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def read_tensor(fh) -> Tensor:
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        raise ValueError(f"bad tensor header {magic!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    shape = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
    count = int(np.prod(shape)) if rank else 1
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise ValueError("truncated tensor payload")
    return Tensor(np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape))


def tensor_to_bytes(t) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, t)
    return buf.getvalue()


def tensor_from_bytes(blob: bytes) -> Tensor:
    return read_tensor(io.BytesIO(blob))


def parameters_zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
