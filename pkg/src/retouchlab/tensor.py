"""Dense tensors with reverse-mode automatic differentiation.

Every network operation in this package is built from the primitives here.
Data lives in row-major numpy arrays (NCHW for images/features). Recording
is tape-based: each primitive that participates in differentiation appends
one node to a thread-confined tape, and ``backward`` replays the tape once
in reverse recording order, then consumes it.

float32 is the training dtype; float64 is used by the finite-difference
gradient checker, where float32 rounding would drown the comparison.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import NonFiniteError, ShapeError

Scalar = Union[int, float]

_EPS_DIV = 1e-8

# Keep multi-megabyte array allocations on the malloc heap so freed blocks
# are recycled warm between training iterations (mmap/munmap churn would
# page-fault every fresh feature map). Harmless no-op off glibc.
try:
    import ctypes

    ctypes.CDLL("libc.so.6").mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
except Exception:  # pragma: no cover - non-glibc platforms
    pass

# The batched GEMMs here are far too small for BLAS worker threads to pay
# for their synchronization; one thread is consistently faster.
try:
    from threadpoolctl import threadpool_limits

    _BLAS_LIMIT = threadpool_limits(limits=1, user_api="blas")
except Exception:  # pragma: no cover - keep going with library defaults
    _BLAS_LIMIT = None

_state = threading.local()


def _tls():
    if not hasattr(_state, "tape"):
        _state.tape = []
        _state.grad_enabled = True
        _state.finite_checks = True
        _state.ws = {}
    return _state


class no_grad:
    """Context manager: skip tape recording inside the block."""

    def __enter__(self):
        s = _tls()
        self._prev = s.grad_enabled
        s.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _tls().grad_enabled = self._prev
        return False


def set_finite_checks(enabled: bool) -> bool:
    """Toggle post-op NaN/Inf validation; returns the previous setting."""
    s = _tls()
    prev = s.finite_checks
    s.finite_checks = enabled
    return prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not _tls().finite_checks or arr.size == 0:
        return
    # single-pass guard: any NaN/Inf poisons the float64 sum
    if not math.isfinite(float(np.sum(arr, dtype=np.float64))):
        raise NonFiniteError(op)


def _workspace(shape: tuple, dtype) -> np.ndarray:
    """Reusable scratch buffer (per thread, per shape).

    Only for arrays fully overwritten before use and not retained past the
    enclosing primitive; avoids repeated mmap/page-fault cost on large
    im2col buffers in the training loop.
    """
    ws = _tls().ws
    key = (shape, np.dtype(dtype).char)
    buf = ws.get(key)
    if buf is None:
        buf = np.empty(shape, dtype)
        ws[key] = buf
    return buf


class Tensor:
    """N-dimensional real array, optionally tracked for gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_leaf", "_on_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        else:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float32)
        if arr.dtype not in (np.float32, np.float64):
            raise ValueError(f"unsupported dtype {arr.dtype}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._leaf = True
        self._on_tape = False

    # -- introspection ----------------------------------------------------
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

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class _Node:
    # holds a strong ref to its output so id()s stay unique for the tape's life
    __slots__ = ("op", "inputs", "out", "backward")

    def __init__(self, op: str, inputs: tuple, out: "Tensor", backward: Callable):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward = backward


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
            backward: Callable) -> Tensor:
    """Finalize a primitive: validate output, wrap it, push a tape node."""
    _check_finite(out_data, op)
    out = Tensor(out_data)
    s = _tls()
    if s.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._leaf = False
        out._on_tape = True
        s.tape.append(_Node(op, tuple(inputs), out, backward))
    return out


def tape_size() -> int:
    return len(_tls().tape)


def clear_tape() -> None:
    _tls().tape = []


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    The recorded graph is consumed: a second backward needs a new forward.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    s = _tls()
    tape = s.tape
    s.tape = []
    if not tape and not loss._leaf:
        raise RuntimeError("compute graph already consumed; rerun the forward pass")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss.requires_grad and loss._leaf:
        loss.grad = grads[id(loss)] if loss.grad is None else loss.grad + grads[id(loss)]
    for node in reversed(tape):
        gy = grads.pop(id(node.out), None)
        if gy is None:
            continue
        gxs = node.backward(gy)
        for t, g in zip(node.inputs, gxs):
            if g is None or not t.requires_grad:
                continue
            if t._leaf:
                t.grad = g if t.grad is None else t.grad + g
            else:
                k = id(t)
                if k in grads:
                    grads[k] = grads[k] + g
                else:
                    grads[k] = g


# ---------------------------------------------------------------------------
# broadcasting helpers
# ---------------------------------------------------------------------------

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


def _binary(op: str, a, b, fwd, bwd):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    dtype = a.dtype if isinstance(a, Tensor) else b.dtype
    a = _as_tensor(a, dtype)
    b = _as_tensor(b, dtype)
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: mixed dtypes {a.dtype} vs {b.dtype}")
    try:
        out = fwd(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} vs {b.shape}") from e

    def back(gy):
        ga, gb = bwd(gy, a.data, b.data)
        return (_unbroadcast(ga, a.shape) if ga is not None else None,
                _unbroadcast(gb, b.shape) if gb is not None else None)

    return _record(op, (a, b), out, back)


# ---------------------------------------------------------------------------
# elementwise / arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    return _binary("add", a, b, lambda x, y: x + y, lambda g, x, y: (g, g))


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, lambda x, y: x - y, lambda g, x, y: (g, -g))


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, lambda x, y: x * y, lambda g, x, y: (g * y, g * x))


def _guard_denominator(y: np.ndarray) -> np.ndarray:
    bad = np.abs(y) < _EPS_DIV
    if not bad.any():
        return y
    safe = y.copy()
    safe[bad] = np.where(y[bad] < 0, -_EPS_DIV, _EPS_DIV)
    return safe


def div(a, b) -> Tensor:
    def fwd(x, y):
        return x / _guard_denominator(y)

    def bwd(g, x, y):
        ys = _guard_denominator(y)
        return g / ys, -g * x / (ys * ys)

    return _binary("div", a, b, fwd, bwd)


def neg(a: Tensor) -> Tensor:
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def absolute(a: Tensor) -> Tensor:
    return _record("abs", (a,), np.abs(a.data), lambda g: (g * np.sign(a.data),))


def clamp(a: Tensor, lo: Optional[Scalar] = None, hi: Optional[Scalar] = None) -> Tensor:
    out = np.clip(a.data, lo, hi)

    def back(g):
        mask = None
        if lo is not None:
            mask = a.data >= lo
        if hi is not None:
            m2 = a.data <= hi
            mask = m2 if mask is None else (mask & m2)
        return (g if mask is None else g * mask,)

    return _record("clamp", (a,), out, back)


def relu(a: Tensor) -> Tensor:
    return _record("relu", (a,), np.maximum(a.data, 0),
                   lambda g: (g * (a.data > 0),))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    out = np.where(a.data > 0, a.data, a.data * slope)
    return _record("leaky_relu", (a,), out,
                   lambda g: (np.where(a.data > 0, g, g * slope),))


def sigmoid(a: Tensor) -> Tensor:
    # 1/(1+exp(-x)) saturates cleanly in IEEE: exp overflow -> inf -> 0.0
    with np.errstate(over="ignore"):
        out = 1.0 / (1.0 + np.exp(-a.data))
    return _record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    # non-positive inputs produce NaN and are caught by the finite check
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(a.data)
    return _record("log", (a,), out, lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def back(g):
        return (g / (2.0 * np.maximum(out, _EPS_DIV)),)

    return _record("sqrt", (a,), out, back)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size and -1 not in shape:
        raise ShapeError(f"reshape: {a.shape} has {a.size} elements, target {shape}")
    out = a.data.reshape(shape)
    return _record("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _record("permute", (a,), out,
                   lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow: [{start}:{start + length}] out of range for axis "
                         f"{axis} of {a.shape}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = np.ascontiguousarray(a.data[idx])

    def back(g):
        gx = np.zeros_like(a.data)
        gx[idx] = g
        return (gx,)

    return _record("narrow", (a,), out, back)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        s = list(t.shape)
        s[axis] = base[axis]
        if s != base:
            raise ShapeError(f"concat: shape {t.shape} incompatible with {tensors[0].shape}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _record("concat", tuple(tensors), out, back)


def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", (a,), np.asarray(out, dtype=a.dtype), back)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _record("mean", (a,), np.asarray(out, dtype=a.dtype), back)


def amax(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    if len(axes) == 1:
        # single-axis fast path: route the gradient to the first maximum
        ax = axes[0]
        idx = np.argmax(a.data, axis=ax, keepdims=True)
        out = np.take_along_axis(a.data, idx, axis=ax)

        def back_single(g):
            if not keepdims:
                g = np.expand_dims(g, ax)
            gx = np.zeros_like(a.data)
            np.put_along_axis(gx, idx, g, axis=ax)
            return (gx,)

        res = out if keepdims else out.squeeze(axis=ax)
        return _record("amax", (a,), np.ascontiguousarray(res), back_single)

    out = a.data.max(axis=axes, keepdims=True)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        mask = (a.data == out).astype(a.dtype)
        mask /= mask.sum(axis=axes, keepdims=True)
        return (mask * g,)

    res = out if keepdims else out.squeeze(axis=axes)
    return _record("amax", (a,), np.ascontiguousarray(res), back)


def global_avg_pool(a: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C,1,1] mean over the spatial extent."""
    return tmean(a, axis=(2, 3), keepdims=True)


def global_max_pool(a: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C,1,1] max over the spatial extent."""
    n, c, h, w = a.shape
    flat = reshape(a, (n, c, h * w))
    return reshape(amax(flat, axis=2, keepdims=True), (n, c, 1, 1))


def l2_norm(a: Tensor, axis: int, keepdims: bool = True) -> Tensor:
    """Euclidean norm along one axis (composite primitive)."""
    return sqrt(tsum(mul(a, a), axis=axis, keepdims=keepdims))


def half_instance_norm(x: Tensor, scale: Tensor, shift: Tensor,
                       eps: float = 1e-5,
                       leaky: Optional[float] = None) -> Tensor:
    """Instance-normalize the first half of the channels with a learned
    affine; pass the second half through. Fused (single primitive) because
    it sits inside every block of the network. ``leaky`` optionally fuses a
    trailing leaky-relu.
    """
    if x.ndim != 4:
        raise ShapeError(f"half_instance_norm expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if c % 2 != 0:
        raise ShapeError(f"half_instance_norm needs even channels, got {c}")
    half = c // 2
    if scale.shape != (half,) or shift.shape != (half,):
        raise ShapeError(f"affine params must be ({half},), got {scale.shape} "
                         f"and {shift.shape}")
    a = x.data[:, :half]
    mu = a.mean(axis=(2, 3), keepdims=True)
    var = np.maximum((a * a).mean(axis=(2, 3), keepdims=True) - mu * mu, 0.0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (a - mu) * inv_std
    out = np.empty_like(x.data)
    out[:, :half] = xhat * scale.data.reshape(1, half, 1, 1) \
        + shift.data.reshape(1, half, 1, 1)
    out[:, half:] = x.data[:, half:]
    if leaky is not None:
        np.maximum(out, out * leaky, out=out)

    def back(g):
        if leaky is not None:
            g = np.where(out > 0, g, g * leaky)
        ga_out = g[:, :half]
        gxhat = ga_out * scale.data.reshape(1, half, 1, 1)
        m1 = gxhat.mean(axis=(2, 3), keepdims=True)
        m2 = (gxhat * xhat).mean(axis=(2, 3), keepdims=True)
        gx = np.empty_like(x.data)
        gx[:, :half] = (gxhat - m1 - xhat * m2) * inv_std
        gx[:, half:] = g[:, half:]
        gscale = (ga_out * xhat).sum(axis=(0, 2, 3)) if scale.requires_grad else None
        gshift = ga_out.sum(axis=(0, 2, 3)) if shift.requires_grad else None
        return gx, gscale, gshift

    return _record("half_instance_norm", (x, scale, shift), out, back)


# ---------------------------------------------------------------------------
# matmul / softmax
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"matmul: mixed dtypes {a.dtype} vs {b.dtype}")
    out = a.data @ b.data

    def back(g):
        return g @ b.data.T, a.data.T @ g

    return _record("matmul", (a, b), out, back)


def softmax(a: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    if temperature <= 0:
        raise ValueError(f"softmax temperature must be positive, got {temperature}")
    x = a.data / temperature
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot) / temperature,)

    return _record("softmax", (a,), out, back)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv_checks(x: Tensor, w: Tensor, bias: Optional[Tensor], stride: int,
                 padding: int, odd_kernel: bool):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv expects 4-D input/weight, got {x.shape}, {w.shape}")
    kh, kw = w.shape[2:]
    if odd_kernel and (kh % 2 == 0 or kw % 2 == 0):
        raise ShapeError(f"conv kernel must be odd-sized, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} padding={padding}")
    if x.dtype != w.dtype or (bias is not None and bias.dtype != x.dtype):
        raise ShapeError("conv: mixed dtypes")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """(N,C,Hp,Wp) padded input -> (N, C*kh*kw, oh*ow), into a reused buffer."""
    n, c = xp.shape[:2]
    col = _workspace((n, c, kh * kw, oh, ow), xp.dtype)
    k = 0
    for i in range(kh):
        rs = slice(i, i + (oh - 1) * stride + 1, stride)
        for j in range(kw):
            cs = slice(j, j + (ow - 1) * stride + 1, stride)
            col[:, :, k] = xp[:, :, rs, cs]
            k += 1
    return col.reshape(n, c * kh * kw, oh * ow)


def _col2im(colg: np.ndarray, xshape: tuple, kh: int, kw: int, stride: int,
            padding: int, oh: int, ow: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add column gradients back to input layout."""
    n, c, h, w = xshape
    gp = _workspace((n, c, h + 2 * padding, w + 2 * padding), colg.dtype)
    gp[...] = 0.0
    colg = colg.reshape(n, c, kh * kw, oh, ow)
    k = 0
    for i in range(kh):
        rs = slice(i, i + (oh - 1) * stride + 1, stride)
        for j in range(kw):
            cs = slice(j, j + (ow - 1) * stride + 1, stride)
            gp[:, :, rs, cs] += colg[:, :, k]
            k += 1
    if padding:
        return np.ascontiguousarray(gp[:, :, padding:-padding, padding:-padding])
    return gp.copy()


def _pad_input(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    n, c, h, w = x.shape
    xp = _workspace((n, c, h + 2 * padding, w + 2 * padding), x.dtype)
    xp[:, :, :padding, :] = 0.0
    xp[:, :, h + padding:, :] = 0.0
    xp[:, :, padding:h + padding, :padding] = 0.0
    xp[:, :, padding:h + padding, w + padding:] = 0.0
    xp[:, :, padding:h + padding, padding:w + padding] = x
    return xp


def _conv_fwd_slab(xd: np.ndarray, wd_: np.ndarray, padding: int,
                   oh: int, ow: int) -> np.ndarray:
    """Stride-1 conv via per-row-offset GEMMs on contiguous full-width views.

    Avoids materializing the 9x column buffer: each kernel row becomes one
    batched GEMM over the padded rows, and kernel-column shifts fall out as
    slice offsets during accumulation.
    """
    n, c = xd.shape[:2]
    o, _, kh, kw = wd_.shape
    xp = _pad_input(xd, padding)
    wp = xp.shape[3]
    xf = xp.reshape(n, c, xp.shape[2] * wp)
    out = np.zeros((n, o, oh, ow), xd.dtype)
    gbuf = _workspace((n, kw * o, oh * wp), xd.dtype)
    for i in range(kh):
        vi = xf[:, :, i * wp:(i + oh) * wp]
        wi = np.ascontiguousarray(wd_[:, :, i, :].transpose(2, 0, 1)).reshape(kw * o, c)
        np.matmul(wi, vi, out=gbuf)
        gi = gbuf.reshape(n, kw, o, oh, wp)
        for j in range(kw):
            out += gi[:, j, :, :, j:j + ow]
    return out


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0,
           leaky: Optional[float] = None) -> Tensor:
    """Cross-correlation over NCHW input with an [O,C,kH,kW] kernel.

    ``leaky`` optionally fuses a leaky-relu onto the output (identical math
    to a separate activation node, one less full-map round trip).
    """
    _conv_checks(x, w, bias, stride, padding, odd_kernel=True)
    n, c, h, wd = x.shape
    o, wc, kh, kw = w.shape
    if wc != c:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {wc}")
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({o},)")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1

    # slab path wins while contracting channels, im2col while expanding
    if stride == 1 and o <= c:
        out = _conv_fwd_slab(x.data, w.data, padding, oh, ow)
    else:
        xp = _pad_input(x.data, padding)
        col = _im2col(xp, kh, kw, stride, oh, ow)
        out = np.matmul(w.data.reshape(o, c * kh * kw), col).reshape(n, o, oh, ow)
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1)
    if leaky is not None:
        np.maximum(out, out * leaky, out=out)

    def back(gy):
        if leaky is not None:
            # leaky-relu is sign-preserving, so the saved output's sign
            # recovers the pre-activation side
            gy = np.where(out > 0, gy, gy * leaky)
        gf = gy.reshape(n, o, oh * ow)
        gx = gw = gb = None
        if x.requires_grad:
            if stride == 1 and kh - 1 - padding >= 0 and kw - 1 - padding >= 0:
                # input grad = correlation of gy with the flipped, transposed
                # kernel; same slab-vs-im2col dispatch with roles swapped
                wt = np.ascontiguousarray(
                    w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
                if c <= o:
                    gx = _conv_fwd_slab(gy, wt, kh - 1 - padding, h, wd)
                else:
                    gyp = _pad_input(gy, kh - 1 - padding)
                    colg = _im2col(gyp, kh, kw, 1, h, wd)
                    gx = np.matmul(wt.reshape(c, o * kh * kw), colg).reshape(x.shape)
            else:
                colg = np.matmul(w.data.reshape(o, c * kh * kw).T, gf)
                gx = _col2im(colg, x.shape, kh, kw, stride, padding, oh, ow)
        if w.requires_grad:
            # weight grad: gy @ col^T (column buffer recomputed from saved input)
            colb = _im2col(_pad_input(x.data, padding), kh, kw, stride, oh, ow)
            gw = np.matmul(gf, colb.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if bias is not None and bias.requires_grad:
            gb = gy.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, w) if bias is None else (x, w, bias)
    return _record("conv2d", inputs, out, lambda g: back(g)[: len(inputs)])


def conv_transpose2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None,
                     stride: int = 1, padding: int = 0,
                     leaky: Optional[float] = None) -> Tensor:
    """Transposed convolution: the adjoint of conv2d with the same kernel.

    Weight keeps conv2d's [O,C,kH,kW] layout; input carries O channels and
    the output carries C. Bias, when given, has length C. Even kernels are
    legal here (needed for exact stride-2 spatial doubling).
    """
    _conv_checks(x, w, bias, stride, padding, odd_kernel=False)
    n, ci, h, wd = x.shape
    o, c, kh, kw = w.shape
    if ci != o:
        raise ShapeError(f"conv_transpose2d: input has {ci} channels, weight expects {o}")
    oh = (h - 1) * stride - 2 * padding + kh
    ow = (wd - 1) * stride - 2 * padding + kw
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv_transpose2d: output {oh}x{ow} collapsed")
    if bias is not None and bias.shape != (c,):
        raise ShapeError(f"conv_transpose2d: bias shape {bias.shape} != ({c},)")

    w2 = w.data.reshape(o, c * kh * kw)
    colg = np.matmul(w2.T, x.data.reshape(n, o, h * wd))
    out = _col2im(colg, (n, c, oh, ow), kh, kw, stride, padding, h, wd)
    if bias is not None:
        out += bias.data.reshape(1, c, 1, 1)
    if leaky is not None:
        np.maximum(out, out * leaky, out=out)

    def back(gy):
        if leaky is not None:
            gy = np.where(out > 0, gy, gy * leaky)
        gx = gw = gb = None
        if x.requires_grad or w.requires_grad:
            col = _im2col(_pad_input(gy, padding), kh, kw, stride, h, wd)
            if x.requires_grad:
                gx = np.matmul(w2, col).reshape(x.shape)
            if w.requires_grad:
                gw = np.matmul(x.data.reshape(n, o, h * wd),
                               col.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if bias is not None and bias.requires_grad:
            gb = gy.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, w) if bias is None else (x, w, bias)
    return _record("conv_transpose2d", inputs, out, lambda g: back(g)[: len(inputs)])


# ---------------------------------------------------------------------------
# bilinear resize
# ---------------------------------------------------------------------------

_RESIZE_CACHE: dict = {}


def _interp_matrix(src: int, dst: int, dtype) -> np.ndarray:
    """dst x src weight matrix, align-corners-false convention."""
    key = (src, dst, np.dtype(dtype).char)
    m = _RESIZE_CACHE.get(key)
    if m is not None:
        return m
    m = np.zeros((dst, src), dtype)
    scale = src / dst
    for i in range(dst):
        pos = (i + 0.5) * scale - 0.5
        pos = min(max(pos, 0.0), src - 1.0)
        lo = int(math.floor(pos))
        hi = min(lo + 1, src - 1)
        frac = pos - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    _RESIZE_CACHE[key] = m
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize expects NCHW, got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: invalid target {out_h}x{out_w}")
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        return _record("bilinear_resize", (x,), x.data.copy(), lambda g: (g,))
    rm = _interp_matrix(h, out_h, x.dtype)
    cm = _interp_matrix(w, out_w, x.dtype)
    flat = x.data.reshape(n * c, h, w)
    out = np.matmul(np.matmul(rm, flat), cm.T).reshape(n, c, out_h, out_w)

    def back(g):
        gf = g.reshape(n * c, out_h, out_w)
        gx = np.matmul(rm.T, np.matmul(gf, cm)).reshape(x.shape)
        return (gx,)

    return _record("bilinear_resize", (x,), out, back)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor],
               eps: float = 1e-5,
               coords: Optional[Sequence[Optional[Sequence[int]]]] = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps the given tensors to a scalar. Inputs should be float64;
    ``coords`` optionally restricts each tensor to a list of flat indices
    (None = every element).
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    loss = fn(*inputs)
    backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for t in inputs]

    worst = 0.0
    with no_grad():
        for ti, t in enumerate(inputs):
            flat = t.data.reshape(-1)
            sel = range(flat.size) if coords is None or coords[ti] is None else coords[ti]
            for i in sel:
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(fn(*inputs).data)
                flat[i] = orig - eps
                fm = float(fn(*inputs).data)
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * eps)
                ana = float(analytic[ti].reshape(-1)[i])
                err = abs(ana - numeric) / max(1e-8, abs(ana) + abs(numeric))
                if err > worst:
                    worst = err
    return worst
