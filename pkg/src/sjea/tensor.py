"""N-d arrays with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a contiguous row-major numpy buffer plus an optional
gradient buffer of the same shape.  Operations executed while a :class:`Tape`
is active append a backward rule to that tape; ``tape.backward(loss)`` then
replays the rules in reverse, accumulating ``.grad`` on every tensor that
requires it.  Outside a tape, operations are plain (and allocation-free of
graph state), which is what evaluation-mode code paths use.

Dtype is a per-tensor property: float32 is the training default, float64 is
what the finite-difference checks run in.  Tensor-tensor ops require matching
dtypes; mixing is treated as a caller bug and rejected rather than silently
promoted.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation, NumericDomainError

__all__ = [
    "Tensor",
    "Tape",
    "add", "sub", "mul", "div", "neg", "relu", "sqrt", "square", "exp", "log",
    "tsum", "tmean", "tvar", "tmax",
    "matmul", "transpose", "reshape", "conv2d", "max_pool2d",
    "batch_norm", "BatchNormState",
    "gradient_check", "set_debug_checks",
]

_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    """When enabled, every op output is scanned for NaN/Inf (slow)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = enabled


class Tape:
    """Ordered record of executed operations, replayed in reverse by backward().

    Execution order is a topological order by construction: an op's inputs
    exist before the op runs.  One backward() call visits each record exactly
    once.  Re-running backward on the same tape accumulates into existing
    grads; callers are expected to reset grads (optimizer.zero_grad) between
    uses.
    """

    _stack: list["Tape"] = []

    def __init__(self) -> None:
        self._records: list[tuple[Tensor, object]] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = Tape._stack.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._records)

    @staticmethod
    def active() -> "Tape | None":
        return Tape._stack[-1] if Tape._stack else None

    def _record(self, out: "Tensor", backward_fn) -> None:
        self._records.append((out, backward_fn))

    def backward(self, loss: "Tensor") -> None:
        """Populate .grad on every recorded tensor upstream of ``loss``."""
        if loss.data.ndim != 0 and loss.data.size != 1:
            raise ContractViolation(
                f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, backward_fn in reversed(self._records):
            if out.grad is None:
                continue  # not on any path to the loss
            backward_fn(out.grad)


class Tensor:
    """Dense array plus optional grad buffer participating in a tape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() on non-scalar shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # -- grad bookkeeping ----------------------------------------------
    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        # accumulation is by reassignment, so aliasing upstream grads is safe
        self.grad = g if self.grad is None else self.grad + g

    def detach(self) -> "Tensor":
        """Same data, severed from the graph (stop-gradient boundary)."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        return out

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(self, other)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(_coerce(other, self), self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(self, other)
    def __truediv__(self, other): return div(self, other)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return tmean(self, axis, keepdims)
    def var(self, axis=None, keepdims=False, unbiased=True):
        return tvar(self, axis, keepdims, unbiased)
    def max(self, axis=None, keepdims=False): return tmax(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape)
    def transpose(self): return transpose(self)

    @property
    def T(self): return transpose(self)


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _finish(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Wrap an op result; register the backward rule if a tape is recording."""
    if _DEBUG_CHECKS and not np.all(np.isfinite(out_data)):
        raise NumericDomainError("op produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    tape = Tape.active()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        tape._record(out, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape`, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_pair(a: Tensor, b) -> tuple[Tensor, Tensor]:
    b = _coerce(b, a)
    if a.dtype != b.dtype:
        raise ContractViolation(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractViolation(
            f"shapes {a.shape} and {b.shape} do not broadcast") from None
    return a, b


# -- elementwise ---------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    a, b = _check_pair(a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _finish(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b) -> Tensor:
    a, b = _check_pair(a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _finish(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    a, b = _check_pair(a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _finish(a.data * b.data, (a, b), backward)


def div(a: Tensor, b) -> Tensor:
    a, b = _check_pair(a, b)
    if np.any(b.data == 0):
        raise NumericDomainError("division by zero")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _finish(a.data / b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(-g)

    return _finish(-a.data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # subgradient 0 at exactly 0

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return _finish(np.where(mask, a.data, a.dtype.type(0)), (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise NumericDomainError("sqrt of negative values")
    out_data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / (2.0 * out_data))

    return _finish(out_data, (a,), backward)


def square(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (2.0 * a.data))

    return _finish(a.data * a.data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data)

    return _finish(out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericDomainError("log of non-positive values")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _finish(np.log(a.data), (a,), backward)


# -- reductions ------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = tuple(ax % ndim for ax in axis)
    if len(set(axes)) != len(axes) or any(ax >= ndim for ax in axes):
        raise ContractViolation(f"invalid axes {axis} for ndim {ndim}")
    return axes


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axes: tuple[int, ...],
                    keepdims: bool) -> np.ndarray:
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.data.ndim)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_expand_reduced(g, a.shape, axes, keepdims))

    return _finish(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.data.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1

    def backward(g):
        if a.requires_grad:
            a._accumulate(_expand_reduced(g, a.shape, axes, keepdims) / n)

    return _finish(a.data.mean(axis=axes, keepdims=keepdims), (a,), backward)


def tvar(a: Tensor, axis=None, keepdims: bool = False, unbiased: bool = True) -> Tensor:
    """Variance over `axis`; unbiased divides by (n-1)."""
    axes = _norm_axes(axis, a.data.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if unbiased and n < 2:
        raise NumericDomainError(
            f"unbiased variance needs >= 2 samples along axes, got {n}")
    denom = (n - 1) if unbiased else n
    mean = a.data.mean(axis=axes, keepdims=True)
    centered = a.data - mean
    out_data = np.sum(centered * centered, axis=axes, keepdims=keepdims) / denom

    def backward(g):
        if a.requires_grad:
            gg = _expand_reduced(g, a.shape, axes, keepdims)
            a._accumulate(gg * (2.0 / denom) * centered)

    return _finish(out_data.astype(a.dtype, copy=False), (a,), backward)


def tmax(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max-reduce; ties share the gradient equally."""
    axes = _norm_axes(axis, a.data.ndim)
    out_data = a.data.max(axis=axes, keepdims=keepdims)

    def backward(g):
        if a.requires_grad:
            full = _expand_reduced(out_data, a.shape, axes, keepdims)
            mask = (a.data == full)
            counts = mask.sum(axis=axes, keepdims=True).astype(g.dtype)
            gg = _expand_reduced(g, a.shape, axes, keepdims)
            a._accumulate(gg * mask / counts)

    return _finish(out_data, (a,), backward)


# -- shape ops --------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape[0]) if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else tuple(shape)
    old = a.shape

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(old))

    return _finish(np.ascontiguousarray(a.data.reshape(shape)), (a,), backward)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ContractViolation(f"transpose expects a matrix, got {a.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.ascontiguousarray(g.T))

    return _finish(np.ascontiguousarray(a.data.T), (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ContractViolation(
            f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ContractViolation(
            f"matmul inner extents differ: {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise ContractViolation(f"dtype mismatch: {a.dtype} vs {b.dtype}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _finish(a.data @ b.data, (a, b), backward)


# -- convolution -------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of NCHW input with OCkk kernels.

    Forward and backward run as one GEMM per kernel tap (kh*kw tensordots),
    which keeps memory flat compared to an im2col buffer.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ContractViolation(
            f"conv2d expects NCHW input and OCkk kernel, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if c != cw:
        raise ContractViolation(
            f"conv2d channel mismatch: input has {c}, kernel expects {cw}")
    if x.dtype != w.dtype:
        raise ContractViolation(f"dtype mismatch: {x.dtype} vs {w.dtype}")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise ContractViolation(
            f"kernel {kh}x{kw} larger than padded input {h + 2*padding}x{wd + 2*padding}")
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (wd + 2 * padding - kw) // stride + 1

    if padding:
        xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=x.dtype)
        xp[:, :, padding:padding + h, padding:padding + wd] = x.data
    else:
        xp = x.data

    acc = np.zeros((n, h_out, w_out, o), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride]
            acc += np.tensordot(patch, w.data[:, :, i, j], axes=([1], [1]))
    out_data = np.ascontiguousarray(acc.transpose(0, 3, 1, 2))

    def backward(g):
        gt = np.ascontiguousarray(g.transpose(0, 2, 3, 1))  # N,H',W',O
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for i in range(kh):
                for j in range(kw):
                    patch = xp[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride]
                    gw[:, :, i, j] = np.tensordot(gt, patch, axes=([0, 1, 2], [0, 2, 3]))
            w._accumulate(gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    contrib = np.tensordot(gt, w.data[:, :, i, j], axes=([3], [0]))
                    gxp[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += \
                        contrib.transpose(0, 3, 1, 2)
            if padding:
                gxp = gxp[:, :, padding:padding + h, padding:padding + wd]
            x._accumulate(np.ascontiguousarray(gxp))

    return _finish(out_data, (x, w), backward)


def max_pool2d(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    """Spatial max pooling over NCHW input."""
    if x.data.ndim != 4:
        raise ContractViolation(f"max_pool2d expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if kernel > h + 2 * padding or kernel > w + 2 * padding:
        raise ContractViolation("pooling window larger than padded input")
    h_out = (h + 2 * padding - kernel) // stride + 1
    w_out = (w + 2 * padding - kernel) // stride + 1

    if padding:
        xp = np.full((n, c, h + 2 * padding, w + 2 * padding),
                     -np.inf, dtype=x.dtype)
        xp[:, :, padding:padding + h, padding:padding + w] = x.data
    else:
        xp = x.data
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # N,C,H',W',k,k
    flat = windows.reshape(n, c, h_out, w_out, kernel * kernel)
    argmax = flat.argmax(axis=-1)
    out_data = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]
    out_data = np.ascontiguousarray(out_data)

    def backward(g):
        if not x.requires_grad:
            return
        gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
        ki, kj = np.divmod(argmax, kernel)
        rows = (np.arange(h_out) * stride)[None, None, :, None] + ki
        cols = (np.arange(w_out) * stride)[None, None, None, :] + kj
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        np.add.at(gxp, (ni, ci, rows, cols), g)
        if padding:
            gxp = gxp[:, :, padding:padding + h, padding:padding + w]
        x._accumulate(np.ascontiguousarray(gxp))

    return _finish(out_data, (x,), backward)


# -- batch normalization ------------------------------------------------------

class BatchNormState:
    """Running mean/var buffers, updated in train mode, consumed in eval."""

    def __init__(self, num_features: int, dtype=np.float32):
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)

    def astype(self, dtype) -> "BatchNormState":
        out = BatchNormState(len(self.running_mean), dtype)
        out.running_mean = self.running_mean.astype(dtype)
        out.running_var = self.running_var.astype(dtype)
        return out


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Normalize channel axis 1 of a (N,C) or (N,C,H,W) tensor.

    Train mode: batch statistics normalize (biased variance, the usual
    convention) and the running buffers move toward the batch values; the
    running variance update uses the unbiased estimate.  Eval mode: running
    statistics only, per-sample independent.
    """
    if x.data.ndim not in (2, 4):
        raise ContractViolation(f"batch_norm expects (N,C) or (N,C,H,W), got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ContractViolation("scale/shift extent must match channel count")
    stat_shape = (1, c) if x.data.ndim == 2 else (1, c, 1, 1)
    axes = (0,) if x.data.ndim == 2 else (0, 2, 3)

    if training:
        if x.shape[0] < 2:
            raise ContractViolation("batch_norm train mode needs batch >= 2")
        m = tmean(x, axis=axes, keepdims=True)
        v = tvar(x, axis=axes, keepdims=True, unbiased=False)
        n = int(np.prod([x.shape[ax] for ax in axes]))
        unbiased = v.data.reshape(c) * (n / (n - 1))
        state.running_mean += momentum * (m.data.reshape(c) - state.running_mean)
        state.running_var += momentum * (unbiased - state.running_var)
        xhat = div(sub(x, m), sqrt(add(v, Tensor(np.full(stat_shape, eps, dtype=x.dtype)))))
    else:
        rm = state.running_mean.reshape(stat_shape).astype(x.dtype)
        rv = state.running_var.reshape(stat_shape).astype(x.dtype)
        denom = np.sqrt(rv + eps)
        xhat = div(sub(x, Tensor(rm)), Tensor(denom))
    return add(mul(xhat, reshape(gamma, stat_shape)), reshape(beta, stat_shape))


# -- verification -------------------------------------------------------------

def gradient_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must be a deterministic scalar-valued function of ``x``.  Relative
    error per element is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    Entries where both gradients sit below the difference-quotient noise floor
    (a safety multiple of float64 rounding in f divided by eps) count as
    agreeing: a central difference cannot resolve a zero gradient below that
    scale, e.g. for a bias whose constant shift is cancelled exactly by a
    following batch normalization.
    """
    x.zero_grad()
    with Tape() as tape:
        y = f(x)
    if y.data.size != 1:
        raise ContractViolation("gradient_check needs a scalar-valued f")
    tape.backward(y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.astype(np.float64)

    numeric = np.zeros(x.data.size, dtype=np.float64)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x).item()
        flat[i] = orig - eps
        fm = f(x).item()
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * eps)
    numeric = numeric.reshape(x.data.shape)

    noise = max(1e-8, 1e-9 * (1.0 + abs(float(y.item()))))
    resolved = (np.abs(analytic) >= noise) | (np.abs(numeric) >= noise)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    return float(np.max(np.where(resolved, rel, 0.0)))
