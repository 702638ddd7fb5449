"""Reverse-mode automatic differentiation over numpy arrays.

The op set is closed: exactly what the segmentation network, the spectral
recalibration layer, and the losses need. Every op computes its forward
result eagerly with numpy and, when a tape is active and some input wants
gradients, records a backward closure. backward() replays the closures in
reverse execution order.

Conventions
-----------
* Spatial ops accept (C,H,W) or (N,C,H,W); 3-d inputs are promoted to a
  singleton batch internally and squeezed back on the way out.
* Tensors are treated as immutable once produced by an op.
* Checked mode (on by default) rejects NaN/Inf at op boundaries.
"""
from __future__ import annotations

import threading

import numpy as np

from .errors import ContractError, DimensionError, NumericsError

_DEFAULT_DTYPE = np.float64
_CHECKED = True

_LOCAL = threading.local()


def set_default_dtype(dtype) -> None:
    """64-bit is the tested configuration; 32-bit trades accuracy for speed."""
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ContractError("dtype must be float32 or float64")
    _DEFAULT_DTYPE = dtype


def default_dtype():
    return _DEFAULT_DTYPE


def set_checked(flag: bool) -> None:
    global _CHECKED
    _CHECKED = bool(flag)


def checked_enabled() -> bool:
    return _CHECKED


def _tape_stack() -> list:
    stack = getattr(_LOCAL, "tapes", None)
    if stack is None:
        stack = []
        _LOCAL.tapes = stack
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of backward closures for one forward pass.

    Used as a context manager; ops executed inside the block register their
    backward step here. A tape can be replayed exactly once.
    """

    __slots__ = ("_ops", "_used")

    def __init__(self):
        self._ops = []
        self._used = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def record(self, fn) -> None:
        self._ops.append(fn)

    def __len__(self) -> int:
        return len(self._ops)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype != _DEFAULT_DTYPE:
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named leaf tensor; the unit of checkpointing and aggregation."""

    __slots__ = ("identifier",)

    def __init__(self, identifier: str, value):
        super().__init__(value, requires_grad=True)
        self.identifier = identifier

    def __repr__(self) -> str:
        return f"Parameter({self.identifier!r}, shape={self.data.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def _check(arr: np.ndarray, opname: str) -> np.ndarray:
    if _CHECKED and not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values produced by {opname}")
    return arr


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g over the axes that broadcasting expanded, back to `shape`."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _record(out: Tensor, fn) -> Tensor:
    tape = active_tape()
    if tape is not None and out.requires_grad:
        def guarded():
            # outputs that never reached the loss carry no gradient
            if out.grad is not None:
                fn()
        tape.record(guarded)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into .grad of every participating tensor."""
    if loss.data.shape != ():
        raise ContractError("backward needs a scalar loss")
    if len(tape) == 0:
        raise ContractError("backward on an empty tape")
    if tape._used:
        raise ContractError("tape already replayed; build a fresh tape")
    tape._used = True
    loss.grad = np.ones_like(loss.data)
    for fn in reversed(tape._ops):
        fn()


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(_check(a.data + b.data, "add"), a.requires_grad or b.requires_grad)

    def _bwd():
        if a.requires_grad:
            _accum(a, _unbroadcast(out.grad, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(out.grad, b.data.shape))

    return _record(out, _bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(_check(a.data - b.data, "sub"), a.requires_grad or b.requires_grad)

    def _bwd():
        if a.requires_grad:
            _accum(a, _unbroadcast(out.grad, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-out.grad, b.data.shape))

    return _record(out, _bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(_check(a.data * b.data, "mul"), a.requires_grad or b.requires_grad)

    def _bwd():
        if a.requires_grad:
            _accum(a, _unbroadcast(out.grad * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(out.grad * a.data, b.data.shape))

    return _record(out, _bwd)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(_check(a.data / b.data, "div"), a.requires_grad or b.requires_grad)

    def _bwd():
        if a.requires_grad:
            _accum(a, _unbroadcast(out.grad / b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-out.grad * a.data / (b.data * b.data), b.data.shape))

    return _record(out, _bwd)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, a.requires_grad)

    def _bwd():
        _accum(a, -out.grad)

    return _record(out, _bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(_check(a.data * c, "scale"), a.requires_grad)

    def _bwd():
        _accum(a, out.grad * c)

    return _record(out, _bwd)


def exp(a: Tensor) -> Tensor:
    out = Tensor(_check(np.exp(a.data), "exp"), a.requires_grad)

    def _bwd():
        _accum(a, out.grad * out.data)

    return _record(out, _bwd)


def log(a: Tensor) -> Tensor:
    out = Tensor(_check(np.log(a.data), "log"), a.requires_grad)

    def _bwd():
        _accum(a, out.grad / a.data)

    return _record(out, _bwd)


def sqrt(a: Tensor) -> Tensor:
    out = Tensor(_check(np.sqrt(a.data), "sqrt"), a.requires_grad)

    def _bwd():
        _accum(a, out.grad * (0.5 / out.data))

    return _record(out, _bwd)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    floor = float(floor)
    out = Tensor(np.maximum(a.data, floor), a.requires_grad)
    mask = a.data > floor  # subgradient 0 at the kink

    def _bwd():
        _accum(a, out.grad * mask)

    return _record(out, _bwd)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0), a.requires_grad)
    mask = a.data > 0.0

    def _bwd():
        _accum(a, out.grad * mask)

    return _record(out, _bwd)


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    factor = np.where(a.data > 0.0, 1.0, slope)
    out = Tensor(a.data * factor, a.requires_grad)

    def _bwd():
        _accum(a, out.grad * factor)

    return _record(out, _bwd)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    s = np.where(x >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(_check(s, "sigmoid"), a.requires_grad)

    def _bwd():
        _accum(a, out.grad * out.data * (1.0 - out.data))

    return _record(out, _bwd)


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = Tensor(_check(a.data.sum(axis=axes, keepdims=keepdims), "sum"), a.requires_grad)

    def _bwd():
        g = out.grad
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _record(out, _bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.data.shape[i] for i in axes])) if axes else 1
    out = Tensor(_check(a.data.mean(axis=axes, keepdims=keepdims), "mean"), a.requires_grad)

    def _bwd():
        g = out.grad
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        _accum(a, np.broadcast_to(g, a.data.shape) / n)

    return _record(out, _bwd)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), a.requires_grad)

    def _bwd():
        _accum(a, out.grad.reshape(a.data.shape))

    return _record(out, _bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    axis = axis % a.ndim
    if start < 0 or start + length > a.data.shape[axis]:
        raise DimensionError("narrow out of range")
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = Tensor(a.data[sl], a.requires_grad)

    def _bwd():
        g = np.zeros_like(a.data)
        g[sl] = out.grad
        _accum(a, g)

    return _record(out, _bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim:
            raise DimensionError("concat rank mismatch")
        for ax in range(ndim):
            if ax != axis and t.data.shape[ax] != tensors[0].data.shape[ax]:
                raise DimensionError("concat off-axis shape mismatch")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    out = Tensor(out_data, any(t.requires_grad for t in tensors))
    sizes = [t.data.shape[axis] for t in tensors]

    def _bwd():
        offset = 0
        for t, size in zip(tensors, sizes):
            if t.requires_grad:
                sl = [slice(None)] * ndim
                sl[axis] = slice(offset, offset + size)
                _accum(t, out.grad[tuple(sl)])
            offset += size

    return _record(out, _bwd)


def concat_channels(tensors) -> Tensor:
    """Channel concat for (C,H,W) or (N,C,H,W) feature maps."""
    ndim = as_tensor(tensors[0]).ndim
    if ndim not in (3, 4):
        raise DimensionError("concat_channels expects 3-d or 4-d maps")
    return concat(tensors, axis=ndim - 3)


def softmax(a: Tensor, axis: int = 0) -> Tensor:
    axis = axis % a.ndim
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(_check(p, "softmax"), a.requires_grad)

    def _bwd():
        g = out.grad
        inner = (g * out.data).sum(axis=axis, keepdims=True)
        _accum(a, out.data * (g - inner))

    return _record(out, _bwd)


# ---------------------------------------------------------------------------
# linear algebra


def linear(x: Tensor, weight: Tensor, bias=None) -> Tensor:
    """x @ weight.T + bias over the last axis; leading axes are batch."""
    d_in = x.data.shape[-1]
    if weight.ndim != 2 or weight.data.shape[1] != d_in:
        raise DimensionError(
            f"linear weight {weight.data.shape} incompatible with input dim {d_in}")
    y = x.data @ weight.data.T
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (weight.data.shape[0],):
            raise DimensionError("linear bias shape mismatch")
        y = y + bias.data
    rg = x.requires_grad or weight.requires_grad or (bias is not None and bias.requires_grad)
    out = Tensor(_check(y, "linear"), rg)

    def _bwd():
        g = out.grad
        gflat = g.reshape(-1, weight.data.shape[0])
        if x.requires_grad:
            _accum(x, (gflat @ weight.data).reshape(x.data.shape))
        if weight.requires_grad:
            _accum(weight, gflat.T @ x.data.reshape(-1, d_in))
        if bias is not None and bias.requires_grad:
            _accum(bias, gflat.sum(axis=0))

    return _record(out, _bwd)


# ---------------------------------------------------------------------------
# spatial ops


def _as_batched(arr: np.ndarray):
    if arr.ndim == 3:
        return arr[None], True
    if arr.ndim == 4:
        return arr, False
    raise DimensionError(f"expected 3-d or 4-d map, got shape {arr.shape}")


def conv2d(x: Tensor, weight: Tensor, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with square odd kernels.

    x: (C_in,H,W) or (N,C_in,H,W); weight: (C_out,C_in,k,k); bias: (C_out,).
    """
    if weight.ndim != 4 or weight.data.shape[2] != weight.data.shape[3]:
        raise DimensionError("conv2d weight must be (C_out,C_in,k,k)")
    k = weight.data.shape[2]
    if k % 2 == 0:
        raise DimensionError("conv2d kernel size must be odd")
    if padding < 0 or stride < 1:
        raise DimensionError("conv2d needs padding >= 0 and stride >= 1")
    xd, squeeze = _as_batched(x.data)
    n, c_in, h, w = xd.shape
    c_out = weight.data.shape[0]
    if weight.data.shape[1] != c_in:
        raise DimensionError(
            f"conv2d channel mismatch: input {c_in}, weight expects {weight.data.shape[1]}")
    if (h + 2 * padding - k) % stride or (w + 2 * padding - k) % stride:
        raise DimensionError("conv2d output extent is not integral")
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1

    if padding:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = xd
    # k*k shifted views, one GEMM each: keeps peak memory at one feature map
    acc = np.zeros((n, h_out, w_out, c_out), dtype=xd.dtype)
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride]
            acc += np.tensordot(patch, weight.data[:, :, i, j], axes=((1,), (1,)))
    y = np.ascontiguousarray(acc.transpose(0, 3, 1, 2))
    if bias is not None:
        if bias.data.shape != (c_out,):
            raise DimensionError("conv2d bias shape mismatch")
        y += bias.data[None, :, None, None]
    rg = x.requires_grad or weight.requires_grad or (bias is not None and bias.requires_grad)
    out = Tensor(_check(y[0] if squeeze else y, "conv2d"), rg)

    def _bwd():
        g = out.grad if not squeeze else out.grad[None]
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        need_dx = x.requires_grad
        dxp = np.zeros_like(xp) if need_dx else None
        dw = np.zeros_like(weight.data) if weight.requires_grad else None
        for i in range(k):
            for j in range(k):
                patch = xp[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride]
                if dw is not None:
                    dw[:, :, i, j] = np.tensordot(g, patch, axes=((0, 2, 3), (0, 2, 3)))
                if need_dx:
                    contrib = np.tensordot(g, weight.data[:, :, i, j], axes=((1,), (0,)))
                    dxp[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += (
                        contrib.transpose(0, 3, 1, 2))
        if dw is not None:
            _accum(weight, dw)
        if need_dx:
            dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
            _accum(x, dx[0] if squeeze else dx)

    return _record(out, _bwd)


def maxpool2x(x: Tensor) -> Tensor:
    xd, squeeze = _as_batched(x.data)
    n, c, h, w = xd.shape
    if h % 2 or w % 2:
        raise DimensionError("maxpool2x needs even spatial extents")
    h2, w2 = h // 2, w // 2
    win = xd.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    out = Tensor(y[0] if squeeze else y, x.requires_grad)

    def _bwd():
        g = out.grad if not squeeze else out.grad[None]
        gw = np.zeros((n, c, h2, w2, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        _accum(x, gx[0] if squeeze else gx)

    return _record(out, _bwd)


def nearest_upsample2x(x: Tensor) -> Tensor:
    xd, squeeze = _as_batched(x.data)
    n, c, h, w = xd.shape
    y = np.repeat(np.repeat(xd, 2, axis=2), 2, axis=3)
    out = Tensor(y[0] if squeeze else y, x.requires_grad)

    def _bwd():
        g = out.grad if not squeeze else out.grad[None]
        gx = g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))
        _accum(x, gx[0] if squeeze else gx)

    return _record(out, _bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,C) or (C,H,W) -> (C,): mean over the spatial grid."""
    xd, squeeze = _as_batched(x.data)
    n, c, h, w = xd.shape
    y = xd.mean(axis=(2, 3))
    out = Tensor(y[0] if squeeze else y, x.requires_grad)

    def _bwd():
        g = out.grad if not squeeze else out.grad[None]
        gx = np.broadcast_to(g[:, :, None, None] / (h * w), xd.shape)
        _accum(x, gx[0] if squeeze else gx)

    return _record(out, _bwd)


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each channel of each sample to zero mean, unit variance
    over its (H,W) grid. No learned affine."""
    xd, squeeze = _as_batched(x.data)
    mu = xd.mean(axis=(2, 3), keepdims=True)
    var = xd.var(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = Tensor(_check(xhat[0] if squeeze else xhat, "instance_norm"), x.requires_grad)

    def _bwd():
        g = out.grad if not squeeze else out.grad[None]
        gm = g.mean(axis=(2, 3), keepdims=True)
        gx = (g - gm - xhat * (g * xhat).mean(axis=(2, 3), keepdims=True)) * inv
        _accum(x, gx[0] if squeeze else gx)

    return _record(out, _bwd)


# ---------------------------------------------------------------------------
# verification


def finite_diff_check(build_loss, params, h: float = 1e-5,
                      sample_per_param=None, seed: int = 0) -> float:
    """Compare tape gradients of a scalar-valued closure against central
    differences (f(p+h) - f(p-h)) / 2h.

    build_loss: zero-argument callable returning a scalar Tensor; it must
    read the current values of `params` on every call. Returns the max over
    checked entries of |analytic - numeric| / max(1e-8, |numeric|).
    With sample_per_param set, only that many entries per parameter are
    perturbed (chosen by a seeded RNG); otherwise every entry is checked.
    """
    params = list(params)
    if not params:
        return 0.0
    if h <= 0:
        raise ContractError("finite_diff_check needs h > 0")
    zero_grads(params)
    with Tape() as tape:
        loss = build_loss()
    backward(tape, loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ga in zip(params, analytic):
        n = p.data.size
        if sample_per_param is not None and sample_per_param < n:
            idxs = rng.choice(n, size=sample_per_param, replace=False)
        else:
            idxs = np.arange(n)
        for i in idxs:
            # index through unravel so perturbations land in the parameter
            # regardless of its memory layout (reshape may copy)
            at = np.unravel_index(i, p.data.shape)
            keep = p.data[at]
            p.data[at] = keep + h
            f_plus = build_loss().item()
            p.data[at] = keep - h
            f_minus = build_loss().item()
            p.data[at] = keep
            numeric = (f_plus - f_minus) / (2.0 * h)
            if abs(ga[at]) < 1e-8 and abs(numeric) < 1e-8:
                continue  # both at the noise floor; relative error undefined
            err = abs(ga[at] - numeric) / max(1e-8, abs(numeric))
            if err > worst:
                worst = err
    return float(worst)
