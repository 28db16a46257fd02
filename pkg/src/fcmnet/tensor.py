"""Rank-4 tensors, the convolution family and a recording tape for reverse mode.

Every op takes and returns :class:`Tensor4` values laid out as (n, c, h, w).
When a :class:`Tape` is active on the current thread and an op input requires
gradients (or was itself recorded on that tape), the op appends a backward
closure to the tape.  ``Tape.backward`` replays the closures in reverse order.
"""
from __future__ import annotations

import struct
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ShapeError, UsageError

DEFAULT_DTYPE = np.float64
_DIMS = ("n", "c", "h", "w")


class Tensor4:
    """Dense (n, c, h, w) array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_tape")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim != 4:
            raise ShapeError(f"Tensor4 needs rank 4, got shape {arr.shape}")
        for dim, size in zip(_DIMS, arr.shape):
            if size < 1:
                raise ShapeError(f"dimension {dim} must be >= 1, got {size}", dim=dim)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    n = property(lambda self: self.data.shape[0])
    c = property(lambda self: self.data.shape[1])
    h = property(lambda self: self.data.shape[2])
    w = property(lambda self: self.data.shape[3])

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor4(self.data.copy())

    @classmethod
    def zeros(cls, shape, requires_grad=False, dtype=DEFAULT_DTYPE):
        return cls(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    @classmethod
    def ones(cls, shape, requires_grad=False, dtype=DEFAULT_DTYPE):
        return cls(np.ones(shape, dtype=dtype), requires_grad=requires_grad)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor4(shape={self.shape}, dtype={self.dtype}{tag})"


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_local = threading.local()


def _active_tape():
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


@dataclass
class _Entry:
    out: Tensor4
    inputs: tuple
    backward: Callable


class Tape:
    """Records differentiable ops executed while it is active.

    Use as a context manager; tapes nest per thread and only the innermost one
    records.  A tape has a single writer: run concurrent forward passes on
    separate tapes.
    """

    def __init__(self):
        self.entries: list[_Entry] = []

    def __enter__(self):
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.tapes.pop()
        return False

    def tracks(self, t):
        return t.requires_grad or t._tape is self

    def record(self, out, inputs, backward):
        out._tape = self
        self.entries.append(_Entry(out, tuple(inputs), backward))

    def backward(self, root):
        """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
        if root._tape is not self:
            raise UsageError("backward() called on a value not recorded on this tape")
        if root.shape != (1, 1, 1, 1):
            raise UsageError(f"backward() needs a (1,1,1,1) root, got {root.shape}")
        grads = {id(root): np.ones_like(root.data)}
        for entry in reversed(self.entries):
            g = grads.pop(id(entry.out), None)
            if g is None:
                continue
            in_grads = entry.backward(g)
            for inp, ig in zip(entry.inputs, in_grads):
                if ig is None or not self.tracks(inp):
                    continue
                if inp._tape is self:
                    key = id(inp)
                    grads[key] = grads[key] + ig if key in grads else ig
                else:
                    inp.grad = ig.copy() if inp.grad is None else inp.grad + ig


def backward(root):
    """Run reverse mode from ``root`` on the tape that recorded it."""
    if root._tape is None:
        raise UsageError("backward() through a value that no tape recorded")
    root._tape.backward(root)


def _emit(data, inputs, backward_fn):
    out = Tensor4(data)
    tape = _active_tape()
    if tape is not None and any(tape.tracks(t) for t in inputs):
        tape.record(out, inputs, backward_fn)
    return out


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def _pair(v):
    if isinstance(v, int):
        return (v, v)
    a, b = v
    return (int(a), int(b))


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3)
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)
    groups: int = 1
    has_bias: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kernel", _pair(self.kernel))
        object.__setattr__(self, "stride", _pair(self.stride))
        object.__setattr__(self, "padding", _pair(self.padding))
        for fname in ("in_channels", "out_channels", "groups"):
            if getattr(self, fname) < 1:
                raise ConfigError("must be a positive count", field=fname)
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ConfigError("kernel/stride must be >= 1 and padding >= 0", field="kernel")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ConfigError(
                f"in_channels={self.in_channels} and out_channels={self.out_channels} "
                f"must both be divisible by groups={self.groups}",
                field="groups",
            )

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels // self.groups) + self.kernel

    @property
    def weight_count(self):
        return int(np.prod(self.weight_shape))

    @property
    def param_count(self):
        return self.weight_count + (self.out_channels if self.has_bias else 0)

    @property
    def is_depthwise(self):
        return self.groups == self.in_channels == self.out_channels

    @property
    def is_pointwise(self):
        return self.kernel == (1, 1) and self.groups == 1

    def output_hw(self, h, w):
        (kh, kw), (sh, sw), (ph, pw) = self.kernel, self.stride, self.padding
        oh = (h + 2 * ph - kh) // sh + 1
        ow = (w + 2 * pw - kw) // sw + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"input {h}x{w} too small for kernel {self.kernel}", dim="h" if oh < 1 else "w")
        return oh, ow


def check_conv_args(x_shape, spec, w_shape, bias_shape):
    """Validate conv2d operands; shared by the optimized path and the oracle."""
    if x_shape[1] != spec.in_channels:
        raise ShapeError(f"input has c={x_shape[1]}, spec expects in_channels={spec.in_channels}", dim="c")
    if tuple(w_shape) != spec.weight_shape:
        raise ShapeError(f"weight shape {tuple(w_shape)} != expected {spec.weight_shape}", dim="weight")
    if spec.has_bias != (bias_shape is not None):
        raise ShapeError("bias must be given iff spec.has_bias", dim="bias")
    if bias_shape is not None and int(np.prod(bias_shape)) != spec.out_channels:
        raise ShapeError(f"bias has {int(np.prod(bias_shape))} values, need {spec.out_channels}", dim="bias")
    return spec.output_hw(x_shape[2], x_shape[3])


def _im2col(xp, spec, oh, ow):
    n, C = xp.shape[:2]
    g = spec.groups
    (kh, kw), (sh, sw) = spec.kernel, spec.stride
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, : sh * (oh - 1) + 1 : sh, : sw * (ow - 1) + 1 : sw]
    # (n, C, oh, ow, kh, kw) -> (n, g, oh*ow, Cg*kh*kw)
    win = win.reshape(n, g, C // g, oh, ow, kh, kw).transpose(0, 1, 3, 4, 2, 5, 6)
    return win.reshape(n, g, oh * ow, (C // g) * kh * kw)


def _conv2d_backward(g_out, cols, wmat, spec, x_shape, oh, ow):
    """Gradients of conv2d w.r.t. input, weight and bias."""
    n, C, h, w = x_shape
    g = spec.groups
    (kh, kw), (sh, sw), (ph, pw) = spec.kernel, spec.stride, spec.padding
    O, Cg = spec.out_channels, C // g
    go = g_out.reshape(n, g, O // g, oh * ow).transpose(0, 1, 3, 2)  # (n, g, P, Og)

    gw = np.einsum("ngpk,ngpo->gko", cols, go)
    gw = gw.reshape(g, Cg, kh, kw, O // g).transpose(0, 4, 1, 2, 3).reshape(spec.weight_shape)

    dcols = go @ wmat.transpose(0, 2, 1)  # (n, g, P, K)
    dcols = dcols.reshape(n, g, oh, ow, Cg, kh, kw).transpose(0, 1, 4, 5, 6, 2, 3)
    dxp = np.zeros((n, g, Cg, h + 2 * ph, w + 2 * pw), dtype=g_out.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, :, i : i + sh * (oh - 1) + 1 : sh, j : j + sw * (ow - 1) + 1 : sw] += dcols[:, :, :, i, j]
    gx = dxp.reshape(n, C, h + 2 * ph, w + 2 * pw)[:, :, ph : ph + h, pw : pw + w]

    gb = g_out.sum(axis=(0, 2, 3)).reshape(1, O, 1, 1) if spec.has_bias else None
    return gx, gw, gb


def conv2d(x, spec, weights, bias=None):
    """Grouped 2-D cross-correlation with zero padding (im2col + batched GEMM)."""
    oh, ow = check_conv_args(x.shape, spec, weights.shape, None if bias is None else bias.shape)
    n = x.n
    g = spec.groups
    O = spec.out_channels
    (ph, pw) = spec.padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    cols = _im2col(xp, spec, oh, ow)
    wmat = weights.data.reshape(g, O // g, -1).transpose(0, 2, 1)  # (g, K, Og)
    out = cols @ wmat  # (n, g, P, Og)
    out = out.transpose(0, 1, 3, 2).reshape(n, O, oh, ow)
    if bias is not None:
        out = out + bias.data.reshape(1, O, 1, 1)

    def back(g_out):
        gx, gw, gb = _conv2d_backward(g_out, cols, wmat, spec, x.shape, oh, ow)
        return (gx, gw) if bias is None else (gx, gw, gb.reshape(bias.shape))

    inputs = (x, weights) if bias is None else (x, weights, bias)
    return _emit(np.ascontiguousarray(out), inputs, back)


# ---------------------------------------------------------------------------
# Normalization, activations, pooling
# ---------------------------------------------------------------------------

@dataclass
class BnParams:
    """Per-channel batch-norm state. gamma/beta are learnable Tensor4 of shape (1, C, 1, 1)."""

    gamma: Tensor4
    beta: Tensor4
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.03

    @classmethod
    def identity(cls, channels, dtype=DEFAULT_DTYPE, **kw):
        return cls(
            gamma=Tensor4(np.ones((1, channels, 1, 1), dtype=dtype), requires_grad=True),
            beta=Tensor4(np.zeros((1, channels, 1, 1), dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            **kw,
        )

    @property
    def channels(self):
        return self.gamma.c

    def __post_init__(self):
        c = self.gamma.c
        if self.beta.shape != (1, c, 1, 1) or self.gamma.shape != (1, c, 1, 1):
            raise ConfigError("gamma and beta must both have shape (1, C, 1, 1)", field="gamma")
        if self.running_mean.shape != (c,) or self.running_var.shape != (c,):
            raise ConfigError("running stats must have length C", field="running_mean")
        if np.any(self.running_var < 0):
            raise ConfigError("running variance must be >= 0", field="running_var")
        if not self.eps > 0:
            raise ConfigError("eps must be > 0", field="eps")


def batch_norm(x, p, training):
    if x.c != p.channels:
        raise ConfigError(f"input has {x.c} channels, batch-norm has {p.channels}", field="channels")
    gamma, beta = p.gamma.data, p.beta.data
    if training:
        m = x.n * x.h * x.w
        mean = x.data.mean(axis=(0, 2, 3), keepdims=True)
        centered = x.data - mean
        var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + p.eps)
        xhat = centered * inv
        unbiased = var.reshape(-1) * (m / (m - 1) if m > 1 else 1.0)
        p.running_mean = (1 - p.momentum) * p.running_mean + p.momentum * mean.reshape(-1)
        p.running_var = (1 - p.momentum) * p.running_var + p.momentum * unbiased

        def back(g):
            dxhat = g * gamma
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = inv / m * (m * dxhat - s1 - xhat * s2)
            return gx, (g * xhat).sum(axis=(0, 2, 3), keepdims=True), g.sum(axis=(0, 2, 3), keepdims=True)
    else:
        inv = 1.0 / np.sqrt(p.running_var.reshape(1, -1, 1, 1) + p.eps)
        xhat = (x.data - p.running_mean.reshape(1, -1, 1, 1)) * inv

        def back(g):
            return g * gamma * inv, (g * xhat).sum(axis=(0, 2, 3), keepdims=True), g.sum(axis=(0, 2, 3), keepdims=True)

    return _emit(gamma * xhat + beta, (x, p.gamma, p.beta), back)


def _sigmoid(v):
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x):
    s = _sigmoid(x.data)
    return _emit(s, (x,), lambda g: (g * s * (1.0 - s),))


def silu(x):
    s = _sigmoid(x.data)
    v = x.data
    return _emit(v * s, (x,), lambda g: (g * (s + v * s * (1.0 - s)),))


def global_avg_pool(x):
    hw = x.h * x.w
    out = x.data.sum(axis=(2, 3), keepdims=True) / hw
    shape = x.shape
    return _emit(out, (x,), lambda g: (np.broadcast_to(g / hw, shape).copy(),))


# ---------------------------------------------------------------------------
# Channel plumbing and elementwise ops
# ---------------------------------------------------------------------------

def split_point(c, ratio):
    """Channels routed to the first part: round(ratio * c), ties toward part one."""
    return int(np.floor(ratio * c + 0.5))


def slice_channels(x, start, stop):
    if not 0 <= start < stop <= x.c:
        raise ShapeError(f"channel slice [{start}:{stop}] invalid for c={x.c}", dim="c")
    shape = x.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _emit(np.ascontiguousarray(x.data[:, start:stop]), (x,), back)


def split_channels(x, ratio):
    k = split_point(x.c, ratio)
    if not 0 < ratio < 1 or k < 1 or x.c - k < 1:
        raise ConfigError(f"ratio {ratio} on {x.c} channels leaves an empty part ({k}, {x.c - k})", field="alpha")
    return slice_channels(x, 0, k), slice_channels(x, k, x.c)


def concat_channels(xs: Sequence[Tensor4]):
    if not xs:
        raise ShapeError("concat_channels needs at least one tensor", dim="c")
    ref = xs[0].shape
    for t in xs[1:]:
        for axis in (0, 2, 3):
            if t.shape[axis] != ref[axis]:
                raise ShapeError(f"concat mismatch on {_DIMS[axis]}: {t.shape} vs {ref}", dim=_DIMS[axis])
    bounds = np.cumsum([0] + [t.c for t in xs])

    def back(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs)))

    return _emit(np.concatenate([t.data for t in xs], axis=1), tuple(xs), back)


def _reduce_to(g, shape):
    axes = tuple(i for i, (a, b) in enumerate(zip(g.shape, shape)) if b == 1 and a != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


def eltwise_mul_broadcast(x, w):
    """x * w where w broadcasts against x (result always has x's shape)."""
    for axis, (a, b) in enumerate(zip(x.shape, w.shape)):
        if b not in (1, a):
            raise ShapeError(f"cannot broadcast {w.shape} against {x.shape}", dim=_DIMS[axis])
    xd, wd = x.data, w.data
    return _emit(xd * wd, (x, w), lambda g: (g * wd, _reduce_to(g * xd, wd.shape)))


def eltwise_add(x, y):
    if x.shape != y.shape:
        dim = next(d for d, a, b in zip(_DIMS, x.shape, y.shape) if a != b)
        raise ShapeError(f"eltwise_add shapes differ: {x.shape} vs {y.shape}", dim=dim)
    return _emit(x.data + y.data, (x, y), lambda g: (g, g))


def eltwise_sub(x, y):
    if x.shape != y.shape:
        dim = next(d for d, a, b in zip(_DIMS, x.shape, y.shape) if a != b)
        raise ShapeError(f"eltwise_sub shapes differ: {x.shape} vs {y.shape}", dim=dim)
    return _emit(x.data - y.data, (x, y), lambda g: (g, -g))


def sum_all(x):
    shape = x.shape
    out = np.asarray(x.data.sum(), dtype=x.dtype).reshape(1, 1, 1, 1)
    return _emit(out, (x,), lambda g: (np.broadcast_to(g.reshape(()), shape).copy(),))


def mean_all(x):
    size = x.data.size
    shape = x.shape
    out = np.asarray(x.data.sum() / size, dtype=x.dtype).reshape(1, 1, 1, 1)
    return _emit(out, (x,), lambda g: (np.broadcast_to(g.reshape(()) / size, shape).copy(),))


def mse_loss(pred, target):
    diff = eltwise_sub(pred, target)
    return mean_all(eltwise_mul_broadcast(diff, diff))


# ---------------------------------------------------------------------------
# Binary dump format: 16-byte header (n, c, h, w as <u4) + n*c*h*w <f8 values
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4I")


def dumps(t):
    return _HEADER.pack(*t.shape) + np.ascontiguousarray(t.data, dtype="<f8").tobytes()


def loads(buf, offset=0):
    """Parse one dump from ``buf`` at ``offset``; returns (tensor, bytes consumed)."""
    if len(buf) - offset < _HEADER.size:
        raise ShapeError("truncated tensor dump header", dim="header")
    shape = _HEADER.unpack_from(buf, offset)
    count = int(np.prod(shape))
    end = offset + _HEADER.size + 8 * count
    if len(buf) < end:
        raise ShapeError(f"tensor dump body truncated: need {8 * count} bytes", dim="data")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=offset + _HEADER.size)
    return Tensor4(data.astype(np.float64).reshape(shape)), end - offset


def save_tensor(path, t):
    with open(path, "wb") as fh:
        fh.write(dumps(t))


def load_tensor(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    t, used = loads(buf)
    if used != len(buf):
        raise ShapeError(f"{path}: {len(buf) - used} trailing bytes after tensor dump", dim="data")
    return t
