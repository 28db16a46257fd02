"""Building blocks: conv/BN/SiLU cell, FCM, MKP and decoupled downsampling."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import BnParams, ConvSpec, Tensor4

ACTIVATIONS = ("silu", "none")


def kaiming_uniform(rng, spec, dtype=T.DEFAULT_DTYPE):
    """Fan-in Kaiming-uniform weights for ``spec``."""
    fan_in = spec.weight_shape[1] * spec.kernel[0] * spec.kernel[1]
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=spec.weight_shape).astype(dtype)


class Module:
    """Minimal parameter container with recursive naming and train/eval mode."""

    training = True

    def children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, list) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def _own_parameters(self):
        return []

    def _own_buffers(self):
        return []

    def named_parameters(self, prefix=""):
        for name, p in self._own_parameters():
            yield prefix + name, p
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix=""):
        for name, b in self._own_buffers():
            yield prefix + name, b
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def named_modules(self, prefix=""):
        yield prefix.rstrip("."), self
        for name, child in self.children():
            yield from child.named_modules(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def train(self, mode=True):
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def __call__(self, x):
        return self.forward(x)

    @property
    def is_linear(self):
        return all(m._locally_linear() for _, m in self.named_modules())

    def _locally_linear(self):
        return True

    def linearize(self):
        """Test hook: bypass activations and batch-norms so the block is a linear map."""
        for _, m in self.named_modules():
            m._linearize()
        return self

    def _linearize(self):
        pass


class Conv2d(Module):
    def __init__(self, spec, rng, dtype=T.DEFAULT_DTYPE):
        self.spec = spec
        self.weight = Tensor4(kaiming_uniform(rng, spec, dtype), requires_grad=True)
        self.bias = Tensor4(np.zeros((1, spec.out_channels, 1, 1), dtype=dtype), requires_grad=True) if spec.has_bias else None
        self.last_out_shape = None

    def _own_parameters(self):
        out = [("weight", self.weight)]
        if self.bias is not None:
            out.append(("bias", self.bias))
        return out

    def forward(self, x):
        y = T.conv2d(x, self.spec, self.weight, self.bias)
        self.last_out_shape = y.shape
        return y


class BatchNorm2d(Module):
    def __init__(self, channels, dtype=T.DEFAULT_DTYPE):
        self.params = BnParams.identity(channels, dtype=dtype)
        self.bypass = False
        self.last_out_shape = None

    @property
    def channels(self):
        return self.params.channels

    def _own_parameters(self):
        return [("weight", self.params.gamma), ("bias", self.params.beta)]

    def _own_buffers(self):
        return [("running_mean", self.params.running_mean), ("running_var", self.params.running_var)]

    def load_buffer(self, name, value):
        setattr(self.params, name, np.asarray(value, dtype=self.params.gamma.dtype).reshape(-1))

    def forward(self, x):
        if self.bypass:
            y = x
        else:
            y = T.batch_norm(x, self.params, self.training)
        self.last_out_shape = y.shape
        return y

    def _locally_linear(self):
        return self.bypass

    def _linearize(self):
        self.bypass = True


def _check_act(act):
    if act not in ACTIVATIONS:
        raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {act!r}", field="activation")
    return act


class ConvBnAct(Module):
    """conv2d -> batch_norm -> silu (activation switchable to "none")."""

    def __init__(self, spec, rng, act="silu", dtype=T.DEFAULT_DTYPE):
        self.conv = Conv2d(spec, rng, dtype)
        self.bn = BatchNorm2d(spec.out_channels, dtype)
        self.act = _check_act(act)

    @property
    def spec(self):
        return self.conv.spec

    def forward(self, x):
        y = self.bn(self.conv(x))
        return T.silu(y) if self.act == "silu" else y

    def _locally_linear(self):
        return self.act == "none"

    def _linearize(self):
        self.act = "none"


def conv_bn_act(x, spec, params):
    """Functional form of :class:`ConvBnAct`; ``params`` is the constructed cell."""
    if params.spec != spec:
        raise ConfigError("cell was built for a different ConvSpec", field="spec")
    return params(x)


def _same(k):
    return k // 2


# ---------------------------------------------------------------------------
# FCM
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FcmConfig:
    channels: int
    alpha: float = 0.5
    enable_channel_mapping: bool = True
    enable_spatial_mapping: bool = True

    def __post_init__(self):
        if self.channels < 2:
            raise ConfigError(f"needs at least 2 channels, got {self.channels}", field="channels")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"must lie in (0, 1), got {self.alpha}", field="alpha")
        k = T.split_point(self.channels, self.alpha)
        if k < 1 or self.channels - k < 1:
            raise ConfigError(
                f"{self.alpha} on {self.channels} channels leaves an empty part ({k}, {self.channels - k})",
                field="alpha",
            )

    @property
    def split(self):
        k = T.split_point(self.channels, self.alpha)
        return k, self.channels - k


class FCM(Module):
    """Feature complementary mapping.

    The leading ``round(alpha*C)`` channels go through a 3x3 cell (X^C), the
    rest through a pointwise cell (X^S); both are lifted back to C channels.
    A per-channel weight from X^C (depthwise 3x3, GAP, sigmoid) rescales X^S,
    a per-position weight from X^S (1x1 to one channel, BN, sigmoid) rescales
    X^C, and the two products are summed.
    """

    def __init__(self, cfg, rng, dtype=T.DEFAULT_DTYPE):
        self.cfg = cfg
        C = cfg.channels
        c1, c2 = cfg.split
        self.conv3x3 = ConvBnAct(ConvSpec(c1, C, 3, 1, 1), rng, dtype=dtype)
        self.pointwise = ConvBnAct(ConvSpec(c2, C, 1, 1, 0), rng, dtype=dtype)
        if cfg.enable_channel_mapping:
            self.channel_dw = Conv2d(ConvSpec(C, C, 3, 1, 1, groups=C), rng, dtype)
        if cfg.enable_spatial_mapping:
            self.spatial_conv = Conv2d(ConvSpec(C, 1, 1, 1, 0), rng, dtype)
            self.spatial_bn = BatchNorm2d(1, dtype)

    def branches(self, x):
        x1, x2 = T.split_channels(x, self.cfg.alpha)
        return self.conv3x3(x1), self.pointwise(x2)

    def channel_weight(self, xc):
        return T.sigmoid(T.global_avg_pool(self.channel_dw(xc)))

    def spatial_weight(self, xs):
        return T.sigmoid(self.spatial_bn(self.spatial_conv(xs)))

    def forward_parts(self, x):
        """Return (output, X^C, X^S, w_channel, w_spatial); disabled weights are None."""
        if x.c != self.cfg.channels:
            raise ConfigError(f"input has {x.c} channels, block expects {self.cfg.channels}", field="channels")
        xc, xs = self.branches(x)
        w1 = self.channel_weight(xc) if self.cfg.enable_channel_mapping else None
        w2 = self.spatial_weight(xs) if self.cfg.enable_spatial_mapping else None
        left = T.eltwise_mul_broadcast(xc, w2) if w2 is not None else xc
        right = T.eltwise_mul_broadcast(xs, w1) if w1 is not None else xs
        return T.eltwise_add(left, right), xc, xs, w1, w2

    def forward(self, x):
        return self.forward_parts(x)[0]

    def _locally_linear(self):
        # Sigmoid gates make the block nonlinear whenever a mapping is enabled.
        return not (self.cfg.enable_channel_mapping or self.cfg.enable_spatial_mapping)


def fcm_forward(x, cfg, params):
    if params.cfg != cfg:
        raise ConfigError("FCM parameters were built for a different FcmConfig", field="cfg")
    return params(x)


# ---------------------------------------------------------------------------
# MKP
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MkpConfig:
    channels: int
    kernel_sizes: tuple = (3, 5, 7)
    activation: str = "silu"

    def __post_init__(self):
        object.__setattr__(self, "kernel_sizes", tuple(int(k) for k in self.kernel_sizes))
        if self.channels < 1:
            raise ConfigError("must be a positive count", field="channels")
        if not self.kernel_sizes:
            raise ConfigError("kernel list must be nonempty", field="kernel_sizes")
        for k in self.kernel_sizes:
            if k < 3 or k % 2 == 0:
                raise ConfigError(f"kernel sizes must be odd and >= 3, got {k}", field="kernel_sizes")
        _check_act(self.activation)


class MKP(Module):
    """Depthwise k1 -> pointwise -> depthwise k2 -> ... -> depthwise k_last, all stride 1."""

    def __init__(self, cfg, rng, dtype=T.DEFAULT_DTYPE):
        self.cfg = cfg
        C = cfg.channels
        self.depthwise = []
        self.pointwise = []
        for i, k in enumerate(cfg.kernel_sizes):
            self.depthwise.append(Conv2d(ConvSpec(C, C, k, 1, _same(k), groups=C), rng, dtype))
            if i < len(cfg.kernel_sizes) - 1:
                self.pointwise.append(ConvBnAct(ConvSpec(C, C, 1), rng, act=cfg.activation, dtype=dtype))

    def forward(self, x):
        if x.c != self.cfg.channels:
            raise ConfigError(f"input has {x.c} channels, block expects {self.cfg.channels}", field="channels")
        for i, dw in enumerate(self.depthwise):
            x = dw(x)
            if i < len(self.pointwise):
                x = self.pointwise[i](x)
        return x


def mkp_forward(x, cfg, params):
    if params.cfg != cfg:
        raise ConfigError("MKP parameters were built for a different MkpConfig", field="cfg")
    return params(x)


# ---------------------------------------------------------------------------
# Downsampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DownsampleSpec:
    in_channels: int
    out_channels: int | None = None
    groups: int | None = None
    kernel: int = 3
    stride: int = 2

    def __post_init__(self):
        if self.in_channels < 1:
            raise ConfigError("must be a positive count", field="in_channels")
        if self.out_channels is None:
            object.__setattr__(self, "out_channels", 2 * self.in_channels)
        if self.groups is None:
            object.__setattr__(self, "groups", self.in_channels)
        if self.stride != 2:
            raise ConfigError("downsampling stride is fixed at 2", field="stride")
        if self.groups < 1 or self.in_channels % self.groups:
            raise ConfigError(
                f"in_channels={self.in_channels} not divisible by groups={self.groups}", field="groups"
            )

    @property
    def spatial_spec(self):
        return ConvSpec(self.in_channels, self.in_channels, self.kernel, 2, _same(self.kernel), groups=self.groups)

    @property
    def channel_spec(self):
        return ConvSpec(self.in_channels, self.out_channels, 1)


class DecoupledDownsample(Module):
    """Grouped stride-2 3x3 cell for resolution, then a pointwise cell for width.

    Both stages are conv/BN/SiLU.  Without the activation between them the first
    BN shift would be cancelled by the second BN and never receive a gradient.
    """

    def __init__(self, spec, rng, dtype=T.DEFAULT_DTYPE):
        self.ds = spec
        self.spatial = ConvBnAct(spec.spatial_spec, rng, dtype=dtype)
        self.expand = ConvBnAct(spec.channel_spec, rng, dtype=dtype)

    def forward(self, x):
        if x.c != self.ds.in_channels:
            raise ConfigError(f"input has {x.c} channels, expected {self.ds.in_channels}", field="in_channels")
        return self.expand(self.spatial(x))


class FusedDownsample(ConvBnAct):
    """Single stride-2 3x3 conv/BN/SiLU, the baseline the decoupled form replaces."""

    def __init__(self, in_channels, out_channels, rng, dtype=T.DEFAULT_DTYPE):
        super().__init__(ConvSpec(in_channels, out_channels, 3, 2, 1), rng, dtype=dtype)


def decoupled_downsample_forward(x, spec, params):
    if params.ds != spec:
        raise ConfigError("downsample parameters were built for a different DownsampleSpec", field="spec")
    return params(x)


# ---------------------------------------------------------------------------
# Named-tensor archive: JSON index + flat binary of tensor dumps
# ---------------------------------------------------------------------------

def state_dict(module):
    """Ordered name -> Tensor4 for parameters and BN running statistics."""
    out = {name: p for name, p in module.named_parameters()}
    for name, buf in module.named_buffers():
        out[name] = Tensor4(np.asarray(buf).reshape(1, -1, 1, 1))
    return out


def save_archive(module, index_path):
    """Write ``index_path`` (JSON) and a companion ``.bin`` next to it."""
    index_path = os.fspath(index_path)
    bin_path = os.path.splitext(index_path)[0] + ".bin"
    entries = {}
    offset = 0
    with open(bin_path, "wb") as fh:
        for name, t in state_dict(module).items():
            blob = T.dumps(t)
            fh.write(blob)
            entries[name] = {"offset": offset, "nbytes": len(blob), "shape": list(t.shape)}
            offset += len(blob)
    index = {"format": "fcmnet-archive", "version": 1, "data_file": os.path.basename(bin_path), "tensors": entries}
    with open(index_path, "w") as fh:
        json.dump(index, fh, indent=1)
    return index_path, bin_path


def load_archive(module, index_path):
    """Load parameters saved by :func:`save_archive` into ``module`` in place."""
    index_path = os.fspath(index_path)
    with open(index_path) as fh:
        index = json.load(fh)
    with open(os.path.join(os.path.dirname(index_path), index["data_file"]), "rb") as fh:
        blob = fh.read()
    entries = index["tensors"]
    params = dict(module.named_parameters())
    buffer_owner = {}
    for mname, m in module.named_modules():
        if isinstance(m, BatchNorm2d):
            for b in ("running_mean", "running_var"):
                buffer_owner[f"{mname}.{b}" if mname else b] = (m, b)
    expected = set(params) | set(buffer_owner)
    if set(entries) != expected:
        missing = sorted(expected - set(entries))
        extra = sorted(set(entries) - expected)
        raise ConfigError(f"archive mismatch: missing={missing[:5]} unexpected={extra[:5]}", field="tensors")
    for name, meta in entries.items():
        t, _ = T.loads(blob, meta["offset"])
        if name in params:
            p = params[name]
            if t.shape != p.shape:
                raise ShapeError(f"{name}: archive shape {t.shape} != model shape {p.shape}", dim=name)
            p.data = t.data.astype(p.dtype)
        else:
            m, b = buffer_owner[name]
            m.load_buffer(b, t.data)
