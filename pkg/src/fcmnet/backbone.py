"""Multi-stage backbone: stem, four downsample+FCM stages, MKP in place of the last downsample."""
from __future__ import annotations

import math
import sys
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import tensor as T
from .blocks import (
    FCM,
    MKP,
    ConvBnAct,
    DecoupledDownsample,
    DownsampleSpec,
    FcmConfig,
    FusedDownsample,
    MkpConfig,
    Module,
)
from .errors import ConfigError, DivergenceError, ShapeError
from .tensor import ConvSpec, Tensor4

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DOWNSAMPLE_KINDS = ("decoupled", "standard_fused")
DEFAULT_ALPHAS = (0.75, 0.75, 0.25, 0.25)
DEFAULT_KERNELS = (3, 5, 7)
# Channel multipliers on a (64, 128, 256, 512) base; toy presets only.
WIDTH_PRESETS = {"n": 0.25, "s": 0.5, "m": 0.75, "l": 1.0, "x": 1.25}
_BASE_WIDTHS = (64, 128, 256, 512)


@dataclass(frozen=True)
class StageConfig:
    out_channels: int
    num_fcm_blocks: int = 1
    alpha: float = 0.5
    downsample: str = "decoupled"
    is_final: bool = False


@dataclass(frozen=True)
class BackboneConfig:
    stages: tuple
    in_channels: int = 3
    stem_channels: int | None = None
    mkp_kernels: tuple = DEFAULT_KERNELS
    mkp_activation: str = "silu"
    use_fcm: bool = True
    use_mkp: bool = True
    channel_mapping: bool = True
    spatial_mapping: bool = True
    exports: tuple | None = None

    def __post_init__(self):
        stages = tuple(s if isinstance(s, StageConfig) else StageConfig(**s) for s in self.stages)
        object.__setattr__(self, "stages", stages)
        object.__setattr__(self, "mkp_kernels", tuple(self.mkp_kernels))
        if self.exports is not None:
            object.__setattr__(self, "exports", tuple(self.exports))
        self.validate()

    @property
    def alphas(self):
        return tuple(s.alpha for s in self.stages)

    @property
    def stem_out(self):
        return self.stem_channels if self.stem_channels is not None else max(1, self.stages[0].out_channels // 2)

    def validate(self):
        if self.in_channels < 1:
            raise ConfigError("must be a positive count", field="in_channels")
        if not self.stages:
            raise ConfigError("at least one stage is required", field="stages")
        if self.stem_channels is not None and self.stem_channels < 1:
            raise ConfigError("must be a positive count", field="stem_channels")
        finals = [i for i, s in enumerate(self.stages) if s.is_final]
        if finals != [len(self.stages) - 1]:
            raise ConfigError("exactly one stage, the last, must set is_final", field="stages")
        prev = 0
        for i, s in enumerate(self.stages):
            path = f"stages[{i}]"
            if s.out_channels < 1:
                raise ConfigError("must be a positive count", field=f"{path}.out_channels")
            if s.out_channels < prev:
                raise ConfigError("stage channel counts must be nondecreasing", field=f"{path}.out_channels")
            prev = s.out_channels
            if s.downsample not in DOWNSAMPLE_KINDS:
                raise ConfigError(f"must be one of {DOWNSAMPLE_KINDS}", field=f"{path}.downsample")
            if s.num_fcm_blocks < 0:
                raise ConfigError("must be >= 0", field=f"{path}.num_fcm_blocks")
            try:
                FcmConfig(s.out_channels, s.alpha)
            except ConfigError as exc:
                raise ConfigError(str(exc).split(": ", 1)[-1], field=f"{path}.alpha") from None
        try:
            MkpConfig(max(1, self.stages[-1].out_channels), self.mkp_kernels, self.mkp_activation)
        except ConfigError as exc:
            field = {"kernel_sizes": "mkp_kernels", "activation": "mkp_activation"}.get(exc.field, exc.field)
            raise ConfigError(str(exc).split(": ", 1)[-1], field=field) from None
        if self.exports is not None:
            if not self.exports or any(not 0 <= e < len(self.stages) for e in self.exports):
                raise ConfigError("export indices must name existing stages", field="exports")

    def stage_strides(self):
        stride, out = 2, []
        for s in self.stages:
            if not (s.is_final and self.use_mkp):
                stride *= 2
            out.append(stride)
        return out

    def export_indices(self):
        if self.exports is not None:
            return self.exports
        strides = self.stage_strides()
        # last stage at each distinct stride; MKP's stage supersedes the one it follows
        return tuple(i for i in range(len(strides)) if i == len(strides) - 1 or strides[i + 1] != strides[i])

    def to_dict(self):
        d = asdict(self)
        d["stages"] = [asdict(s) for s in self.stages]
        d["mkp_kernels"] = list(self.mkp_kernels)
        if d["exports"] is None:
            del d["exports"]
        else:
            d["exports"] = list(self.exports)
        if d["stem_channels"] is None:
            del d["stem_channels"]
        return d


def default_config(width="n", alphas=DEFAULT_ALPHAS, **overrides):
    """Toy-scale full model. ``width`` picks a channel-multiplier preset (n -> 16/32/64/128)."""
    if width not in WIDTH_PRESETS:
        raise ConfigError(f"unknown width preset {width!r}", field="width")
    mult = WIDTH_PRESETS[width]
    chans = [max(2, int(round(c * mult))) for c in _BASE_WIDTHS]
    return channels_config(chans, alphas=alphas, **overrides)


def channels_config(channels, alphas=DEFAULT_ALPHAS, num_fcm_blocks=1, downsample="decoupled", **overrides):
    stages = tuple(
        StageConfig(c, num_fcm_blocks, a, downsample, is_final=(i == len(channels) - 1))
        for i, (c, a) in enumerate(zip(channels, alphas))
    )
    if len(alphas) != len(channels):
        raise ConfigError(f"{len(alphas)} alphas for {len(channels)} stages", field="alphas")
    return BackboneConfig(stages=stages, **overrides)


def tiny_config(**overrides):
    """Channels 4/8/8/8, the end-to-end gradient-check model."""
    return channels_config((4, 8, 8, 8), **overrides)


def ablation_variant(cfg, rr=True, fcm=True, mkp=True):
    """Realize one row of the RR/FCM/MKP ablation grid on top of ``cfg``."""
    kind = "decoupled" if rr else "standard_fused"
    stages = tuple(replace(s, downsample=kind) for s in cfg.stages)
    return replace(cfg, stages=stages, use_fcm=fcm, use_mkp=mkp, exports=None)


ALPHA_GRID = ((0.5, 0.5, 0.5, 0.5), (0.25, 0.25, 0.25, 0.25), (0.75, 0.75, 0.75, 0.75), DEFAULT_ALPHAS)
KERNEL_GRID = ((3, 3, 3), (5, 5, 5), (7, 7, 7), DEFAULT_KERNELS)


def ablation_grid(width="n"):
    """Label -> config for every variant of the four ablation axes at toy scale.

    Axes: RR/FCM/MKP flags, channel/spatial mapping toggles, per-stage split
    ratios and MKP kernel sets.  Each axis varies alone around the full model.
    """
    full = default_config(width)
    grid = {}
    for rr, fcm, mkp in ((False, False, False), (True, False, False), (True, True, False), (True, True, True)):
        tag = "".join(f"{'+' if on else '-'}{n}" for n, on in (("rr", rr), ("fcm", fcm), ("mkp", mkp)))
        grid[f"flags {tag}"] = ablation_variant(full, rr=rr, fcm=fcm, mkp=mkp)
    for cm in (False, True):
        for sm in (False, True):
            grid[f"mapping channel={int(cm)} spatial={int(sm)}"] = replace(full, channel_mapping=cm, spatial_mapping=sm)
    for alphas in ALPHA_GRID:
        grid[f"alpha {alphas}"] = default_config(width, alphas=alphas)
    for kernels in KERNEL_GRID:
        grid[f"kernels {kernels}"] = replace(full, mkp_kernels=kernels)
    return grid


_KNOWN_TOP = {f for f in BackboneConfig.__dataclass_fields__}
_KNOWN_STAGE = {f for f in StageConfig.__dataclass_fields__}


def config_from_dict(d):
    unknown = set(d) - _KNOWN_TOP
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)}", field=sorted(unknown)[0])
    if "stages" not in d:
        raise ConfigError("missing required key", field="stages")
    stages = []
    for i, s in enumerate(d["stages"]):
        if not isinstance(s, dict):
            raise ConfigError("each stage must be a table", field=f"stages[{i}]")
        bad = set(s) - _KNOWN_STAGE
        if bad:
            raise ConfigError(f"unknown key(s) {sorted(bad)}", field=f"stages[{i}].{sorted(bad)[0]}")
        if "out_channels" not in s:
            raise ConfigError("missing required key", field=f"stages[{i}].out_channels")
        stages.append(StageConfig(**s))
    if stages and not any(s.is_final for s in stages):
        stages[-1] = replace(stages[-1], is_final=True)
    rest = {k: v for k, v in d.items() if k != "stages"}
    try:
        return BackboneConfig(stages=tuple(stages), **rest)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def loads_config(text):
    """Parse a TOML backbone config. Syntax errors surface as tomllib.TOMLDecodeError."""
    return config_from_dict(tomllib.loads(text))


def load_config(path):
    with open(path, "rb") as fh:
        return config_from_dict(tomllib.load(fh))


def dumps_config(cfg):
    d = cfg.to_dict()
    lines = []
    for k, v in d.items():
        if k != "stages":
            lines.append(f"{k} = {_toml_value(v)}")
    for s in d["stages"]:
        lines.append("")
        lines.append("[[stages]]")
        lines += [f"{k} = {_toml_value(v)}" for k, v in s.items()]
    return "\n".join(lines) + "\n"


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return f'"{v}"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return repr(v)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class Stage(Module):
    def __init__(self, cfg, stage_cfg, c_in, rng, dtype):
        c_out = stage_cfg.out_channels
        self.uses_mkp = stage_cfg.is_final and cfg.use_mkp
        if self.uses_mkp:
            self.mkp = MKP(MkpConfig(c_in, cfg.mkp_kernels, cfg.mkp_activation), rng, dtype)
            if c_out != c_in:
                self.expand = ConvBnAct(ConvSpec(c_in, c_out, 1), rng, dtype=dtype)
        elif stage_cfg.downsample == "decoupled":
            self.down = DecoupledDownsample(DownsampleSpec(c_in, c_out, groups=c_in), rng, dtype)
        else:
            self.down = FusedDownsample(c_in, c_out, rng, dtype)
        if cfg.use_fcm:
            fcm_cfg = FcmConfig(c_out, stage_cfg.alpha, cfg.channel_mapping, cfg.spatial_mapping)
            self.fcm = [FCM(fcm_cfg, rng, dtype) for _ in range(stage_cfg.num_fcm_blocks)]
        else:
            self.plain = [
                ConvBnAct(ConvSpec(c_out, c_out, 3, 1, 1), rng, dtype=dtype) for _ in range(stage_cfg.num_fcm_blocks)
            ]

    def forward(self, x):
        if self.uses_mkp:
            x = self.mkp(x)
            if hasattr(self, "expand"):
                x = self.expand(x)
        else:
            x = self.down(x)
        for block in getattr(self, "fcm", None) or getattr(self, "plain", None) or []:
            x = block(x)
        return x


class Backbone(Module):
    def __init__(self, cfg, seed=0, dtype=T.DEFAULT_DTYPE):
        self.cfg = cfg
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.stem = ConvBnAct(ConvSpec(cfg.in_channels, cfg.stem_out, 3, 2, 1), rng, dtype=dtype)
        c_in = cfg.stem_out
        self.stages = []
        for s in cfg.stages:
            self.stages.append(Stage(cfg, s, c_in, rng, dtype))
            c_in = s.out_channels
        self.strides = cfg.stage_strides()
        self.export_indices = cfg.export_indices()

    def children(self):
        yield "stem", self.stem
        for i, s in enumerate(self.stages):
            yield f"stage{i + 1}", s

    @property
    def export_strides(self):
        return tuple(self.strides[i] for i in self.export_indices)

    @property
    def required_multiple(self):
        return max(self.export_strides)

    @property
    def default_input_shape(self):
        m = max(64, self.required_multiple)
        return (1, self.cfg.in_channels, m, m)

    def downsample_plan(self):
        """(stage name, C1, C2, g) for every stage that downsamples."""
        c_in = self.cfg.stem_out
        plan = []
        for i, (s, stage) in enumerate(zip(self.cfg.stages, self.stages)):
            if not stage.uses_mkp:
                plan.append((f"stage{i + 1}", c_in, s.out_channels, c_in))
            c_in = s.out_channels
        return plan

    def forward_all(self, x):
        if x.c != self.cfg.in_channels:
            raise ShapeError(f"input has c={x.c}, model expects {self.cfg.in_channels}", dim="c")
        m = self.required_multiple
        for dim, size in (("h", x.h), ("w", x.w)):
            if size % m:
                raise ShapeError(f"input {dim}={size} must be a multiple of {m}", dim=dim)
        x = self.stem(x)
        outs = []
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        return outs

    def forward(self, x):
        outs = self.forward_all(x)
        return [outs[i] for i in self.export_indices]


def build_backbone(cfg, seed=0, dtype=T.DEFAULT_DTYPE):
    """Construct a backbone with deterministic parameters drawn from ``seed``."""
    if not isinstance(cfg, BackboneConfig):
        raise ConfigError("expected a BackboneConfig", field="cfg")
    cfg.validate()
    return Backbone(cfg, seed, dtype)


def forward(model, x):
    return model(x)


# ---------------------------------------------------------------------------
# Training smoke test
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticTask:
    """Dense regression: each export predicts a fixed random linear map of its input patch."""

    batch: int = 2
    size: int = 32
    target_channels: int = 2


def _make_task(model, task, seed, dtype):
    rng = np.random.default_rng(seed)
    c = model.cfg.in_channels
    x = Tensor4(rng.uniform(-1, 1, size=(task.batch, c, task.size, task.size)).astype(dtype))
    targets, heads = [], []
    for idx in model.export_indices:
        s = model.strides[idx]
        proj = ConvSpec(c, task.target_channels, s, s, 0)
        w = rng.normal(size=proj.weight_shape) / math.sqrt(c * s * s / 3.0)
        targets.append(T.conv2d(x, proj, Tensor4(w.astype(dtype))))
        head = ConvSpec(model.cfg.stages[idx].out_channels, task.target_channels, 1)
        heads.append((head, Tensor4(np.zeros(head.weight_shape, dtype=dtype), requires_grad=True)))
    return x, targets, heads


def train_demo(model, task=SyntheticTask(), steps=200, lr=0.01, seed=0, dtype=T.DEFAULT_DTYPE):
    """Plain SGD on the synthetic task.

    The loss is the sum over exported maps of the mean squared error between a
    zero-initialised 1x1 readout of the map and its target.  Returns the loss
    recorded before each update, so ``steps=0`` gives an empty curve.
    """
    x, targets, heads = _make_task(model, task, seed, dtype)
    params = model.parameters() + [w for _, w in heads]
    model.train()
    losses = []
    for step in range(steps):
        for p in params:
            p.grad = None
        with T.Tape() as tape:
            feats = model(x)
            terms = [T.mse_loss(T.conv2d(f, spec, w), t) for f, (spec, w), t in zip(feats, heads, targets)]
            loss = terms[0]
            for term in terms[1:]:
                loss = T.eltwise_add(loss, term)
        value = loss.item()
        if not np.isfinite(value):
            raise DivergenceError(step, value)
        losses.append(value)
        tape.backward(loss)
        for p in params:
            if p.grad is not None:
                p.data = p.data - lr * p.grad
    return losses
