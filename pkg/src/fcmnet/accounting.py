"""Parameter and multiply-accumulate accounting.

Conv layers are counted as ``kh*kw*(C_in/g)*C_out`` weights (+ bias), batch-norm
layers as ``2*C`` learnable values; running statistics are not parameters.
MACs per layer are ``weights * output positions * batch`` for convolutions and
one fused multiply-add per output element for batch-norm.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .blocks import BatchNorm2d, Conv2d
from .errors import AuditError, ConfigError
from .tensor import Tensor4


def count_params_standard(c1, c2, k=3):
    """Weights of a fused k x k convolution from c1 to c2 channels (no bias)."""
    return k * k * c1 * c2


def count_params_decoupled(c1, c2, g):
    """Weights of a grouped 3x3 (c1 -> c1, g groups) followed by a 1x1 c1 -> c2."""
    if g < 1 or c1 % g:
        raise ConfigError(f"C1={c1} is not divisible by g={g}", field="groups")
    return 9 * c1 * (c1 // g) + c1 * c2


@dataclass
class LayerEntry:
    name: str
    kind: str
    params: int
    macs: int
    output_shape: tuple

    @property
    def flops(self):
        return 2 * self.macs


@dataclass
class ComparisonRow:
    stage: str
    in_channels: int
    out_channels: int
    groups: int
    standard: int
    decoupled: int

    @property
    def ratio(self):
        return self.decoupled / self.standard


@dataclass
class CountReport:
    entries: list = field(default_factory=list)
    comparison: list = field(default_factory=list)

    @property
    def conv_params(self):
        return sum(e.params for e in self.entries if e.kind == "conv")

    @property
    def bn_params(self):
        return sum(e.params for e in self.entries if e.kind == "bn")

    @property
    def total_params(self):
        return sum(e.params for e in self.entries)

    @property
    def total_macs(self):
        return sum(e.macs for e in self.entries)

    def totals(self):
        return {
            "params": self.total_params,
            "conv_params": self.conv_params,
            "bn_params": self.bn_params,
            "macs": self.total_macs,
            "flops": 2 * self.total_macs,
        }

    def to_dict(self):
        return {
            "entries": [
                {**asdict(e), "output_shape": list(e.output_shape), "flops": e.flops} for e in self.entries
            ],
            "totals": self.totals(),
            "comparison": [{**asdict(r), "ratio": r.ratio} for r in self.comparison],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d):
        entries = [
            LayerEntry(e["name"], e["kind"], e["params"], e["macs"], tuple(e["output_shape"])) for e in d["entries"]
        ]
        comparison = [ComparisonRow(**{k: v for k, v in r.items() if k != "ratio"}) for r in d.get("comparison", [])]
        report = cls(entries, comparison)
        if report.totals() != d["totals"]:
            raise AuditError("serialized totals do not match the entry list")
        return report

    def format_table(self):
        rows = [("layer", "kind", "params", "MACs", "FLOPs(2xMAC)", "output")]
        for e in self.entries:
            rows.append((e.name, e.kind, str(e.params), str(e.macs), str(e.flops), "x".join(map(str, e.output_shape))))
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        align = ["<", "<", ">", ">", ">", "<"]

        def fmt(r):
            return "  ".join(f"{v:{a}{w}}" for v, a, w in zip(r, align, widths)).rstrip()

        lines = [fmt(rows[0]), "-" * (sum(widths) + 2 * (len(widths) - 1))]
        lines += [fmt(r) for r in rows[1:]]
        lines.append("-" * len(lines[1]))
        t = self.totals()
        if self.comparison:
            lines.append("")
            lines.append("downsample      C1    C2     g  standard  decoupled  ratio")
            for r in self.comparison:
                lines.append(
                    f"{r.stage:<12}{r.in_channels:>6}{r.out_channels:>6}{r.groups:>6}"
                    f"{r.standard:>10}{r.decoupled:>11}{r.ratio:>7.3f}"
                )
            lines.append("")
        lines.append(
            f"TOTAL params={t['params']} (conv={t['conv_params']}, bn={t['bn_params']})"
            f"  MACs={t['macs']}  FLOPs={t['flops']}"
        )
        return "\n".join(lines)


def _closed_form(layer):
    if isinstance(layer, Conv2d):
        return layer.spec.param_count
    return 2 * layer.channels


def _constructed(layer):
    return sum(int(p.data.size) for _, p in layer.named_parameters())


def audit_model(model, input_shape=None, compare=False):
    """Walk every conv/BN layer of ``model`` and build a :class:`CountReport`.

    ``model`` is any :class:`~fcmnet.blocks.Module`; output shapes are traced
    with one eval-mode forward pass on zeros of ``input_shape`` (batch scaled
    analytically).  For a backbone ``input_shape`` defaults to (1, C, 64, 64).
    """
    layers = [(n, m) for n, m in model.named_modules() if isinstance(m, (Conv2d, BatchNorm2d))]
    report = CountReport()
    if not layers:
        return report
    if input_shape is None:
        input_shape = getattr(model, "default_input_shape", None)
        if input_shape is None:
            raise ConfigError("input_shape is required to trace output shapes", field="input_shape")
    batch = input_shape[0]
    closed_forms = {}
    for name, layer in layers:
        closed, built = _closed_form(layer), _constructed(layer)
        if closed != built:
            raise AuditError(f"{name}: closed form {closed} != constructed {built}", layer=name)
        closed_forms[name] = closed
        layer.last_out_shape = None
    was_training = model.training
    model.eval()
    try:
        model(Tensor4(np.zeros((1,) + tuple(input_shape[1:]))))
    finally:
        model.train(was_training)

    for name, layer in layers:
        closed = closed_forms[name]
        if layer.last_out_shape is None:
            raise AuditError(f"{name}: layer not reached by the forward trace", layer=name)
        _, c, h, w = layer.last_out_shape
        positions = h * w * batch
        if isinstance(layer, Conv2d):
            macs = layer.spec.weight_count * positions
            kind = "conv"
        else:
            macs = c * positions
            kind = "bn"
        report.entries.append(LayerEntry(name, kind, closed, macs, (batch, c, h, w)))

    if compare and hasattr(model, "downsample_plan"):
        for stage, c1, c2, g in model.downsample_plan():
            report.comparison.append(
                ComparisonRow(stage, c1, c2, g, count_params_standard(c1, c2, 3), count_params_decoupled(c1, c2, g))
            )
    return report
