"""Independent oracles and the verification suites behind ``fcmnet verify``.

Nothing here calls the optimized convolution: :func:`naive_conv2d` and
:func:`fcm_reference` are plain loops over numpy arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .blocks import FCM, MKP, Conv2d, ConvBnAct, DecoupledDownsample, DownsampleSpec, FcmConfig, MkpConfig
from .errors import ShapeError, UsageError
from .tensor import BnParams, ConvSpec, Tensor4

ORACLE_TOL = 1e-12
GRAD_TOL = 1e-5
GRAD_STEP = 1e-6


def _arr(v):
    return v.data if isinstance(v, Tensor4) else np.asarray(v, dtype=np.float64)


def naive_conv2d(x, spec, weights, bias=None):
    """Direct cross-correlation: seven nested loops, explicit zero-padding reads."""
    xd, wd = _arr(x), _arr(weights)
    n, C, H, W = xd.shape
    O, g = spec.out_channels, spec.groups
    (kh, kw), (sh, sw), (ph, pw) = spec.kernel, spec.stride, spec.padding
    if C != spec.in_channels:
        raise ShapeError(f"input has c={C}, spec expects {spec.in_channels}", dim="c")
    if wd.shape != (O, C // g, kh, kw):
        raise ShapeError(f"weight shape {wd.shape} does not match spec", dim="weight")
    if spec.has_bias != (bias is not None):
        raise ShapeError("bias must be given iff spec.has_bias", dim="bias")
    bd = _arr(bias).reshape(-1) if bias is not None else None
    oh = (H + 2 * ph - kh) // sh + 1
    ow = (W + 2 * pw - kw) // sw + 1
    cin_g, cout_g = C // g, O // g
    out = np.zeros((n, O, oh, ow))
    for b in range(n):
        for o in range(O):
            grp = o // cout_g
            for y in range(oh):
                for xo in range(ow):
                    acc = 0.0 if bd is None else float(bd[o])
                    for ci in range(cin_g):
                        c = grp * cin_g + ci
                        for i in range(kh):
                            r = y * sh + i - ph
                            if r < 0 or r >= H:
                                continue
                            for j in range(kw):
                                q = xo * sw + j - pw
                                if q < 0 or q >= W:
                                    continue
                                acc += xd[b, c, r, q] * wd[o, ci, i, j]
                    out[b, o, y, xo] = acc
    return Tensor4(out)


def naive_global_avg_pool(x):
    xd = _arr(x)
    n, c, h, w = xd.shape
    out = np.zeros((n, c, 1, 1))
    for b in range(n):
        for k in range(c):
            s = 0.0
            for i in range(h):
                for j in range(w):
                    s += xd[b, k, i, j]
            out[b, k, 0, 0] = s / (h * w)
    return out


def naive_broadcast_mul(x, w):
    """Expand ``w`` to ``x``'s shape by explicit index clamping, then multiply."""
    xd, wd = _arr(x), _arr(w)
    out = np.empty_like(xd)
    for idx in np.ndindex(*xd.shape):
        widx = tuple(0 if wd.shape[a] == 1 else idx[a] for a in range(4))
        out[idx] = xd[idx] * wd[widx]
    return out


# ---------------------------------------------------------------------------
# Finite-difference gradient check
# ---------------------------------------------------------------------------

@dataclass
class GradcheckReport:
    max_rel_error: float
    worst_param: str | None
    worst_index: tuple | None
    analytic: float = 0.0
    numeric: float = 0.0
    checked: int = 0
    tolerance: float = GRAD_TOL
    nonfinite: bool = False
    failures: int = 0
    records: list | None = None

    @property
    def passed(self):
        return not self.nonfinite and self.max_rel_error < self.tolerance

    def __str__(self):
        state = "PASS" if self.passed else "FAIL"
        where = f" at {self.worst_param}{list(self.worst_index)}" if self.worst_param is not None else ""
        extra = " (non-finite value)" if self.nonfinite else ""
        bad = f", {self.failures} above tol" if self.failures else ""
        return f"{state} max_rel_err={self.max_rel_error:.3e}{where} over {self.checked} coords{bad}{extra}"


def rel_error(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def gradcheck(f, params, tolerance=GRAD_TOL, step=GRAD_STEP, record=False):
    """Compare tape gradients of scalar ``f()`` with central differences.

    ``params`` is a list of leaf tensors or a name -> tensor mapping.  Every
    coordinate is perturbed by +/- ``step`` in place and restored afterwards.
    With ``record`` the report keeps (name, index, analytic, numeric) for
    every coordinate.
    """
    named = list(params.items()) if isinstance(params, dict) else [(f"p{i}", p) for i, p in enumerate(params)]
    for _, p in named:
        p.grad = None
        p.requires_grad = True
    with T.Tape() as tape:
        root = f()
    report = GradcheckReport(0.0, None, None, tolerance=tolerance, records=[] if record else None)
    if not np.isfinite(root.data).all():
        report.nonfinite = True
        return report
    if root._tape is tape:
        tape.backward(root)

    for name, p in named:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        data = p.data
        for idx in np.ndindex(*data.shape):
            orig = data[idx]
            data[idx] = orig + step
            fp = f().item()
            data[idx] = orig - step
            fm = f().item()
            data[idx] = orig
            report.checked += 1
            num = (fp - fm) / (2 * step)
            ana = float(analytic[idx])
            if not (math.isfinite(num) and math.isfinite(ana)):
                report.nonfinite = True
                report.worst_param, report.worst_index = name, idx
                return report
            err = rel_error(ana, num)
            report.failures += err >= tolerance
            if record:
                report.records.append((name, idx, ana, num))
            if err > report.max_rel_error or report.worst_param is None:
                report.max_rel_error = err
                report.worst_param, report.worst_index = name, idx
                report.analytic, report.numeric = ana, num
    return report


def projection_loss(seed=1234):
    """Return f(outs) = sum_i <out_i, R_i> with fixed random R_i in [-1, 1]."""
    rng = np.random.default_rng(seed)
    weights = {}

    def loss(outs):
        if isinstance(outs, Tensor4):
            outs = [outs]
        total = None
        for i, o in enumerate(outs):
            if (i, o.shape) not in weights:
                weights[(i, o.shape)] = Tensor4(rng.uniform(-1, 1, size=o.shape))
            term = T.sum_all(T.eltwise_mul_broadcast(o, weights[(i, o.shape)]))
            total = term if total is None else T.eltwise_add(total, term)
        return total

    return loss


# ---------------------------------------------------------------------------
# Receptive-field probe
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProbeResult:
    height: int
    width: int


def _in_channels(block):
    for attr in ("cfg", "spec", "ds"):
        obj = getattr(block, attr, None)
        if obj is not None:
            return getattr(obj, "channels", None) or obj.in_channels
    raise UsageError("cannot infer input channels; pass in_channels")


def receptive_field_probe(block, size=31, in_channels=None):
    """Width of the output support produced by a centred unit impulse.

    ``block`` must be linear (activations and batch-norms bypassed, see
    :meth:`Module.linearize`); a homogeneity check guards raw callables.
    """
    if not getattr(block, "is_linear", True):
        raise UsageError("receptive_field_probe needs a linear block; call linearize() first")
    c = in_channels or _in_channels(block)
    impulse = np.zeros((1, c, size, size))
    impulse[:, :, size // 2, size // 2] = 1.0
    out = block(Tensor4(impulse)).data
    doubled = block(Tensor4(2.0 * impulse)).data
    scale = max(np.abs(out).max(), 1e-300)
    if np.abs(doubled - 2.0 * out).max() > 1e-9 * scale:
        raise UsageError("block is not linear: f(2x) != 2 f(x)")
    support = np.abs(out).max(axis=(0, 1)) > ORACLE_TOL
    rows = np.flatnonzero(support.any(axis=1))
    cols = np.flatnonzero(support.any(axis=0))
    if rows.size == 0:
        return ProbeResult(0, 0)
    if rows[0] == 0 or cols[0] == 0 or rows[-1] == out.shape[2] - 1 or cols[-1] == out.shape[3] - 1:
        raise UsageError(f"support touches the border; increase size beyond {size}")
    return ProbeResult(int(rows[-1] - rows[0] + 1), int(cols[-1] - cols[0] + 1))


def closed_form_rf(kernels):
    return 1 + sum(k - 1 for k in kernels)


# ---------------------------------------------------------------------------
# Straight-line FCM recomputation
# ---------------------------------------------------------------------------

def _np_bn(x, bn, training):
    p = bn.params
    if bn.bypass:
        return x
    if training:
        mean = x.mean(axis=(0, 2, 3), keepdims=True)
        var = ((x - mean) ** 2).mean(axis=(0, 2, 3), keepdims=True)
    else:
        mean = p.running_mean.reshape(1, -1, 1, 1)
        var = p.running_var.reshape(1, -1, 1, 1)
    return p.gamma.data * (x - mean) / np.sqrt(var + p.eps) + p.beta.data


def _np_sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


def _np_cell(x, cell, training):
    y = _np_bn(naive_conv2d(x, cell.conv.spec, cell.conv.weight).data, cell.bn, training)
    return y * _np_sigmoid(y) if cell.act == "silu" else y


def fcm_reference(x, block):
    """Recompute an FCM forward from its raw parameters. Returns a dict of stages."""
    xd = _arr(x)
    cfg = block.cfg
    k = int(np.floor(cfg.alpha * cfg.channels + 0.5))
    training = block.training
    xc = _np_cell(xd[:, :k], block.conv3x3, training)
    xs = _np_cell(xd[:, k:], block.pointwise, training)
    if cfg.enable_channel_mapping:
        d = naive_conv2d(xc, block.channel_dw.spec, block.channel_dw.weight).data
        w1 = _np_sigmoid(naive_global_avg_pool(d))
    else:
        w1 = np.ones((1, 1, 1, 1))
    if cfg.enable_spatial_mapping:
        s = naive_conv2d(xs, block.spatial_conv.spec, block.spatial_conv.weight).data
        w2 = _np_sigmoid(_np_bn(s, block.spatial_bn, training))
    else:
        w2 = np.ones((1, 1, 1, 1))
    return {"xc": xc, "xs": xs, "w1": w1, "w2": w2, "out": xc * w2 + xs * w1}


# ---------------------------------------------------------------------------
# Suites
# ---------------------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    value: float
    tolerance: float
    passed: bool
    detail: str = ""

    def line(self):
        state = "PASS" if self.passed else "FAIL"
        return f"[{state}] {self.name:<36} worst={self.value:.3e} tol={self.tolerance:.0e} {self.detail}".rstrip()


def _grad_result(name, f, params):
    rep = gradcheck(f, params)
    return CheckResult(name, rep.max_rel_error, GRAD_TOL, rep.passed, str(rep))


def _u(rng, shape):
    return Tensor4(rng.uniform(-1, 1, size=shape))


def conv_case_matrix():
    """Randomized shape matrix for oracle equivalence (one tuple per case)."""
    cases = []
    for n in (1, 2):
        for c in (1, 3, 8):
            for h in (5, 8, 13):
                for w in (5, 8, 13):
                    for k in (1, 3, 5):
                        for stride in (1, 2):
                            for groups in sorted({1, c}):
                                cases.append((n, c, h, w, k, stride, groups))
    return cases


def conv_oracle_case(case, seed):
    n, c, h, w, k, stride, groups = case
    rng = np.random.default_rng(seed)
    out_c = c if groups > 1 else max(1, (c * 3 + 1) // 2)
    spec = ConvSpec(c, out_c, k, stride, k // 2, groups=groups, has_bias=bool(seed % 2))
    x = _u(rng, (n, c, h, w))
    wt = _u(rng, spec.weight_shape)
    b = _u(rng, (1, out_c, 1, 1)) if spec.has_bias else None
    fast = T.conv2d(x, spec, wt, b).data
    slow = naive_conv2d(x, spec, wt, b).data
    return float(np.abs(fast - slow).max())


def run_ops_suite(seed=0, oracle_cases=24):
    """Gradient and oracle checks for every tensor-core op."""
    rng = np.random.default_rng(seed)
    results = []

    # oracle agreement on a strided sample of the shape matrix
    matrix = conv_case_matrix()
    picks = matrix[:: max(1, len(matrix) // oracle_cases)]
    worst = max(conv_oracle_case(case, seed + i) for i, case in enumerate(picks))
    results.append(CheckResult("conv2d vs naive oracle", worst, ORACLE_TOL, worst <= ORACLE_TOL, f"{len(picks)} cases"))
    x = _u(rng, (2, 3, 5, 4))
    gap_err = float(np.abs(T.global_avg_pool(x).data - naive_global_avg_pool(x)).max())
    results.append(CheckResult("global_avg_pool vs naive oracle", gap_err, ORACLE_TOL, gap_err <= ORACLE_TOL))

    conv_cases = {
        "conv2d": ConvSpec(3, 4, 3, 1, 1, has_bias=True),
        "conv2d[grouped,stride2]": ConvSpec(4, 6, 3, 2, 1, groups=2),
        "conv2d[depthwise]": ConvSpec(4, 4, 3, 1, 1, groups=4),
        "conv2d[pointwise]": ConvSpec(4, 3, 1),
    }
    for name, spec in conv_cases.items():
        x = _u(rng, (2, spec.in_channels, 5, 6))
        wt = _u(rng, spec.weight_shape)
        b = _u(rng, (1, spec.out_channels, 1, 1)) if spec.has_bias else None
        loss = projection_loss(seed)
        params = [x, wt] + ([b] if b is not None else [])
        results.append(_grad_result(name, lambda s=spec, x=x, wt=wt, b=b, loss=loss: loss(T.conv2d(x, s, wt, b)), params))

    for training in (True, False):
        bn = BnParams.identity(3)
        bn.gamma.data = rng.uniform(0.5, 1.5, size=(1, 3, 1, 1))
        bn.beta.data = rng.uniform(-1, 1, size=(1, 3, 1, 1))
        bn.running_mean = rng.uniform(-0.5, 0.5, size=3)
        bn.running_var = rng.uniform(0.5, 1.5, size=3)
        x = _u(rng, (2, 3, 4, 4))
        loss = projection_loss(seed)
        results.append(_grad_result(
            f"batch_norm[{'train' if training else 'eval'}]",
            lambda x=x, bn=bn, tr=training, loss=loss: loss(T.batch_norm(x, bn, tr)),
            [x, bn.gamma, bn.beta],
        ))

    unary = {"sigmoid": T.sigmoid, "silu": T.silu, "global_avg_pool": T.global_avg_pool,
             "sum_all": T.sum_all, "mean_all": T.mean_all}
    for name, op in unary.items():
        x = _u(rng, (2, 3, 4, 5))
        loss = projection_loss(seed)
        results.append(_grad_result(name, lambda x=x, op=op, loss=loss: loss(op(x)), [x]))

    x = _u(rng, (2, 8, 3, 3))
    loss = projection_loss(seed)
    results.append(_grad_result("split_channels", lambda: loss(list(T.split_channels(x, 0.75))), [x]))
    parts = [_u(rng, (2, c, 3, 3)) for c in (1, 2, 3)]
    loss = projection_loss(seed)
    results.append(_grad_result("concat_channels", lambda: loss(T.concat_channels(parts)), parts))
    for wshape in ((1, 4, 1, 1), (2, 1, 3, 3), (2, 4, 3, 3)):
        x, wt = _u(rng, (2, 4, 3, 3)), _u(rng, wshape)
        loss = projection_loss(seed)
        results.append(_grad_result(
            f"eltwise_mul_broadcast{list(wshape)}", lambda x=x, wt=wt, loss=loss: loss(T.eltwise_mul_broadcast(x, wt)), [x, wt]
        ))
    a, b = _u(rng, (2, 3, 3, 3)), _u(rng, (2, 3, 3, 3))
    loss = projection_loss(seed)
    results.append(_grad_result("eltwise_add", lambda: loss(T.eltwise_add(a, b)), [a, b]))
    results.append(_grad_result("mse_loss", lambda: T.mse_loss(a, b), [a, b]))
    return results


def _block_params(block, extra=()):
    d = dict(block.named_parameters())
    for i, t in enumerate(extra):
        d[f"input{i}"] = t
    return d


def run_blocks_suite(seed=0):
    rng = np.random.default_rng(seed)
    results = []

    fcm = FCM(FcmConfig(8, 0.5), rng)
    x = _u(rng, (1, 8, 6, 6))
    loss = projection_loss(seed)
    results.append(_grad_result("fcm_forward", lambda: loss(fcm(x)), _block_params(fcm, [x])))
    ref = fcm_reference(x, fcm)["out"]
    err = float(np.abs(fcm(x).data - ref).max())
    results.append(CheckResult("fcm vs straight-line oracle", err, ORACLE_TOL, err <= ORACLE_TOL))

    mkp = MKP(MkpConfig(4, (3, 5, 7)), rng)
    x = _u(rng, (1, 4, 6, 6))
    loss = projection_loss(seed)
    results.append(_grad_result("mkp_forward", lambda: loss(mkp(x)), _block_params(mkp, [x])))

    down = DecoupledDownsample(DownsampleSpec(4, 8), rng)
    x = _u(rng, (2, 4, 6, 6))
    loss = projection_loss(seed)
    results.append(_grad_result("decoupled_downsample_forward", lambda: loss(down(x)), _block_params(down, [x])))

    cell = ConvBnAct(ConvSpec(3, 4, 3, 1, 1), rng)
    x = _u(rng, (2, 3, 5, 5))
    loss = projection_loss(seed)
    results.append(_grad_result("conv_bn_act", lambda: loss(cell(x)), _block_params(cell, [x])))

    for kernels in ((3, 5, 7), (3, 3, 3)):
        probe = receptive_field_probe(MKP(MkpConfig(4, kernels), rng).linearize(), size=31)
        want = closed_form_rf(kernels)
        got = max(abs(probe.height - want), abs(probe.width - want))
        results.append(CheckResult(
            f"mkp{kernels} receptive field", float(got), 0, got == 0, f"probe={probe.height}x{probe.width} expected={want}"
        ))
    return results


def run_model_suite(seed=0, batch=2):
    """End-to-end gradcheck of the 4/8/8/8 backbone on 3x16x16 inputs.

    With batch 1 the stride-16 maps are 1x1, so their training-mode batch
    norms see a single value and return beta exactly; batch 2 keeps every
    normalisation non-degenerate.
    """
    from .backbone import build_backbone, tiny_config

    rng = np.random.default_rng(seed)
    model = build_backbone(tiny_config(), seed)
    x = _u(rng, (batch, 3, 16, 16))
    loss = projection_loss(seed)
    name = f"backbone end-to-end (4/8/8/8, {batch}x3x16x16)"
    return [_grad_result(name, lambda: loss(model(x)), _block_params(model, [x]))]


SUITES: dict[str, Callable] = {"ops": run_ops_suite, "blocks": run_blocks_suite, "model": run_model_suite}
