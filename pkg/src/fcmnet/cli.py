"""``fcmnet`` command line: describe, forward, verify, train-demo.

Exit codes: 0 success, 1 verification failure, 2 input/config error,
3 audit failure, 4 numeric divergence.
"""
from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import tensor as T
from .accounting import audit_model
from .backbone import (
    WIDTH_PRESETS,
    ablation_variant,
    build_backbone,
    default_config,
    load_config,
    tomllib,
    train_demo,
)
from .errors import AuditError, ConfigError, DivergenceError, ShapeError
from .tensor import Tensor4
from .verification import SUITES

EXIT_OK, EXIT_VERIFY, EXIT_INPUT, EXIT_AUDIT, EXIT_DIVERGED = 0, 1, 2, 3, 4


def _add_model_args(p):
    p.add_argument("config", nargs="?", help="TOML backbone config (default: toy full model)")
    p.add_argument("--width", choices=sorted(WIDTH_PRESETS), default="n", help="preset used when no config is given")
    p.add_argument("--rr", action=argparse.BooleanOptionalAction, default=None, help="decoupled downsampling")
    p.add_argument("--fcm", action=argparse.BooleanOptionalAction, default=None, help="FCM blocks in each stage")
    p.add_argument("--mkp", action=argparse.BooleanOptionalAction, default=None, help="MKP replaces the last downsample")
    p.add_argument("--baseline", action="store_true", help="shorthand for --no-rr --no-fcm --no-mkp")


def _resolve_config(args):
    cfg = load_config(args.config) if args.config else default_config(args.width)
    flags = [args.rr, args.fcm, args.mkp]
    if args.baseline:
        flags = [False if f is None else f for f in flags]
    if any(f is not None for f in flags):
        rr = flags[0] if flags[0] is not None else all(s.downsample == "decoupled" for s in cfg.stages)
        fcm = flags[1] if flags[1] is not None else cfg.use_fcm
        mkp = flags[2] if flags[2] is not None else cfg.use_mkp
        cfg = ablation_variant(cfg, rr=rr, fcm=fcm, mkp=mkp)
    return cfg


def cmd_describe(args):
    cfg = _resolve_config(args)
    model = build_backbone(cfg, args.seed)
    if args.input_size:
        shape = (args.batch, cfg.in_channels, args.input_size[0], args.input_size[1])
    else:
        shape = (args.batch,) + tuple(model.default_input_shape[1:])
    report = audit_model(model, shape, compare=args.compare_rr)
    if args.json:
        print(report.to_json())
        return EXIT_OK
    strides = ", ".join(f"stage{i + 1}@{s}" for i, s in zip(model.export_indices, model.export_strides))
    print(f"input {'x'.join(map(str, shape))}  exports: {strides}")
    print(f"alphas={list(cfg.alphas)} mkp={cfg.use_mkp} kernels={list(cfg.mkp_kernels)} fcm={cfg.use_fcm}")
    print(report.format_table())
    return EXIT_OK


def write_pgm(path, plane):
    lo, hi = float(plane.min()), float(plane.max())
    scaled = np.zeros_like(plane) if hi == lo else (plane - lo) / (hi - lo) * 255.0
    pixels = np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def cmd_forward(args):
    cfg = _resolve_config(args)
    model = build_backbone(cfg, args.seed)
    if args.input:
        x = T.load_tensor(args.input)
    else:
        n, c, h, w = args.random
        rng = np.random.default_rng(args.seed)
        x = Tensor4(rng.uniform(-1, 1, size=(n, c, h, w)))
    if args.eval:
        model.eval()
    outs = model(x)
    os.makedirs(args.out, exist_ok=True)
    for stride, fmap in zip(model.export_strides, outs):
        path = os.path.join(args.out, f"stride{stride}.bin")
        T.save_tensor(path, fmap)
        print(f"{path}  {'x'.join(map(str, fmap.shape))}")
        if args.pgm:
            for b in range(fmap.n):
                write_pgm(os.path.join(args.out, f"stride{stride}_b{b}.pgm"), fmap.data[b].mean(axis=0))
    return EXIT_OK


def cmd_verify(args):
    scopes = list(SUITES) if args.scope == "all" else [args.scope]
    failed = []
    for scope in scopes:
        t0 = time.perf_counter()
        results = SUITES[scope](seed=args.seed)
        print(f"== {scope} ({time.perf_counter() - t0:.1f}s)")
        for r in results:
            print(r.line())
            if not r.passed:
                failed.append(r.name)
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_VERIFY
    print("all checks passed")
    return EXIT_OK


def cmd_train_demo(args):
    cfg = _resolve_config(args)
    dtype = np.float32 if args.dtype == "float32" else np.float64
    model = build_backbone(cfg, args.seed, dtype=dtype)
    losses = train_demo(model, steps=args.steps, lr=args.lr, seed=args.seed, dtype=dtype)
    with open(args.csv, "w", newline="") as fh:
        fh.write("step,loss\n")
        for i, v in enumerate(losses):
            fh.write(f"{i},{v!r}\n")
    for i, v in enumerate(losses):
        if i % args.print_every == 0 or i == len(losses) - 1:
            print(f"step {i:4d}  loss {v:.6f}")
    if losses:
        print(f"final/initial loss ratio: {losses[-1] / losses[0]:.4f}")
    print(f"wrote {args.csv}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="fcmnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("describe", help="print the layer table and parameter/MAC totals")
    _add_model_args(p)
    p.add_argument("--json", action="store_true", help="machine-readable report")
    p.add_argument("--compare-rr", action="store_true", help="add standard-vs-decoupled downsample rows")
    p.add_argument("--input-size", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("forward", help="run the backbone and dump exported feature maps")
    _add_model_args(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="input tensor dump")
    src.add_argument("--random", type=int, nargs=4, metavar=("N", "C", "H", "W"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="fcmnet_out")
    p.add_argument("--pgm", action="store_true", help="also write channel-mean PGM images")
    p.add_argument("--eval", action="store_true", help="use running BN statistics instead of batch statistics")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("verify", help="run gradient and oracle checks")
    p.add_argument("--scope", choices=list(SUITES) + ["all"], default="ops")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("train-demo", help="SGD smoke test on a synthetic dense-regression task")
    _add_model_args(p)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", default="train_loss.csv")
    p.add_argument("--dtype", choices=("float64", "float32"), default="float64")
    p.add_argument("--print-every", type=int, default=20)
    p.set_defaults(func=cmd_train_demo)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except tomllib.TOMLDecodeError as exc:
        print(f"error: config parse error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ConfigError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except AuditError as exc:
        print(f"audit failure: {exc}", file=sys.stderr)
        return EXIT_AUDIT
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
