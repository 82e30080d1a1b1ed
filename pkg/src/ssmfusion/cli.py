"""Command-line surface: data generation, training, fusion, evaluation,
FLOP accounting and gradient verification.

Exit codes are a stable contract: 0 success, 1 verification failure,
2 argument error (including missing files), 3 data error (malformed files
or mismatched shapes).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import data, fmt, metrics, network, training
from .tensor import ShapeError, Tensor

CONFIG_KEYS = (
    "bands", "channels", "state_size", "upsample",
    "epochs", "batch_size", "lr0", "halve_every", "seed",
)

_INT_KEYS = {"bands", "channels", "state_size", "epochs", "batch_size", "halve_every", "seed"}

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_ARGS = 2
EXIT_DATA = 3


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def read_config_file(path):
    """Parse a key=value config file; unknown keys are rejected."""
    path = Path(path)
    if not path.exists():
        raise CliError(f"config file not found: {path}", EXIT_ARGS)
    entries = fmt.read_manifest(path)
    values = {}
    for key, raw in entries.items():
        if key not in CONFIG_KEYS:
            raise CliError(
                f"unknown config key {key!r}; valid keys: {', '.join(CONFIG_KEYS)}", EXIT_ARGS
            )
        if key in _INT_KEYS:
            values[key] = int(raw)
        elif key == "lr0":
            values[key] = float(raw)
        else:
            values[key] = raw
    return values


def _require_file(path, what):
    if not Path(path).exists():
        raise CliError(f"{what} not found: {path}", EXIT_ARGS)
    return Path(path)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args):
    try:
        data.generate_and_save(args.out, args.seed, args.count, args.height, args.width, args.bands)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_ARGS) from exc
    print(f"wrote {args.count} samples to {args.out}")
    return EXIT_OK


def _merged_train_settings(args):
    settings = {
        "bands": 8, "channels": 32, "state_size": 8, "upsample": "shuffle",
        "epochs": 200, "batch_size": 32, "lr0": 5e-4, "halve_every": 200, "seed": 0,
    }
    if args.config:
        settings.update(read_config_file(args.config))
    for key in CONFIG_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            settings[key] = flag
    return settings


def cmd_train(args):
    s = _merged_train_settings(args)
    samples, manifest = data.load_dataset(_require_file(args.data, "dataset directory"))
    if int(manifest["S"]) != s["bands"]:
        raise CliError(
            f"dataset has {manifest['S']} bands but config asks for {s['bands']}", EXIT_DATA
        )
    val_count = args.val_count
    if val_count >= len(samples):
        raise CliError("val-count must leave at least one training sample", EXIT_ARGS)
    train_s = samples[: len(samples) - val_count] if val_count else samples
    val_s = samples[len(samples) - val_count:] if val_count else None
    cfg = network.FusionNetConfig(
        bands=s["bands"], channels=s["channels"],
        state_size=s["state_size"], upsample=s["upsample"],
    )
    net = network.build_fusion_net(cfg, seed=s["seed"])
    tc = training.TrainConfig(
        epochs=s["epochs"], batch_size=s["batch_size"], lr0=s["lr0"],
        halve_every=s["halve_every"], seed=s["seed"],
        checkpoint_every=args.checkpoint_every, eval_every=args.eval_every,
    )
    history = training.train(net, train_s, tc, val_samples=val_s,
                             out_dir=args.out, resume=args.resume)
    print(f"trained {len(history)} epochs; final loss {history[-1]['loss']:.6f}")
    return EXIT_OK


def _png_preview(arr, path):
    from PIL import Image

    s = arr.shape[-1]
    picks = (0, s // 2, s - 1)
    chans = []
    for band in picks:
        v = arr[:, :, band].astype(np.float64)
        lo, hi = v.min(), v.max()
        chans.append(((v - lo) / (hi - lo + 1e-12) * 255.0).astype(np.uint8))
    Image.fromarray(np.stack(chans, axis=-1), mode="RGB").save(path)


def cmd_fuse(args):
    ckpt = _require_file(args.ckpt, "checkpoint directory")
    pan_path = _require_file(args.pan, "pan tensor")
    lr_path = _require_file(args.lr, "low-resolution tensor")
    try:
        net, _ = training.load_checkpoint(ckpt)
        pan = fmt.read_tensor(pan_path)
        lr = fmt.read_tensor(lr_path)
        fused = network.forward(net, Tensor(pan), Tensor(lr))
    except fmt.FormatError as exc:
        raise CliError(str(exc), EXIT_DATA) from exc
    except ShapeError as exc:
        raise CliError(str(exc), EXIT_DATA) from exc
    out = Path(args.out)
    fmt.write_tensor(out, fused.data)
    _png_preview(fused.data, out.with_suffix(".png"))
    print(f"wrote {out} and {out.with_suffix('.png')}")
    return EXIT_OK


def cmd_eval(args):
    pred_path = _require_file(args.pred, "prediction tensor")
    gt_path = _require_file(args.gt, "reference tensor")
    try:
        pred = fmt.read_tensor(pred_path)
        gt = fmt.read_tensor(gt_path)
        report = metrics.evaluate(pred, gt)
    except fmt.FormatError as exc:
        raise CliError(str(exc), EXIT_DATA) from exc
    except ShapeError as exc:
        raise CliError(str(exc), EXIT_DATA) from exc
    print(report.as_line())
    return EXIT_OK


def cmd_flops(args):
    try:
        count = network.count_flops(
            args.kind, args.height, args.width, args.channels, args.state, args.params
        )
    except ValueError as exc:
        raise CliError(str(exc), EXIT_ARGS) from exc
    print(count)
    return EXIT_OK


def cmd_gradcheck(args):
    modules = training.GRADCHECK_MODULES if args.module == "all" else (args.module,)
    failed = False
    for module in modules:
        try:
            report = training.gradcheck(module, tolerance=args.tol)
        except ValueError as exc:
            raise CliError(str(exc), EXIT_ARGS) from exc
        print(report.summary())
        failed = failed or not report.passed
    return EXIT_VERIFY if failed else EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ssmfusion",
        description="Scan-based image fusion: synthesize data, train, fuse, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--bands", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="key=value settings file")
    p.add_argument("--out", required=True, help="checkpoint/log directory")
    for key in CONFIG_KEYS:
        flag = "--" + key.replace("_", "-")
        if key in _INT_KEYS:
            p.add_argument(flag, dest=key, type=int)
        elif key == "lr0":
            p.add_argument(flag, dest=key, type=float)
        else:
            p.add_argument(flag, dest=key, choices=network.UPSAMPLE_KINDS)
    p.add_argument("--val-count", type=int, default=0)
    p.add_argument("--eval-every", type=int, default=1)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("fuse", help="run a checkpoint on a pan/lr pair")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pan", required=True)
    p.add_argument("--lr", required=True)
    p.add_argument("--out", required=True, help="output FMT1 path (PNG preview alongside)")
    p.set_defaults(fn=cmd_fuse)

    p = sub.add_parser("eval", help="quality indices of a prediction vs reference")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("flops", help="analytic FLOP count of a block")
    p.add_argument("--kind", required=True, choices=network.FLOP_KINDS)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--state", type=int, default=1)
    p.add_argument("--params", type=int, required=True)
    p.set_defaults(fn=cmd_flops)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--module", required=True,
                   choices=training.GRADCHECK_MODULES + ("all",))
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return EXIT_ARGS
    except fmt.FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ShapeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
