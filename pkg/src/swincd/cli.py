"""Command-line entry points.

Commands: train, eval, predict, tile, synth, colorize, plot.  Success exits
0; known failures print one ``ErrorClass: message`` line to stderr and exit
nonzero.
"""

import argparse
import logging
import os
import sys
from pathlib import Path

import yaml

from . import data as data_mod
from . import training
from .config import ENV_OUT_DIR, ENV_SEED, load_run_config
from .data import SynthSpec, colorize, load_label, save_image, synth_dataset
from .errors import ConfigurationError, DatasetError, SwinCDError


def _cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    result = training.train(cfg, resume=args.resume,
                            deterministic=args.deterministic)
    print(f"trained {result.epochs_run} epochs, best val F1 "
          f"{result.best_f1:.4f}")
    print(f"log: {result.log_path}")
    print(f"best checkpoint: {result.best_path}")
    return 0


def _cmd_eval(args) -> int:
    data_root = args.data
    if data_root is None:
        import torch
        payload = torch.load(args.ckpt, map_location="cpu", weights_only=False)
        data_root = payload.get("extra", {}).get("run_config", {}).get("data_root")
        if not data_root:
            raise ConfigurationError(
                "no --data given and checkpoint carries no dataset path"
            )
    per_image, aggregate, counts = training.evaluate(
        args.ckpt, data_root, args.split, threshold=args.threshold
    )
    out_dir = Path(args.out or (Path(args.ckpt).parent / f"eval_{args.split}"))
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.txt").write_text(aggregate.to_text())
    with (out_dir / "per_image.txt").open("w") as fh:
        for name, report, _ in per_image:
            fh.write(f"[{name}]\n{report.to_text()}\n")
    print(aggregate.to_text(), end="")
    print(f"confusion tp={counts.tp} tn={counts.tn} fp={counts.fp} fn={counts.fn}")
    print(f"reports written to {out_dir}")
    return 0


def _cmd_predict(args) -> int:
    paths = training.predict(args.ckpt, args.a, args.b, label_path=args.label,
                             out_dir=args.out, threshold=args.threshold)
    for kind, path in paths.items():
        print(f"{kind}: {path}")
    return 0


def _cmd_tile(args) -> int:
    layout = data_mod.tile_dataset(args.input, args.out, args.size)
    total = sum(len(v) for v in layout.splits.values())
    print(f"wrote {total} tiles to {layout.root}")
    return 0


def _cmd_synth(args) -> int:
    raw = yaml.safe_load(Path(args.spec).read_text()) or {}
    if not isinstance(raw, dict):
        raise ConfigurationError(f"synth spec {args.spec} must be a mapping")
    out_dir = raw.pop("out_dir", None)
    if args.out:
        out_dir = args.out
    if ENV_OUT_DIR in os.environ:
        out_dir = os.environ[ENV_OUT_DIR]
    if not out_dir:
        raise ConfigurationError(
            "no output directory: pass --out, set out_dir in the spec, "
            f"or export {ENV_OUT_DIR}"
        )
    if ENV_SEED in os.environ:
        raw["seed"] = int(os.environ[ENV_SEED])
    try:
        spec = SynthSpec(**raw)
    except TypeError as exc:
        raise ConfigurationError(f"bad synth spec field: {exc}")
    layout = synth_dataset(spec, out_dir)
    total = sum(len(v) for v in layout.splits.values())
    print(f"wrote {total} synthetic pairs to {layout.root}")
    return 0


def _cmd_colorize(args) -> int:
    pred = load_label(args.pred)
    label = load_label(args.label)
    out = args.out or str(Path(args.pred).with_name(Path(args.pred).stem + "_color.png"))
    save_image(out, colorize(pred, label))
    print(f"colorized map: {out}")
    return 0


def _cmd_plot(args) -> int:
    paths = training.plot_log(args.log, args.out)
    for kind, path in paths.items():
        print(f"{kind}: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="swincd",
        description="Change detection with a dense Swin V2 + CNN network",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a YAML config")
    p.add_argument("--config", required=True, help="run config YAML")
    p.add_argument("--deterministic", action="store_true",
                   help="force serial data loading")
    p.add_argument("--resume", default=None, help="resume from last.pt")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", required=True, choices=data_mod.SPLITS)
    p.add_argument("--data", default=None,
                   help="dataset root (default: from checkpoint)")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", default=None, help="report directory")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("predict", help="predict one image pair")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--a", required=True, help="pre-change image")
    p.add_argument("--b", required=True, help="post-change image")
    p.add_argument("--label", default=None, help="optional ground truth")
    p.add_argument("--out", default="predictions")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("tile", help="cut a dataset into non-overlapping tiles")
    p.add_argument("--in", dest="input", required=True, help="dataset root")
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--out", required=True, help="tiled dataset root")
    p.set_defaults(func=_cmd_tile)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True, help="synth spec YAML")
    p.add_argument("--out", default=None, help="dataset root")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("colorize", help="render TP/TN/FP/FN colors")
    p.add_argument("--pred", required=True, help="binary prediction PNG")
    p.add_argument("--label", required=True, help="binary label PNG")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_colorize)

    p = sub.add_parser("plot", help="render curves from a training log")
    p.add_argument("--log", required=True)
    p.add_argument("--out", default="plots")
    p.set_defaults(func=_cmd_plot)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SwinCDError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
