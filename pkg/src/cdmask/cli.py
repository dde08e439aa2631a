"""Command-line entry point: ``cdmask <subcommand> ...``."""
import argparse
import json
import logging
import sys

import numpy as np
import yaml
from PIL import Image

from . import train as T
from .data import ChangeDetectionDataset, SyntheticSpec, binarize_label, generate_synthetic, read_image, scan_dataset
from .metrics import format_report


def _cmd_train(args):
    cfg = T.TrainConfig.from_file(args.config)
    if args.out_dir:
        cfg.out_dir = args.out_dir
    if args.steps:
        cfg.total_steps = args.steps
    result = T.train(cfg, resume=args.resume)
    print(json.dumps({"best_val_f1": result["best_f1"], "steps": result["step"], "out_dir": cfg.out_dir}))


def _cmd_eval(args):
    metrics, counts = T.evaluate(args.ckpt, args.split, args.threshold, args.data_root, args.batch_size)
    sys.stdout.write(format_report(metrics, counts))


def _cmd_sweep(args):
    model, cfg, _ = T.load_checkpoint(args.ckpt)
    records, _ = scan_dataset(args.data_root or cfg.data_root, args.split)
    counts = T.sweep_thresholds(model, ChangeDetectionDataset(records), batch_size=args.batch_size)
    sys.stdout.write(T.format_sweep(counts))


def _cmd_predict(args):
    T.predict_files(args.ckpt, args.t1, args.t2, args.out, args.threshold)


def _cmd_visualize(args):
    pred = binarize_label(read_image(args.pred))
    gt = binarize_label(read_image(args.gt))
    Image.fromarray(T.visualize(pred, gt)).save(args.out)


def _cmd_synth(args):
    with open(args.spec) as fh:
        spec = SyntheticSpec.from_dict(yaml.safe_load(fh) or {})
    manifest = generate_synthetic(spec, args.out)
    print(json.dumps({k: len(v) for k, v in manifest["samples"].items()}))


def build_parser():
    p = argparse.ArgumentParser(prog="cdmask", description="Mask-classification change detection")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train a model from a YAML config")
    s.add_argument("--config", required=True)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--out-dir")
    s.add_argument("--steps", type=int, help="override total_steps")
    s.set_defaults(func=_cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--data-root")
    s.add_argument("--batch-size", type=int, default=4)
    s.set_defaults(func=_cmd_eval)

    s = sub.add_parser("sweep-threshold", help="metrics for T in 0.2..0.8")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--data-root")
    s.add_argument("--batch-size", type=int, default=4)
    s.set_defaults(func=_cmd_sweep)

    s = sub.add_parser("predict", help="binary change map for one image pair")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--t1", required=True)
    s.add_argument("--t2", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    s.set_defaults(func=_cmd_predict)

    s = sub.add_parser("visualize", help="color error map of a prediction")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_visualize)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_synth)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        args.func(args)
    except (ValueError, T.CheckpointError, T.TrainingError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
