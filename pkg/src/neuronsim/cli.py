"""Command line entry point: ``neuronsim {train,evaluate,inspect-idx}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import load_checkpoint
from .errors import ContractViolation, FormatError, GroupAborted, NumericOverflowError, ProtocolError
from .experiment import apply_overrides, load_config, preset_names, run_experiment
from .idx import MnistDataset, describe
from .trainer import evaluate

EXPECTED_ERRORS = (ContractViolation, FormatError, GroupAborted, NumericOverflowError,
                   ProtocolError, OSError)


def _train(args):
    cfg = load_config(args.config)
    changes = {}
    if args.deterministic:
        changes["deterministic"] = True
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.data_dir:
        changes["data_dir"] = str(Path(args.data_dir).resolve())
    cfg = apply_overrides(cfg.replace(**changes), args.set)
    status, _ = run_experiment(cfg, out_dir=args.out)
    if args.out or cfg.out_dir:
        print(f"outputs written to {args.out or cfg.out_dir}", file=sys.stderr)
    return status


def _evaluate(args):
    model, _, _ = load_checkpoint(args.checkpoint)
    data = MnistDataset.load(args.test_images, args.test_labels)
    acc = evaluate(model, data.images, data.labels)
    print(f"accuracy={acc:.4f} examples={len(data)}")
    return 0


def _inspect(args):
    info = describe(Path(args.path).read_bytes())
    for key, value in info.items():
        print(f"{key}: {value}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="neuronsim",
        description="Neuron-centric network training on a simulated parameter-server cluster.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run an experiment from a config file or preset")
    p.add_argument("--config", required=True,
                   help="JSON config path, or preset:<name> (" + ", ".join(preset_names()) + ")")
    p.add_argument("--deterministic", action="store_true",
                   help="serialize workers round-robin for bit-reproducible runs")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (default: the config's out_dir)")
    p.add_argument("--data-dir", help="directory holding the four MNIST IDX files")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key; repeatable")
    p.set_defaults(func=_train)

    p = sub.add_parser("evaluate", help="test accuracy of a saved checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test-images", required=True)
    p.add_argument("--test-labels", required=True)
    p.set_defaults(func=_evaluate)

    p = sub.add_parser("inspect-idx", help="print the header fields of an IDX file")
    p.add_argument("path")
    p.set_defaults(func=_inspect)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except EXPECTED_ERRORS as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
