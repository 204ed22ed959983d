"""Command-line interface: train, eval, predict, report.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
abort during training.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import read_config_file, apply_overrides
from .errors import ConfigError, DataError, NumericalAbort


def _add_config_args(parser):
    parser.add_argument("--config", required=True, help="flat key = value config file")
    parser.add_argument("--override", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config entry")


def build_parser():
    parser = argparse.ArgumentParser(prog="fewseg",
                                     description="episodic multi-class few-shot segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run episodic training")
    _add_config_args(p_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _add_config_args(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--episodes", type=int, default=1000)
    p_eval.add_argument("--runs", type=int, default=5)
    p_eval.add_argument("--protocol", choices=["miou", "miou_star", "both"],
                        default="both")
    p_eval.add_argument("--out", default="", help="write the JSON summary here")

    p_pred = sub.add_parser("predict", help="segment one query image")
    p_pred.add_argument("--checkpoint", required=True)
    p_pred.add_argument("--support", required=True,
                        help="directory with one subdirectory per class "
                             "(image.png + image_mask.png pairs)")
    p_pred.add_argument("--query", required=True)
    p_pred.add_argument("--out", required=True)
    p_pred.add_argument("--overlay", default="")

    p_rep = sub.add_parser("report", help="plot curves from a training log")
    p_rep.add_argument("--log", required=True)
    p_rep.add_argument("--plot", required=True)
    return parser


def _load_config(args):
    cfg = read_config_file(args.config)
    return apply_overrides(cfg, args.override)


def cmd_train(args):
    from .train import train

    result = train(_load_config(args))
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"log: {result.log_path}")
    return 0


def cmd_eval(args):
    from .train import evaluate, format_report

    if args.episodes <= 0 or args.runs <= 0:
        raise ConfigError("--episodes and --runs must be positive")
    cfg = _load_config(args)
    report = evaluate(cfg, args.checkpoint, args.episodes, args.runs)
    print(format_report(report, args.protocol))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
        print(f"summary: {args.out}")
    return 0


def cmd_predict(args):
    from .train import predict

    predict(args.checkpoint, args.support, args.query, args.out,
            overlay_path=args.overlay or None)
    print(f"mask: {args.out}")
    if args.overlay:
        print(f"overlay: {args.overlay}")
    return 0


def cmd_report(args):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    records = []
    try:
        with open(args.log) as fh:
            for line in fh:
                if line.strip():
                    records.append(json.loads(line))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot parse training log {args.log}: {exc}") from exc
    if not records:
        raise DataError(f"training log {args.log} is empty")

    iters = [r["iter"] for r in records]
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))
    axes[0].plot(iters, [r["loss_seg"] for r in records], lw=0.9)
    axes[0].set_title("segmentation loss")
    axes[1].plot(iters, [r["loss_pml"] for r in records], lw=0.9, color="tab:orange")
    axes[1].set_title("metric-learning loss")
    axes[2].plot(iters, [r["lr"] for r in records], lw=0.9, color="tab:green")
    axes[2].set_title("learning rate")
    for ax in axes:
        ax.set_xlabel("iteration")
    fig.tight_layout()
    fig.savefig(args.plot, dpi=120)
    print(f"plot: {args.plot}")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "report": cmd_report}


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
