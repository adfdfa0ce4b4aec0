"""Command-line entry point: shrink, train, eval, compare, ablate, criteria, analyze, schema."""

import argparse
import logging
import sys
from typing import List, Optional

from pydantic import ValidationError

from .logging_log import configure_logging
from .pipeline import ExperimentOrchestrator
from .schemas import export_schemas
from .settings import get_settings
from .types import (
    Augmentation,
    Criterion,
    KDSettings,
    LRSchedule,
    RunConfig,
    ScheduleKind,
    ShrinkParams,
    SynthSpec,
    TrainProtocol,
)

logger = logging.getLogger(__name__)


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'") from None


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--arch", default="vgg-tiny", help="vgg-tiny, resnet-tiny, mobile-tiny, resnet56, densenet40, vgg11")
    p.add_argument("--arch-json", dest="arch_path", default=None, help="ArchSpec JSON file (overrides --arch)")
    p.add_argument("--config", type=_int_list, default=None, help="channel configuration, e.g. 16,16,32,32,64,64")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", default=None, help="output directory (default LWDNA_OUTPUT_DIR)")
    p.add_argument("--force", action="store_true", help="overwrite existing output files")


def _add_data(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("data")
    g.add_argument("--dataset", choices=["synth", "idx"], default="synth")
    g.add_argument("--idx-dir", default=None, help="directory with MNIST-style IDX files")
    g.add_argument("--synth-classes", type=int, default=10)
    g.add_argument("--synth-channels", type=int, default=3)
    g.add_argument("--synth-hw", type=int, default=16)
    g.add_argument("--synth-train", type=int, default=2000)
    g.add_argument("--synth-test", type=int, default=500)
    g.add_argument("--synth-separation", type=float, default=5.0)


def _add_protocol(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training protocol")
    g.add_argument("--epochs", type=int, default=30)
    g.add_argument("--batch-size", type=int, default=64)
    g.add_argument("--lr", type=float, default=0.1)
    g.add_argument("--schedule", choices=[s.value for s in ScheduleKind], default="step")
    g.add_argument("--milestones", type=float, nargs="+", default=[0.5, 0.75])
    g.add_argument("--momentum", type=float, default=0.9)
    g.add_argument("--weight-decay", type=float, default=1e-4)
    g.add_argument("--no-flip", action="store_true", help="disable horizontal flips")
    g.add_argument("--no-crop", action="store_true", help="disable pad-and-crop")
    g.add_argument("--kd", action="store_true", help="distill from the widened baseline")
    g.add_argument("--kd-lambda", type=float, default=0.4)
    g.add_argument("--kd-temperature", type=float, default=4.0)
    g.add_argument("--teacher", default=None, help="teacher checkpoint (default: train the widened baseline)")


def _add_shrink(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("shrinking")
    g.add_argument("--beta", type=float, default=2.0)
    g.add_argument("--m", type=int, default=8, help="hypernetwork embedding width")
    g.add_argument("--rho", type=float, default=0.4)
    g.add_argument("--tau", type=float, default=0.45)
    g.add_argument("--budget", type=float, default=0.95, help="FLOP budget as a fraction of the baseline")
    g.add_argument("--budget-flops", type=int, default=None, help="absolute FLOP budget (overrides --budget)")
    g.add_argument("--criterion", choices=[c.value for c in Criterion], default="gradient")
    g.add_argument("--score-bn-mode", choices=["eval", "train"], default="eval")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lwdna", description="Layer-wise differentiated network architectures")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING (default LWDNA_LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("shrink", help="widen, score one batch, shrink to the FLOP budget")
    _add_common(p)
    _add_data(p)
    _add_protocol(p)
    _add_shrink(p)

    p = sub.add_parser("train", help="train one configuration from scratch")
    _add_common(p)
    _add_data(p)
    _add_protocol(p)
    p.add_argument("--label", default="model", help="file prefix for the log and checkpoint")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _add_common(p)
    _add_data(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--eval-batch-size", type=int, default=256)

    p = sub.add_parser("compare", help="shrink, then train baseline and LW-DNA under one protocol")
    _add_common(p)
    _add_data(p)
    _add_protocol(p)
    _add_shrink(p)
    p.add_argument("--plain-baseline", action="store_true",
                   help="with --kd, also train the baseline without distillation")

    p = sub.add_parser("ablate", help="shrink and train over a grid of rho / tau floors")
    _add_common(p)
    _add_data(p)
    _add_protocol(p)
    _add_shrink(p)
    p.add_argument("--rho-values", type=float, nargs="+", default=[0.2, 0.4, 0.6])
    p.add_argument("--tau-values", type=float, nargs="+", default=[0.25, 0.45, 0.65])

    p = sub.add_parser("criteria", help="gradient vs magnitude saliency on one batch, each shrunk net trained")
    _add_common(p)
    _add_data(p)
    _add_protocol(p)
    _add_shrink(p)

    p = sub.add_parser("analyze", help="FLOPs and parameters of a configuration")
    _add_common(p)
    p.add_argument("--base-config", type=_int_list, default=None, help="configuration to report ratios against")
    p.add_argument("--input", type=int, default=32, help="square input size")
    p.add_argument("--per-layer", action="store_true")

    p = sub.add_parser("schema", help="write JSON Schemas of the report files")
    p.add_argument("--out", default="schemas")
    p.add_argument("--force", action="store_true")
    return parser


def run_config_from_args(args: argparse.Namespace) -> RunConfig:
    settings = get_settings()
    values = {
        "arch": args.arch,
        "arch_path": args.arch_path,
        "config": args.config,
        "seed": args.seed,
        "output_dir": args.output or settings.output_dir,
        "force": args.force,
    }
    if getattr(args, "plain_baseline", False):
        values["plain_baseline"] = True
    if hasattr(args, "dataset"):
        values.update(dataset=args.dataset, idx_dir=args.idx_dir, synth=SynthSpec(
            num_classes=args.synth_classes, channels=args.synth_channels, hw=args.synth_hw,
            train_size=args.synth_train, test_size=args.synth_test, separation=args.synth_separation,
        ))
    if hasattr(args, "epochs"):
        kd = None
        if args.kd:
            kd = KDSettings(lam=args.kd_lambda, temperature=args.kd_temperature, teacher_checkpoint=args.teacher)
        values["protocol"] = TrainProtocol(
            epochs=args.epochs, batch_size=args.batch_size, base_lr=args.lr,
            schedule=LRSchedule(kind=ScheduleKind(args.schedule), milestones=args.milestones),
            momentum=args.momentum, weight_decay=args.weight_decay,
            augmentation=Augmentation(horizontal_flip=not args.no_flip, pad_crop=not args.no_crop),
            kd=kd, seed=args.seed,
        )
    elif hasattr(args, "eval_batch_size"):
        values["protocol"] = TrainProtocol(eval_batch_size=args.eval_batch_size, seed=args.seed)
    if hasattr(args, "beta"):
        values["shrink"] = ShrinkParams(
            beta=args.beta, m=args.m, rho=args.rho, tau=args.tau,
            budget_fraction=None if args.budget_flops is not None else args.budget,
            budget_flops=args.budget_flops, criterion=Criterion(args.criterion),
            score_bn_mode=args.score_bn_mode,
        )
    return RunConfig(**values)


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point; returns 0 on success, 2 for infeasible or invalid input, 1 otherwise."""
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level or get_settings().log_level)

    if args.command == "schema":
        try:
            for path in export_schemas(args.out, force=args.force):
                print(path)
            return 0
        except Exception as e:
            print(f"Error: {e}", file=sys.stderr)
            return 1

    try:
        run_config = run_config_from_args(args)
    except ValidationError as e:
        print(f"Error: invalid arguments\n{e}", file=sys.stderr)
        return 2

    orchestrator = ExperimentOrchestrator(run_config)
    kwargs = {}
    if args.command == "eval":
        kwargs["checkpoint"] = args.checkpoint
    elif args.command == "train":
        kwargs["label"] = args.label
    elif args.command == "ablate":
        kwargs.update(rho_values=args.rho_values, tau_values=args.tau_values)
    elif args.command == "analyze":
        kwargs.update(base_config=args.base_config, input_hw=(args.input, args.input), per_layer=args.per_layer)
    result = orchestrator.run(args.command, **kwargs)
    output = orchestrator.format_results(result)
    print(output, file=sys.stdout if result.success else sys.stderr)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
