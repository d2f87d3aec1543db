"""Command-line entry point: ``idsgan <command> --config PATH [overrides]``."""

import argparse
import logging
import os
import sys

from .errors import CheckpointError, DataError, PrerequisiteError, ShapeError, UsageError
from .pipeline import STAGES, PipelineConfig, StageError, load_config, run_pipeline, run_stage

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3

COMMANDS = STAGES + ("run-all",)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="idsgan", description="CNN-attention intrusion detection with GAN augmentation")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="YAML or JSON pipeline config")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--dataset", choices=["kdd", "cicids", "csv"])
    p.add_argument("--input", action="append", help="input file (repeatable; replaces config inputs)")
    p.add_argument("--epochs", type=int, help="classifier epochs")
    p.add_argument("--batch", type=int, help="classifier batch size")
    p.add_argument("--gan-epochs", type=int)
    p.add_argument("--synthetic-per-class", type=int)
    p.add_argument("--max-rows", type=int, help="stratified row cap after de-duplication")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def effective_config(args):
    config = load_config(args.config) if args.config else PipelineConfig()
    d = config.to_dict()
    overrides = {"seed": args.seed, "out_dir": args.out, "dataset": args.dataset,
                 "inputs": [os.path.abspath(p) for p in args.input] if args.input else None, "synthetic_per_class": args.synthetic_per_class,
                 "max_rows": args.max_rows}
    d.update({k: v for k, v in overrides.items() if v is not None})
    if args.epochs is not None:
        d["train"]["epochs"] = args.epochs
    if args.batch is not None:
        d["train"]["batch_size"] = args.batch
    if args.gan_epochs is not None:
        d["gan"]["epochs"] = args.gan_epochs
    return PipelineConfig.from_dict(d)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = effective_config(args)
        if args.command == "run-all":
            _, _, rows = run_pipeline(config)
            for name, before, after, delta in rows:
                print(f"{name:<24}{before:>10.4f}{after:>10.4f}{delta:>+10.4f}")
        else:
            run_stage(args.command, config)
        return EXIT_OK
    except (UsageError, PrerequisiteError) as exc:
        print(f"idsgan: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"idsgan: {exc}", file=sys.stderr)
        cause = exc.cause
        if isinstance(cause, UsageError):
            return EXIT_USAGE
        if isinstance(cause, (DataError, ShapeError, CheckpointError, OSError)):
            return EXIT_DATA
        return EXIT_INTERNAL
    except (DataError, CheckpointError, OSError) as exc:
        print(f"idsgan: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
