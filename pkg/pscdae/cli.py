#!/usr/bin/env python3
"""
pscdae command line: gen, train, eval, report, ablate, defaults.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical
failure during training.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import __version__
from .channel import SnrGrid
from .errors import EXIT_OK, EXIT_USAGE, DataError, WorkbenchError
from .exp import (
    VARIANTS, AblationTable, ExperimentConfig, ExperimentRecord, TrainingLog, evaluate,
    generate_dataset, get_variant, load_config, load_dataset, network_spec, reference_config_text,
    run_ablation, train_model, write_dataset,
)
from .nn import load_checkpoint, save_checkpoint

logger = logging.getLogger("pscdae")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _snr_grid(text: str) -> SnrGrid:
    try:
        return SnrGrid.parse(text)
    except WorkbenchError as e:
        raise argparse.ArgumentTypeError(str(e)) from e


def _setup_logging(verbose: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("  [%(levelname)s] %(message)s"))
    root = logging.getLogger("pscdae")
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.propagate = False


def _experiment_config(args, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else (base or ExperimentConfig())
    return cfg.override(
        seed=getattr(args, "seed", None),
        devices=getattr(args, "devices", None),
        frames=getattr(args, "frames", None),
        folds=getattr(args, "folds", None),
        snr_grid=args.snr_grid.to_list() if getattr(args, "snr_grid", None) else None,
        epochs=getattr(args, "epochs", None),
    )


def cmd_gen(args) -> int:
    cfg = _experiment_config(args)
    dataset = generate_dataset(cfg, progress=False if args.quiet else None)
    write_dataset(dataset, args.out)
    print(f"Wrote {len(dataset)} samples ({len(dataset.manifest['dropped'])} dropped) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    dataset = load_dataset(args.data)
    base = ExperimentConfig.from_dict(dataset.manifest["config"])
    cfg = _experiment_config(args, base)
    variant = get_variant(args.variant or cfg.training.variant)
    result = train_model(cfg, dataset, args.fold, variant, progress=not args.quiet)
    out = Path(args.out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create {out.parent}: {e.strerror}") from e
    save_checkpoint(result.state, out, extra={
        "variant": variant.name,
        "fold": args.fold,
        "layout": variant.layout.value,
        "dataset_seed": dataset.seed,
        "log": result.log.to_dict(),
    })
    print(f"{variant.name} fold {args.fold}: best val accuracy {result.log.best_val_accuracy:.2f}% "
          f"at epoch {result.log.best_epoch}; checkpoint {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    dataset = load_dataset(args.data)
    state, extra = load_checkpoint(args.checkpoint)
    variant = get_variant(extra.get("variant", ""))
    base = ExperimentConfig.from_dict(dataset.manifest["config"])
    expected = network_spec(base, dataset.n_classes, dataset.samples_per_symbol, variant)
    if (state.spec.input_length, state.spec.n_classes) != (expected.input_length, expected.n_classes):
        raise DataError(f"checkpoint {args.checkpoint} was trained for a different dataset shape")
    if "dataset_seed" in extra and extra["dataset_seed"] != dataset.seed:
        raise DataError(f"checkpoint {args.checkpoint} was trained on a dataset with seed {extra['dataset_seed']}, "
                        f"but {args.data} has seed {dataset.seed}")
    log = TrainingLog.from_dict(extra["log"]) if "log" in extra else None
    record = evaluate(state, dataset, variant, int(extra.get("fold", 0)), args.split, log)
    record.save(args.out)
    print(f"{variant.name} on {args.split}: accuracy {record.folds[0].overall_accuracy:.2f}%; record {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    table = AblationTable.from_records(ExperimentRecord.load(p) for p in args.records)
    written = table.write(args.out, plot=args.plot)
    print(table.wide("accuracy").to_string(float_format=lambda v: f"{v:.1f}"))
    for path in written:
        print(f"  -> {path}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _experiment_config(args)
    table = run_ablation(cfg, args.variant, progress=not args.quiet)
    written = table.write(args.out, plot=args.plot)
    print(table.wide("accuracy").to_string(float_format=lambda v: f"{v:.1f}"))
    for path in written:
        print(f"  -> {path}")
    return EXIT_OK


def cmd_defaults(args) -> int:
    sys.stdout.write(reference_config_text())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pscdae", description="Partially stacked CDAE fingerprinting workbench")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="no progress bars")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def overrides(p, training: bool = False):
        p.add_argument("--config", help="YAML config (defaults: pscdae defaults)")
        p.add_argument("--seed", type=int)
        if training:
            p.add_argument("--folds", type=int)
            p.add_argument("--epochs", type=int, help="maximum epochs")
        else:
            p.add_argument("--devices", type=int)
            p.add_argument("--frames", type=int, help="frames per device per SNR")
            p.add_argument("--snr-grid", type=_snr_grid, help='"start:stop:step" or "a,b,c" in dB')

    p = sub.add_parser("gen", help="synthesize a dataset directory")
    overrides(p)
    p.add_argument("--out", required=True, help="dataset directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one variant on one fold")
    overrides(p, training=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--variant", choices=list(VARIANTS))
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", required=True, help="record JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="merge records into result tables")
    p.add_argument("records", nargs="+", help="record JSON files from eval")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--plot", action="store_true", help="also draw accuracy vs SNR")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("ablate", help="generate, train and report every variant")
    overrides(p)
    p.add_argument("--folds", type=int)
    p.add_argument("--epochs", type=int, help="maximum epochs")
    p.add_argument("--variant", action="append", choices=list(VARIANTS), help="repeatable; default all")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("defaults", help="print the reference config")
    p.set_defaults(func=cmd_defaults)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    try:
        return args.func(args)
    except WorkbenchError as e:
        logger.error("%s", e)
        return e.exit_code
    except KeyboardInterrupt:
        logger.warning("Interrupted")
        return 130


if __name__ == "__main__":
    sys.exit(main())
