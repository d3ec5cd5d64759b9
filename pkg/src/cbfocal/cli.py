"""Command-line entry point.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import warnings
from pathlib import Path

from . import pipeline
from .config import ConfigError, RunConfig, load_config
from .data import (LabelFormatError, SplitKind, SyntheticDataset, class_counts, generate_synthetic,
                   make_split, official_records, read_id_list, read_labels)
from .nn.checkpoint import CheckpointError
from .tensorfile import TensorFileError
from .weights import ClampWarning, Scheme, WeightConfig, beta_from_sample_count, build_weight_table

log = logging.getLogger("cbfocal")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
OFFICIAL_LABELS = "builtin:official"


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH",
                   help="YAML run config or builtin:<name> (default: built-in defaults)")
    p.add_argument("--out", metavar="DIR", default="cbfocal_out", help="output directory (default: %(default)s)")
    p.add_argument("--seed", type=int, metavar="N", help="override the config seed")
    p.add_argument("--verbose", "-v", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cbfocal", description=__doc__.splitlines()[0].rstrip(".") +
                     ": class-balanced weights, synthetic data, staged training and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND",
                                parser_class=_Parser)

    p = sub.add_parser("compute-weights", help="write one weight table CSV per beta",
                       description="Count positives per pattern and write weights_beta_<beta>.csv "
                                   "for each configured beta (or weights_<scheme>.csv for the "
                                   "beta-free schemes).")
    _common(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--labels", metavar="CSV",
                     help=f"label CSV (Image Index, Finding Labels) or {OFFICIAL_LABELS} for the "
                          "bundled official training-split counts")
    src.add_argument("--data", metavar="DIR", help="synthetic dataset directory")
    p.add_argument("--train-list", metavar="TXT", help="count only the ids listed here")

    p = sub.add_parser("gen-data", help="generate the synthetic dataset",
                       description="Write images.bin and labels.csv from the config's synth "
                                   "section; --seed overrides synth.seed.")
    _common(p)

    p = sub.add_parser("train", help="run the configured stage plan",
                       description="Train every stage, writing stage<i>_best.ckpt, train_log.csv, "
                                   "timings.csv, weights.csv and split_manifest.csv.")
    _common(p)
    p.add_argument("--data", metavar="DIR", help="synthetic dataset directory (default: generate from config)")
    p.add_argument("--train-list", metavar="TXT", help="train/val id list for an official split")
    p.add_argument("--test-list", metavar="TXT", help="test id list for an official split")

    p = sub.add_parser("evaluate", help="score a checkpoint on the configured subset",
                       description="Write report.csv (one row per pattern plus AVERAGE) and "
                                   "curves/roc_<pattern>.csv, curves/pr_<pattern>.csv.")
    _common(p)
    p.add_argument("--checkpoint", metavar="PATH", required=True, help="checkpoint file")
    p.add_argument("--data", metavar="DIR", help="synthetic dataset directory (default: generate from config)")
    p.add_argument("--train-list", metavar="TXT", help="train/val id list for an official split")
    p.add_argument("--test-list", metavar="TXT", help="test id list for an official split")

    p = sub.add_parser("kfold", help="k-fold train and evaluate",
                       description="Train and evaluate one model per fold (k from split.k) into "
                                   "fold_<i>/ and write folds.csv and kfold_summary.csv.")
    _common(p)
    p.add_argument("--data", metavar="DIR", help="synthetic dataset directory (default: generate from config)")
    return parser


def _split_for(config: RunConfig, dataset: SyntheticDataset, args):
    train_list, test_list = getattr(args, "train_list", None), getattr(args, "test_list", None)
    if config.split.kind is SplitKind.OFFICIAL:
        if not (train_list and test_list):
            raise UsageError("an official split needs --train-list and --test-list")
        spec = config.split_spec(train_val_ids=read_id_list(train_list), test_ids=read_id_list(test_list))
        return make_split(dataset.records, spec)
    if train_list or test_list:
        raise UsageError("--train-list/--test-list apply only to split.kind: official")
    return pipeline.split_dataset(config, dataset)


def cmd_compute_weights(config: RunConfig, args) -> None:
    out = Path(args.out)
    if args.data:
        dataset = SyntheticDataset.load(args.data)
        records, vocab = dataset.records, dataset.vocabulary
    elif args.labels == OFFICIAL_LABELS:
        records, vocab = official_records(), config.vocabulary()
    else:
        vocab = config.vocabulary()
        records = read_labels(args.labels, vocab)
    members = read_id_list(args.train_list) if args.train_list else None
    counts = class_counts(records, members, vocab)

    w = config.weights
    if w.scheme is not Scheme.EFFECTIVE_NUMBER:
        jobs = [(f"weights_{w.scheme.value}.csv", WeightConfig(scheme=w.scheme, negative_floor=w.negative_floor))]
    else:
        betas = w.betas() if w.beta_grid is not None or w.beta != "auto" else \
            [beta_from_sample_count(counts.total_samples)]
        jobs = [(f"weights_beta_{b!r}.csv", WeightConfig(beta=b, negative_floor=w.negative_floor))
                for b in betas]
    out.mkdir(parents=True, exist_ok=True)
    for name, cfg in jobs:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", ClampWarning)
            table = build_weight_table(counts, cfg)
        for c in caught:
            log.warning("%s: %s", name, c.message)
        (out / name).write_text(table.to_csv())
        log.info("wrote %s", out / name)


def cmd_gen_data(config: RunConfig, args) -> None:
    spec = config.synth.spec()
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        dataset = generate_synthetic(spec)
    for c in caught:
        log.warning("%s", c.message)
    dataset.save(args.out)
    log.info("wrote %d samples to %s", spec.n_samples, args.out)


def cmd_train(config: RunConfig, args) -> None:
    dataset = pipeline.load_dataset(config, args.data)
    split = _split_for(config, dataset, args)
    outcome = pipeline.train(config, dataset, args.out, split)
    for r in outcome.results:
        log.info("stage %d: best epoch %d (val macro AUROC %.4f), final %.4f",
                 r.stage, r.best_epoch, r.best_val_macro_auroc, r.final_val_macro_auroc)


def cmd_evaluate(config: RunConfig, args) -> None:
    dataset = pipeline.load_dataset(config, args.data)
    split = _split_for(config, dataset, args)
    ids = getattr(split, config.eval_subset)
    report = pipeline.evaluate_checkpoint(args.checkpoint, dataset, ids, args.out)
    log.info("%s subset: macro AUROC %.4f, macro AU-PRC %.4f", config.eval_subset,
             report.macro_auroc, report.macro_auprc)


def cmd_kfold(config: RunConfig, args) -> None:
    dataset = pipeline.load_dataset(config, args.data)
    pipeline.kfold(config, dataset, args.out)


COMMANDS = {
    "compute-weights": cmd_compute_weights,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "kfold": cmd_kfold,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        config = load_config(args.config)
        if args.command != "gen-data":
            config = config.with_seed(args.seed)
        COMMANDS[args.command](config, args)
    except (ConfigError, UsageError, LabelFormatError, CheckpointError, TensorFileError,
            FileNotFoundError, ValueError) as e:
        print(f"cbfocal {args.command}: error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001
        print(f"cbfocal {args.command}: failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
