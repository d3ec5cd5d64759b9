"""End-to-end runs: train a stage plan, evaluate a checkpoint, k-fold cross-validation.

Every function writes only below its ``out_dir`` and is deterministic given the
config and seed, except ``timings.csv`` which records wall-clock seconds.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import re
import statistics
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence


from . import metrics
from .config import RunConfig
from .data import (Split, SplitKind, SyntheticDataset, class_counts, generate_synthetic,
                   kfold_assignment, make_split, resize_images)
from .nn import MiniNet, StageResult, load_checkpoint, run_plan
from .nn.train import log_csv, timing_csv
from .weights import ClampWarning, WeightTable, build_weight_table

log = logging.getLogger(__name__)


def load_dataset(config: RunConfig, data_dir: str | Path | None = None) -> SyntheticDataset:
    if data_dir is not None:
        return SyntheticDataset.load(data_dir)
    with warnings.catch_warnings():
        warnings.simplefilter("default")
        return generate_synthetic(config.synth.spec())


def split_dataset(config: RunConfig, dataset: SyntheticDataset, fold: int | None = None) -> Split:
    kind = SplitKind.KFOLD if fold is not None else None
    return make_split(dataset.records, config.split_spec(fold=fold, kind=kind))


def training_weights(config: RunConfig, dataset: SyntheticDataset, split: Split) -> WeightTable:
    counts = class_counts(dataset.records, split.train, dataset.vocabulary)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ClampWarning)
        table = build_weight_table(counts, config.weights.weight_config(len(split.train)))
    for w in caught:
        log.warning("%s", w.message)
    return table


@dataclass
class TrainOutcome:
    net: MiniNet
    results: list[StageResult]
    weights: WeightTable
    split: Split

    @property
    def final_checkpoint(self) -> Path:
        return self.results[-1].best_checkpoint

    @property
    def log_rows(self) -> list[dict]:
        return [r for res in self.results for r in res.log_rows]


def train(config: RunConfig, dataset: SyntheticDataset, out_dir: str | Path,
          split: Split | None = None) -> TrainOutcome:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    split = split or split_dataset(config, dataset)
    if not split.train or not split.val:
        raise ValueError("the split leaves no training or no validation samples")
    (out / "split_manifest.csv").write_text(split.manifest_csv(dataset.ids))
    weights = training_weights(config, dataset, split)
    (out / "weights.csv").write_text(weights.to_csv())

    spec = dataset.spec
    net = MiniNet.init(config.net_config(spec.num_classes, spec.channels), config.seed)
    results = run_plan(net, config.stage_plan(), dataset.subset(split.train),
                       dataset.subset(split.val), weights, config.loss.focal_config(),
                       config.loss.kind, config.seed, out)
    rows = [r for res in results for r in res.log_rows]
    (out / "train_log.csv").write_text(log_csv(rows))
    (out / "timings.csv").write_text(timing_csv(rows))
    return TrainOutcome(net, results, weights, split)


def _safe_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", name)


def evaluate(net: MiniNet, input_size: int, dataset: SyntheticDataset, ids: Sequence[str],
             out_dir: str | Path | None = None) -> metrics.EvalReport:
    """Score ``ids`` at ``input_size``; optionally write report.csv and curves/."""
    spec = dataset.spec
    if net.config.num_classes != spec.num_classes:
        raise ValueError(f"checkpoint predicts {net.config.num_classes} patterns, "
                         f"dataset has {spec.num_classes}")
    if net.config.in_channels != spec.channels:
        raise ValueError(f"checkpoint expects {net.config.in_channels} channels, "
                         f"dataset has {spec.channels}")
    if not ids:
        raise ValueError("nothing to evaluate: the selected subset is empty")
    images, labels = dataset.subset(ids)
    probs = net.predict(resize_images(images, input_size))
    report = metrics.report_from_arrays(probs, labels, spec.pattern_names)
    if out_dir is not None:
        out = Path(out_dir)
        curves = out / "curves"
        curves.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(report.to_csv())
        for k, name in enumerate(spec.pattern_names):
            col = metrics.ScoredColumn(probs[:, k], labels[:, k], name)
            if 0 < col.positives < col.labels.size:
                (curves / f"roc_{_safe_name(name)}.csv").write_text(metrics.roc_curve_csv(col))
                (curves / f"pr_{_safe_name(name)}.csv").write_text(metrics.pr_curve_csv(col))
    return report


def evaluate_checkpoint(path: str | Path, dataset: SyntheticDataset, ids: Sequence[str],
                        out_dir: str | Path | None = None) -> metrics.EvalReport:
    ckpt = load_checkpoint(path)
    return evaluate(ckpt.net, ckpt.input_size, dataset, ids, out_dir)


SUMMARY_HEADER = ("pattern", "folds", "auroc_mean", "auroc_sd", "auprc_mean", "auprc_sd",
                  "baseline_auprc_mean", "baseline_auprc_sd")


def _mean_sd(values: Sequence[float]) -> tuple[int, float, float]:
    vals = [v for v in values if not math.isnan(v)]
    mean = math.fsum(vals) / len(vals) if vals else math.nan
    sd = statistics.stdev(vals) if len(vals) > 1 else math.nan
    return len(vals), mean, sd


def summarize_folds(reports: Sequence[metrics.EvalReport]) -> str:
    """Per-pattern mean and sample standard deviation across folds, plus AVERAGE."""
    names = [m.pattern for m in reports[0].patterns]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_HEADER)
    fmt = metrics._fmt
    for k, name in enumerate(names):
        row = [name]
        n_ok = None
        for attr in ("auroc", "auprc", "baseline_auprc"):
            n, mean, sd = _mean_sd([getattr(r.patterns[k], attr) for r in reports])
            n_ok = n if n_ok is None else min(n_ok, n)
            row += [fmt(mean), fmt(sd)]
        w.writerow([row[0], n_ok] + row[1:])
    row = ["AVERAGE"]
    n_ok = None
    for attr in ("macro_auroc", "macro_auprc", "macro_baseline_auprc"):
        n, mean, sd = _mean_sd([getattr(r, attr) for r in reports])
        n_ok = n if n_ok is None else min(n_ok, n)
        row += [fmt(mean), fmt(sd)]
    w.writerow([row[0], n_ok] + row[1:])
    return buf.getvalue()


def kfold(config: RunConfig, dataset: SyntheticDataset, out_dir: str | Path) -> list[metrics.EvalReport]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    k = config.split.k
    spec = config.split_spec(kind=SplitKind.KFOLD)
    assignment = kfold_assignment(dataset.records, k, spec.seed, spec.group_by_patient)
    (out / "folds.csv").write_text("image_id,fold\n" + "".join(
        f"{i},{assignment[i]}\n" for i in dataset.ids))
    reports = []
    for f in range(k):
        fold_dir = out / f"fold_{f}"
        try:
            outcome = train(config, dataset, fold_dir, split_dataset(config, dataset, fold=f))
            reports.append(evaluate_checkpoint(outcome.final_checkpoint, dataset,
                                               outcome.split.test, fold_dir))
        except Exception as e:
            e.args = (f"fold {f}: {e}",) + e.args[1:]
            raise
        log.info("fold %d: macro AUROC %.4f", f, reports[-1].macro_auroc)
    (out / "kfold_summary.csv").write_text(summarize_folds(reports))
    return reports
