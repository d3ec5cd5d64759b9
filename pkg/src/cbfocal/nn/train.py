"""Staged training with progressive input resizing and best-checkpoint hand-off."""
from __future__ import annotations

import csv
import enum
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .. import losses, metrics
from ..data import resize_images
from ..losses import FocalConfig, LossKind
from ..weights import WeightTable
from . import optim
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .net import MiniNet

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class StageInit(str, enum.Enum):
    FRESH = "fresh"
    BEST_CHECKPOINT = "best_checkpoint"


@dataclass(frozen=True)
class OptimizerSpec:
    kind: optim.OptimizerKind = optim.OptimizerKind.RANGER
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lookahead_k: int = 5
    lookahead_alpha: float = 0.5

    def build(self, params) -> optim.OptimizerState:
        kw = dict(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)
        if optim.OptimizerKind(self.kind) is optim.OptimizerKind.RANGER:
            kw.update(lookahead_k=self.lookahead_k, lookahead_alpha=self.lookahead_alpha)
        return optim.make_optimizer(self.kind, params, **kw)


@dataclass(frozen=True)
class Stage:
    input_size: int
    batch_size: int
    epochs: int
    init: StageInit = StageInit.FRESH
    optimizer: OptimizerSpec = OptimizerSpec()

    def __post_init__(self):
        object.__setattr__(self, "init", StageInit(self.init))
        if self.batch_size < 1 or self.epochs < 1 or self.input_size < 1:
            raise ValueError("stage input_size, batch_size and epochs must be positive")


@dataclass(frozen=True)
class StagePlan:
    stages: tuple[Stage, ...]

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if not self.stages:
            raise ValueError("a stage plan needs at least one stage")
        if self.stages[0].init is StageInit.BEST_CHECKPOINT:
            raise ValueError("the first stage has no earlier checkpoint to start from")
        for prev, cur in zip(self.stages, self.stages[1:]):
            if cur.input_size <= prev.input_size:
                raise ValueError(f"stage input sizes must increase: {prev.input_size} -> {cur.input_size}")


@dataclass
class StageResult:
    stage: int
    best_checkpoint: Path
    best_epoch: int
    best_val_macro_auroc: float
    final_val_macro_auroc: float
    log_rows: list[dict] = field(default_factory=list)


LOG_HEADER = ("stage", "epoch", "train_loss", "val_macro_auroc")
TIMING_HEADER = ("stage", "epoch", "seconds")


def log_csv(rows: Sequence[dict]) -> str:
    """Per-epoch losses and scores; a pure function of config and seed."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_HEADER)
    for r in rows:
        w.writerow([r["stage"], r["epoch"], repr(r["train_loss"]), repr(r["val_macro_auroc"])])
    return buf.getvalue()


def timing_csv(rows: Sequence[dict]) -> str:
    """Wall-clock seconds per epoch, kept apart so the training log stays reproducible."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TIMING_HEADER)
    for r in rows:
        w.writerow([r["stage"], r["epoch"], f"{r['seconds']:.3f}"])
    return buf.getvalue()


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


def _better(value: float, best: float) -> bool:
    if math.isnan(value):
        return False
    return math.isnan(best) or value > best


def train_stage(net: MiniNet, stage: Stage, stage_index: int,
                train: tuple[np.ndarray, np.ndarray], val: tuple[np.ndarray, np.ndarray],
                weights: WeightTable, focal: FocalConfig = FocalConfig(),
                loss_kind: LossKind | str = LossKind.FOCAL, seed: int = 0,
                checkpoint_path: str | Path = "stage_best.ckpt") -> StageResult:
    """Train ``net`` in place for one stage; the best epoch (validation macro-AUROC,
    earliest on ties) is written to ``checkpoint_path``."""
    loss_kind = LossKind(loss_kind)
    checkpoint_path = Path(checkpoint_path)
    x_tr = resize_images(train[0], stage.input_size)
    y_tr = train[1].astype(np.float64)
    x_va = resize_images(val[0], stage.input_size)
    y_va = val[1]
    opt = stage.optimizer.build(net.params)

    best, best_epoch, final = math.nan, 0, math.nan
    rows = []
    for epoch in range(1, stage.epochs + 1):
        t0 = time.perf_counter()
        rng = np.random.default_rng([seed, stage_index, epoch])
        total = 0.0
        for idx in minibatches(len(x_tr), stage.batch_size, rng):
            probs, cache = net.forward(x_tr[idx])
            loss = losses.loss_value(probs, y_tr[idx], weights, focal, loss_kind)
            if not math.isfinite(loss):
                raise TrainingError(f"stage {stage_index} epoch {epoch}: non-finite loss {loss}")
            grad = losses.loss_gradient(probs, y_tr[idx], weights, focal, loss_kind)
            net.set_params(opt_step(opt, net, net.backward(cache, grad)))
            total += loss * len(idx)
        train_loss = total / len(x_tr)
        final = metrics.macro_auroc(net.predict(x_va), y_va)
        if epoch == 1 or _better(final, best):
            best, best_epoch = final, epoch
            save_checkpoint(checkpoint_path, Checkpoint(net, opt, stage_index, epoch, seed,
                                                        stage.input_size,
                                                        {"val_macro_auroc": final}))
        seconds = time.perf_counter() - t0
        rows.append({"stage": stage_index, "epoch": epoch, "train_loss": train_loss,
                     "val_macro_auroc": final, "seconds": seconds})
        log.info("stage %d epoch %d: loss %.5f val macro-AUROC %.4f (%.1fs)",
                 stage_index, epoch, train_loss, final, seconds)
    return StageResult(stage_index, checkpoint_path, best_epoch, best, final, rows)


def opt_step(state: optim.OptimizerState, net: MiniNet, grads) -> dict:
    return optim.step(state, net.params, grads)


def run_plan(net: MiniNet, plan: StagePlan, train: tuple[np.ndarray, np.ndarray],
             val: tuple[np.ndarray, np.ndarray], weights: WeightTable,
             focal: FocalConfig = FocalConfig(), loss_kind: LossKind | str = LossKind.FOCAL,
             seed: int = 0, out_dir: str | Path = ".") -> list[StageResult]:
    out_dir = Path(out_dir)
    results: list[StageResult] = []
    for s, stage in enumerate(plan.stages, start=1):
        if stage.init is StageInit.BEST_CHECKPOINT:
            ckpt = load_checkpoint(results[-1].best_checkpoint)
            net.set_params(ckpt.net.params)
        results.append(train_stage(net, stage, s, train, val, weights, focal, loss_kind, seed,
                                   out_dir / f"stage{s}_best.ckpt"))
    return results
