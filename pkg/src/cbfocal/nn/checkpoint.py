"""Checkpoint files: network parameters, optimizer state and training position.

Stored in the tensor container (see :mod:`cbfocal.tensorfile`) with tensor names
``param/<name>``, ``opt/m/<name>``, ``opt/v/<name>`` and ``opt/slow/<name>``
and metadata keys ``format``, ``format_version``, ``net``, ``optimizer``,
``stage``, ``epoch``, ``seed``, ``input_size`` plus caller extras. Writing a
loaded checkpoint back yields the same bytes.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .. import tensorfile
from .net import MiniNet, NetConfig
from .optim import OptimizerState

FORMAT = "cbfocal-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    net: MiniNet
    optimizer: OptimizerState | None
    stage: int
    epoch: int
    seed: int
    input_size: int
    extra: dict[str, Any] = field(default_factory=dict)


def _tensors(ckpt: Checkpoint) -> dict:
    out = {f"param/{k}": v for k, v in ckpt.net.params.items()}
    opt = ckpt.optimizer
    if opt is not None:
        for group in ("m", "v", "slow"):
            out.update({f"opt/{group}/{k}": v for k, v in getattr(opt, group).items()})
    return out


def _meta(ckpt: Checkpoint) -> dict:
    return {
        "format": FORMAT, "format_version": FORMAT_VERSION,
        "net": ckpt.net.config.to_dict(),
        "optimizer": ckpt.optimizer.scalars() if ckpt.optimizer is not None else None,
        "stage": ckpt.stage, "epoch": ckpt.epoch, "seed": ckpt.seed,
        "input_size": ckpt.input_size, "extra": ckpt.extra,
    }


def dumps(ckpt: Checkpoint) -> bytes:
    return tensorfile.dumps(_tensors(ckpt), _meta(ckpt))


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> Path:
    return tensorfile.save(path, _tensors(ckpt), _meta(ckpt))


def loads(data: bytes) -> Checkpoint:
    tensors, meta = tensorfile.loads(data)
    if meta.get("format") != FORMAT:
        raise CheckpointError("not a checkpoint file")
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('format_version')}")
    cfg = NetConfig(**meta["net"])
    params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    net = MiniNet(cfg, params)
    opt = None
    if meta["optimizer"] is not None:
        opt = OptimizerState(**meta["optimizer"])
        for group in ("m", "v", "slow"):
            prefix = f"opt/{group}/"
            setattr(opt, group, {k[len(prefix):]: v.astype(cfg.dtype) for k, v in tensors.items()
                                 if k.startswith(prefix)})
    return Checkpoint(net, opt, meta["stage"], meta["epoch"], meta["seed"], meta["input_size"],
                      meta.get("extra", {}))


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return loads(path.read_bytes())
