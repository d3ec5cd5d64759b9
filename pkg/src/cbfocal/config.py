"""Declarative run configuration (YAML), validated before any work starts."""
from __future__ import annotations

import os
from importlib import resources
from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .data import SplitKind, SplitSpec, SynthSpec, Vocabulary
from .losses import FocalConfig, LossKind
from .nn.net import NetConfig
from .nn.optim import OptimizerKind
from .nn.train import OptimizerSpec, Stage, StageInit, StagePlan
from .weights import Scheme, WeightConfig, beta_from_sample_count, beta_grid_presets

BUILTIN_PREFIX = "builtin:"


class ConfigError(ValueError):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class WeightsSection(_Section):
    scheme: Scheme = Scheme.EFFECTIVE_NUMBER
    # "auto" derives beta = (N - 1) / N from the training-subset size
    beta: Union[float, Literal["auto"]] = 0.9998
    # used by compute-weights only; "presets" expands to the five-value grid
    beta_grid: Union[list[float], Literal["presets"], None] = None
    negative_floor: float = Field(0.0, ge=0.0, le=1.0)

    @field_validator("beta")
    @classmethod
    def _beta_range(cls, v):
        if v != "auto" and not 0.0 <= v < 1.0:
            raise ValueError("beta must lie in [0, 1)")
        return v

    @field_validator("beta_grid")
    @classmethod
    def _grid_range(cls, v):
        if isinstance(v, list):
            if not v:
                raise ValueError("beta_grid must not be empty")
            if any(not 0.0 <= b < 1.0 for b in v):
                raise ValueError("every beta_grid value must lie in [0, 1)")
        return v

    def betas(self) -> list[float]:
        if self.beta_grid == "presets":
            return beta_grid_presets()
        if self.beta_grid is not None:
            return list(self.beta_grid)
        if self.beta == "auto":
            raise ConfigError("beta 'auto' needs a sample count; use weight_config(n)")
        return [self.beta]

    def weight_config(self, n_samples: int | None = None) -> WeightConfig:
        beta = self.beta
        if beta == "auto":
            if n_samples is None:
                raise ConfigError("beta 'auto' needs the training sample count")
            beta = beta_from_sample_count(n_samples)
        return WeightConfig(beta=beta, scheme=self.scheme, negative_floor=self.negative_floor)


class LossSection(_Section):
    kind: LossKind = LossKind.FOCAL
    alpha: float = Field(0.5, ge=0.0, le=1.0)
    gamma: float = Field(1.0, ge=0.0)
    prob_epsilon: float = Field(1e-7, gt=0.0, lt=0.5)

    def focal_config(self) -> FocalConfig:
        return FocalConfig(alpha=self.alpha, gamma=self.gamma, prob_epsilon=self.prob_epsilon)


class ModelSection(_Section):
    channels: tuple[int, ...] = (16, 32, 64)
    strides: tuple[int, ...] = (1, 2, 2)
    activation: Literal["relu", "relu6", "swish"] = "relu"
    dtype: Literal["float32", "float64"] = "float32"


class OptimizerSection(_Section):
    kind: OptimizerKind = OptimizerKind.RANGER
    lr: float = Field(1e-3, gt=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)
    lookahead_k: int = Field(5, ge=1)
    lookahead_alpha: float = Field(0.5, gt=0.0, le=1.0)

    def spec(self) -> OptimizerSpec:
        return OptimizerSpec(**self.model_dump())


class StageSection(_Section):
    input_size: int = Field(gt=0)
    batch_size: int = Field(gt=0)
    epochs: int = Field(gt=0)
    init: StageInit = StageInit.FRESH
    optimizer: Optional[OptimizerSection] = None


class SplitSection(_Section):
    kind: SplitKind = SplitKind.RATIO
    seed: Optional[int] = None  # falls back to the run seed
    group_by_patient: bool = False
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    k: int = Field(5, ge=2)
    fold: int = 0
    val_fraction: float = Field(0.1, ge=0.0, lt=1.0)


class SynthSection(_Section):
    pattern_names: tuple[str, ...] = SynthSpec.pattern_names
    prevalences: tuple[float, ...] = SynthSpec.prevalences
    n_samples: int = SynthSpec.n_samples
    image_size: int = SynthSpec.image_size
    channels: int = SynthSpec.channels
    blob_sigma: float = SynthSpec.blob_sigma
    blob_amplitude: float = SynthSpec.blob_amplitude
    noise_std: float = SynthSpec.noise_std
    label_correlation: float = SynthSpec.label_correlation
    seed: int = SynthSpec.seed

    @model_validator(mode="after")
    def _valid(self):
        self.spec()
        return self

    def spec(self) -> SynthSpec:
        return SynthSpec(**self.model_dump())


class RunConfig(_Section):
    seed: int = Field(0, ge=0)
    # label-file vocabulary; None keeps the fourteen chest-radiograph patterns
    patterns: Optional[tuple[str, ...]] = None
    weights: WeightsSection = WeightsSection()
    loss: LossSection = LossSection()
    model: ModelSection = ModelSection()
    optimizer: OptimizerSection = OptimizerSection()
    stages: tuple[StageSection, ...] = (StageSection(input_size=32, batch_size=32, epochs=1),)
    split: SplitSection = SplitSection()
    synth: SynthSection = SynthSection()
    eval_subset: Literal["train", "val", "test"] = "test"

    @model_validator(mode="after")
    def _plan_is_valid(self):
        self.stage_plan()
        self.split_spec()
        if self.patterns is not None and len(set(self.patterns)) != len(self.patterns):
            raise ValueError("patterns must be unique")
        return self

    def stage_plan(self) -> StagePlan:
        stages = [Stage(s.input_size, s.batch_size, s.epochs, s.init,
                        (s.optimizer or self.optimizer).spec()) for s in self.stages]
        plan = StagePlan(tuple(stages))
        m = self.net_config(1, 1).min_input_size
        if stages[0].input_size < m:
            raise ValueError(f"stage input size {stages[0].input_size} is below the network minimum {m}")
        return plan

    def net_config(self, num_classes: int, in_channels: int) -> NetConfig:
        m = self.model
        return NetConfig(in_channels=in_channels, num_classes=num_classes, channels=m.channels,
                         strides=m.strides, activation=m.activation, dtype=m.dtype)

    def split_spec(self, fold: int | None = None, kind: SplitKind | None = None,
                   train_val_ids=(), test_ids=()) -> SplitSpec:
        s = self.split
        return SplitSpec(kind=kind or s.kind, seed=self.seed if s.seed is None else s.seed,
                         group_by_patient=s.group_by_patient, ratios=s.ratios, k=s.k,
                         fold=s.fold if fold is None else fold, val_fraction=s.val_fraction,
                         train_val_ids=tuple(train_val_ids), test_ids=tuple(test_ids))

    def vocabulary(self) -> Vocabulary:
        if self.patterns is None:
            return Vocabulary()
        return Vocabulary(self.patterns, {})

    def with_seed(self, seed: int | None) -> "RunConfig":
        return self if seed is None else self.model_copy(update={"seed": seed})


def builtin_names() -> list[str]:
    files = resources.files("cbfocal") / "configs"
    return sorted(p.name[:-5] for p in files.iterdir() if p.name.endswith(".yaml"))


def _read_text(source: str | os.PathLike) -> tuple[str, str]:
    source = str(source)
    if source.startswith(BUILTIN_PREFIX):
        name = source[len(BUILTIN_PREFIX):]
        if name not in builtin_names():
            raise ConfigError(f"unknown builtin config {name!r}; available: {', '.join(builtin_names())}")
        return (resources.files("cbfocal") / "configs" / f"{name}.yaml").read_text(), source
    path = Path(source)
    if not path.exists() or path.is_dir():
        raise ConfigError(f"config file not found: {path}")
    return path.read_text(), str(path)


def parse_config(text: str, origin: str = "<config>") -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"{origin}: invalid YAML: {e}") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{origin}: top level must be a mapping")
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        lines = [f"{origin}: invalid configuration"]
        for err in e.errors():
            where = ".".join(str(p) for p in err["loc"]) or "<root>"
            lines.append(f"  {where}: {err['msg']}")
        raise ConfigError("\n".join(lines)) from None


def load_config(source: str | os.PathLike | None) -> RunConfig:
    """Load a YAML file or ``builtin:<name>``; ``None`` gives the defaults."""
    if source is None:
        return RunConfig()
    return parse_config(*_read_text(source))
