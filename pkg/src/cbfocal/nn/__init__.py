from ._kernels import available_backends, get_backend, set_backend
from .cam import class_activation_map
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .net import MiniNet, NetConfig, StaleCacheError, backward, forward
from .optim import OptimizerKind, OptimizerState, adam_step, make_optimizer, radam_step, ranger_step
from .train import OptimizerSpec, Stage, StageInit, StagePlan, StageResult, TrainingError, run_plan, train_stage

__all__ = [
    "available_backends", "get_backend", "set_backend", "class_activation_map", "Checkpoint",
    "load_checkpoint", "save_checkpoint", "MiniNet", "NetConfig", "StaleCacheError", "backward",
    "forward", "OptimizerKind", "OptimizerState", "adam_step", "make_optimizer", "radam_step",
    "ranger_step", "OptimizerSpec", "Stage", "StageInit", "StagePlan", "StageResult",
    "TrainingError", "run_plan", "train_stage",
]
