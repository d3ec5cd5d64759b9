"""Class-balanced focal losses with positive/negative pattern weights."""
from .losses import FocalConfig, LossKind, loss_gradient, weighted_bce, weighted_focal
from .metrics import EvalReport, ScoredColumn, auprc, auroc, baseline_auprc, build_report
from .weights import (ClassCounts, Scheme, WeightConfig, WeightTable, beta_from_sample_count,
                      beta_grid_presets, build_weight_table, effective_alpha)

__version__ = "0.1.0"

__all__ = [
    "FocalConfig", "LossKind", "loss_gradient", "weighted_bce", "weighted_focal", "EvalReport",
    "ScoredColumn", "auprc", "auroc", "baseline_auprc", "build_report", "ClassCounts", "Scheme",
    "WeightConfig", "WeightTable", "beta_from_sample_count", "beta_grid_presets",
    "build_weight_table", "effective_alpha",
]
