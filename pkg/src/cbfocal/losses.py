"""Weighted binary cross-entropy and focal losses over sigmoid multilabel outputs.

Both losses are reduced as a mean over the batch of the sum over classes.
Every pattern contributes a positive term weighted by ``omega_pos`` and a
negative term ``-(1 - y) log(1 - p)`` weighted by ``omega_neg``; the focal
variant scales them by ``alpha (1 - p)**gamma`` and ``alpha p**gamma``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .weights import WeightTable


class LossKind(str, enum.Enum):
    BCE = "bce"
    FOCAL = "focal"


@dataclass(frozen=True)
class FocalConfig:
    alpha: float = 0.5
    gamma: float = 1.0
    prob_epsilon: float = 1e-7

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.gamma < 0.0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not 0.0 < self.prob_epsilon < 0.5:
            raise ValueError(f"prob_epsilon must lie in (0, 0.5), got {self.prob_epsilon}")


def clamp_probs(p, eps: float) -> np.ndarray:
    return np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)


def focal_term(p: float, config: FocalConfig = FocalConfig()) -> float:
    """Single positive-label focal term ``-alpha (1-p)**gamma log p``."""
    p = min(max(float(p), config.prob_epsilon), 1.0 - config.prob_epsilon)
    return -config.alpha * (1.0 - p) ** config.gamma * math.log(p)


def _check(p, y, w: WeightTable, eps: float):
    p = np.asarray(p)
    y = np.asarray(y)
    if p.ndim == 1:
        p = p[None, :]
    if y.ndim == 1:
        y = y[None, :]
    if p.shape != y.shape:
        raise ValueError(f"prediction shape {p.shape} does not match label shape {y.shape}")
    if p.ndim != 2 or p.shape[0] < 1:
        raise ValueError(f"expected a B x C batch, got shape {p.shape}")
    if p.shape[1] != w.num_classes:
        raise ValueError(f"weight table has {w.num_classes} classes, batch has {p.shape[1]}")
    y = y.astype(np.float64)
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("labels must be exactly 0 or 1")
    return clamp_probs(p, eps), y


def weighted_bce(p, y, w: WeightTable, prob_epsilon: float = 1e-7) -> float:
    p, y = _check(p, y, w, prob_epsilon)
    per = w.omega_pos * (-y * np.log(p)) + w.omega_neg * (-(1.0 - y) * np.log1p(-p))
    return float(per.sum(axis=1).mean())


def weighted_focal(p, y, w: WeightTable, config: FocalConfig = FocalConfig()) -> float:
    p, y = _check(p, y, w, config.prob_epsilon)
    a, g = config.alpha, config.gamma
    pos = w.omega_pos * (-a * (1.0 - p) ** g * y * np.log(p))
    neg = w.omega_neg * (-a * p ** g * (1.0 - y) * np.log1p(-p))
    return float((pos + neg).sum(axis=1).mean())


def loss_gradient(p, y, w: WeightTable, config: FocalConfig = FocalConfig(),
                  kind: LossKind | str = LossKind.FOCAL) -> np.ndarray:
    """Analytic dL/dp at the clamped probabilities (B x C)."""
    kind = LossKind(kind)
    p, y = _check(p, y, w, config.prob_epsilon)
    b = p.shape[0]
    if kind is LossKind.BCE:
        grad = w.omega_pos * (-y / p) + w.omega_neg * ((1.0 - y) / (1.0 - p))
        return grad / b

    a, g = config.alpha, config.gamma
    q = 1.0 - p
    log_p, log_q = np.log(p), np.log1p(-p)
    # gamma * x**(gamma-1) vanishes identically at gamma == 0.
    dpos = g * q ** (g - 1.0) * log_p if g else 0.0
    dneg = g * p ** (g - 1.0) * log_q if g else 0.0
    grad_pos = w.omega_pos * a * y * (dpos - q ** g / p)
    grad_neg = w.omega_neg * a * (1.0 - y) * (p ** g / q - dneg)
    return (grad_pos + grad_neg) / b


def loss_value(p, y, w: WeightTable, config: FocalConfig = FocalConfig(),
               kind: LossKind | str = LossKind.FOCAL) -> float:
    if LossKind(kind) is LossKind.BCE:
        return weighted_bce(p, y, w, config.prob_epsilon)
    return weighted_focal(p, y, w, config)


def sigmoid(x):
    """Logistic function without overflow for large |x|."""
    x = np.asarray(x, dtype=np.result_type(x, np.float32))
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x):
    return np.maximum(x, 0)


def relu6(x):
    return np.minimum(np.maximum(x, 0), 6)


def swish(x):
    return x * sigmoid(x)


def activations(x: float) -> dict[str, float]:
    s = float(sigmoid(np.float64(x)))
    return {
        "relu": max(0.0, x),
        "relu6": min(max(0.0, x), 6.0),
        "swish": x * s,
        "sigmoid": s,
    }
