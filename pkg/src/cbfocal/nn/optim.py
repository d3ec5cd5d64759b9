"""Adam, RAdam and Ranger (RAdam wrapped in Lookahead) over dicts of named arrays.

Step functions take the current parameters and gradients and return a new
parameter dict; the optimizer state is updated in place.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

Params = Mapping[str, np.ndarray]


class OptimizerKind(str, enum.Enum):
    ADAM = "adam"
    RADAM = "radam"
    RANGER = "ranger"


@dataclass
class OptimizerState:
    kind: OptimizerKind
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    # Lookahead (Ranger only)
    lookahead_k: int = 5
    lookahead_alpha: float = 0.5
    slow: dict[str, np.ndarray] = field(default_factory=dict)
    # RAdam switches to the adaptive step once the SMA length exceeds this
    sma_threshold: float = 5.0

    def __post_init__(self):
        self.kind = OptimizerKind(self.kind)
        if self.lookahead_k < 1:
            raise ValueError("lookahead sync period must be >= 1")
        if not 0.0 < self.lookahead_alpha <= 1.0:
            raise ValueError("lookahead alpha must lie in (0, 1]")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")

    def scalars(self) -> dict:
        return {"kind": self.kind.value, "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "step": self.step, "lookahead_k": self.lookahead_k,
                "lookahead_alpha": self.lookahead_alpha, "sma_threshold": self.sma_threshold}


def make_optimizer(kind: OptimizerKind | str, params: Params, **hyper) -> OptimizerState:
    state = OptimizerState(kind=OptimizerKind(kind), **hyper)
    state.m = {k: np.zeros_like(v) for k, v in params.items()}
    state.v = {k: np.zeros_like(v) for k, v in params.items()}
    if state.kind is OptimizerKind.RANGER:
        state.slow = {k: np.array(v, copy=True) for k, v in params.items()}
    return state


def _check(state: OptimizerState, params: Params, grads: Params) -> None:
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ValueError("parameter, gradient and optimizer-state names differ")
    for k in params:
        if params[k].shape != grads[k].shape or params[k].shape != state.m[k].shape:
            raise ValueError(f"shape mismatch for {k}: param {params[k].shape}, grad {grads[k].shape}")


def _moments(state: OptimizerState, grads: Params) -> None:
    b1, b2 = state.beta1, state.beta2
    for k, g in grads.items():
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * g * g


def adam_step(state: OptimizerState, params: Params, grads: Params) -> dict[str, np.ndarray]:
    _check(state, params, grads)
    state.step += 1
    _moments(state, grads)
    t = state.step
    c1 = 1 - state.beta1 ** t
    c2 = 1 - state.beta2 ** t
    out = {}
    for k, p in params.items():
        mhat = state.m[k] / c1
        vhat = state.v[k] / c2
        out[k] = (p - state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype)
    return out


def sma_length(step: int, beta2: float) -> float:
    """Length of the approximated simple moving average behind the second moment."""
    rho_inf = 2.0 / (1.0 - beta2) - 1.0
    b2t = beta2 ** step
    return rho_inf - 2.0 * step * b2t / (1.0 - b2t)


def radam_rectifier(step: int, beta2: float) -> float | None:
    """Variance rectification term, or None where it is undefined (SMA length <= 4)."""
    rho_inf = 2.0 / (1.0 - beta2) - 1.0
    rho_t = sma_length(step, beta2)
    if rho_t <= 4.0:
        return None
    return math.sqrt((rho_t - 4) * (rho_t - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho_t))


def radam_step(state: OptimizerState, params: Params, grads: Params) -> dict[str, np.ndarray]:
    _check(state, params, grads)
    state.step += 1
    _moments(state, grads)
    t = state.step
    c1 = 1 - state.beta1 ** t
    rect = radam_rectifier(t, state.beta2) if sma_length(t, state.beta2) > state.sma_threshold else None
    out = {}
    for k, p in params.items():
        mhat = state.m[k] / c1
        if rect is None:
            # momentum-SGD form during warm-up
            upd = mhat
        else:
            vhat = np.sqrt(state.v[k] / (1 - state.beta2 ** t))
            upd = rect * mhat / (vhat + state.eps)
        out[k] = (p - state.lr * upd).astype(p.dtype)
    return out


def lookahead_sync(state: OptimizerState, params: Params) -> dict[str, np.ndarray]:
    """Every k inner steps move slow weights toward fast ones and reset fast to slow."""
    if state.step % state.lookahead_k:
        return dict(params)
    a = state.lookahead_alpha
    out = {}
    for k, p in params.items():
        slow = state.slow[k] + a * (p - state.slow[k])
        state.slow[k] = slow.astype(p.dtype)
        out[k] = state.slow[k].copy()
    return out


def ranger_step(state: OptimizerState, params: Params, grads: Params) -> dict[str, np.ndarray]:
    return lookahead_sync(state, radam_step(state, params, grads))


_STEPS = {OptimizerKind.ADAM: adam_step, OptimizerKind.RADAM: radam_step,
          OptimizerKind.RANGER: ranger_step}


def step(state: OptimizerState, params: Params, grads: Params) -> dict[str, np.ndarray]:
    return _STEPS[state.kind](state, params, grads)
