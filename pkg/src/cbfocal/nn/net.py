"""Miniature resolution-agnostic CNN: 3x3 conv stages, global average pooling, sigmoid head."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from .. import losses
from . import _kernels

ACTIVATIONS = ("relu", "relu6", "swish")


class StaleCacheError(RuntimeError):
    pass


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 1
    num_classes: int = 14
    channels: tuple[int, ...] = (16, 32, 64)
    strides: tuple[int, ...] = (1, 2, 2)
    activation: str = "relu"
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if not 2 <= len(self.channels) <= 4:
            raise ValueError("MiniNet supports 2 to 4 conv stages")
        if len(self.strides) != len(self.channels) or any(s not in (1, 2) for s in self.strides):
            raise ValueError("one stride (1 or 2) per conv stage")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.in_channels < 1 or self.num_classes < 1:
            raise ValueError("in_channels and num_classes must be positive")

    @property
    def min_input_size(self) -> int:
        return math.prod(self.strides)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"], d["strides"] = list(self.channels), list(self.strides)
        return d


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0)
    if name == "relu6":
        return np.clip(z, 0, 6)
    return z * losses.sigmoid(z)


def _act_grad(name, z):
    if name == "relu":
        return (z > 0).astype(z.dtype)
    if name == "relu6":
        return ((z > 0) & (z < 6)).astype(z.dtype)
    s = losses.sigmoid(z)
    return s + z * s * (1 - s)


@dataclass
class ForwardCache:
    version: int
    backend: str
    input_shape: tuple[int, ...]
    layers: list = field(default_factory=list)   # (input shape, saved, pre-activation) per stage
    features: np.ndarray | None = None           # final feature map (B, h, w, F)
    pooled: np.ndarray | None = None             # (B, F)
    probs: np.ndarray | None = None


class MiniNet:
    def __init__(self, config: NetConfig, params: Mapping[str, np.ndarray]):
        self.config = config
        self.params = {k: np.ascontiguousarray(v, dtype=config.dtype) for k, v in params.items()}
        expected = self.param_shapes(config)
        if set(self.params) != set(expected):
            raise ValueError(f"parameter names {sorted(self.params)} do not match {sorted(expected)}")
        for k, shape in expected.items():
            if self.params[k].shape != shape:
                raise ValueError(f"parameter {k} has shape {self.params[k].shape}, expected {shape}")
        self.version = 0

    @staticmethod
    def param_shapes(config: NetConfig) -> dict[str, tuple[int, ...]]:
        shapes = {}
        cin = config.in_channels
        for i, cout in enumerate(config.channels):
            shapes[f"conv{i}.weight"] = (3, 3, cin, cout)
            shapes[f"conv{i}.bias"] = (cout,)
            cin = cout
        shapes["head.weight"] = (cin, config.num_classes)
        shapes["head.bias"] = (config.num_classes,)
        return shapes

    @classmethod
    def init(cls, config: NetConfig, seed: int | np.random.Generator = 0) -> "MiniNet":
        """He-normal conv weights, zero biases."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in cls.param_shapes(config).items():
            if name.endswith("bias"):
                params[name] = np.zeros(shape)
            elif name.startswith("conv"):
                params[name] = rng.standard_normal(shape) * math.sqrt(2.0 / (9 * shape[2]))
            else:
                params[name] = rng.standard_normal(shape) * math.sqrt(1.0 / shape[0])
        return cls(config, params)

    @classmethod
    def zeros(cls, config: NetConfig) -> "MiniNet":
        return cls(config, {k: np.zeros(s) for k, s in cls.param_shapes(config).items()})

    @property
    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    def set_params(self, params: Mapping[str, np.ndarray]) -> None:
        for k, v in params.items():
            if self.params[k].shape != v.shape:
                raise ValueError(f"shape mismatch for {k}")
        self.params = {k: np.ascontiguousarray(params[k], dtype=self.config.dtype) for k in self.params}
        self.version += 1

    def copy(self) -> "MiniNet":
        return MiniNet(self.config, {k: v.copy() for k, v in self.params.items()})

    # ------------------------------------------------------------ passes

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4:
            raise ValueError(f"expected a B x H x W x channels batch, got shape {x.shape}")
        if x.shape[3] != self.config.in_channels:
            raise ValueError(f"input has {x.shape[3]} channels, net expects {self.config.in_channels}")
        m = self.config.min_input_size
        if x.shape[1] < m or x.shape[2] < m:
            raise ValueError(f"input {x.shape[1]}x{x.shape[2]} below the minimum size {m}x{m}")
        return np.ascontiguousarray(x, dtype=self.config.dtype)

    def features(self, x: np.ndarray, cache: ForwardCache | None = None) -> np.ndarray:
        h = self._check_input(x)
        act = self.config.activation
        for i, stride in enumerate(self.config.strides):
            z, saved = _kernels.conv_forward(h, self.params[f"conv{i}.weight"],
                                             self.params[f"conv{i}.bias"], stride)
            if cache is not None:
                cache.layers.append((h.shape, saved, z))
            h = _act(act, z)
        return h

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
        cache = ForwardCache(self.version, _kernels.get_backend(), tuple(x.shape))
        feats = self.features(x, cache)
        pooled = feats.mean(axis=(1, 2), dtype=np.float64).astype(feats.dtype)
        logits = pooled @ self.params["head.weight"] + self.params["head.bias"]
        probs = losses.sigmoid(logits)
        cache.features, cache.pooled, cache.probs = feats, pooled, probs
        return probs, cache

    def backward(self, cache: ForwardCache, loss_grad: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients given dL/dprobs (B x C)."""
        if cache.version != self.version or cache.probs is None:
            raise StaleCacheError("forward cache does not belong to the current parameters")
        dt = self.config.dtype
        p = cache.probs
        g = np.asarray(loss_grad)
        if g.shape != p.shape:
            raise ValueError(f"loss gradient shape {g.shape} does not match outputs {p.shape}")
        dlogits = (g * p * (1 - p)).astype(dt)
        grads = {
            "head.weight": (cache.pooled.astype(np.float64).T @ dlogits.astype(np.float64)).astype(dt),
            "head.bias": dlogits.sum(axis=0, dtype=np.float64).astype(dt),
        }
        dpooled = dlogits @ self.params["head.weight"].T
        _, fh, fw, _ = cache.features.shape
        dh = np.broadcast_to((dpooled / (fh * fw))[:, None, None, :], cache.features.shape)
        for i in reversed(range(len(self.config.strides))):
            in_shape, saved, z = cache.layers[i]
            dz = np.ascontiguousarray(dh * _act_grad(self.config.activation, z), dtype=dt)
            dh, dw, db = _kernels.conv_backward(dz, saved, self.params[f"conv{i}.weight"], in_shape,
                                                self.config.strides[i], backend=cache.backend)
            grads[f"conv{i}.weight"] = dw
            grads[f"conv{i}.bias"] = db
        return grads

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = []
        for s in range(0, x.shape[0], batch_size):
            feats = self.features(x[s:s + batch_size])
            pooled = feats.mean(axis=(1, 2), dtype=np.float64).astype(feats.dtype)
            out.append(losses.sigmoid(pooled @ self.params["head.weight"] + self.params["head.bias"]))
        return np.concatenate(out, axis=0)


def forward(net: MiniNet, batch: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    return net.forward(batch)


def backward(net: MiniNet, cache: ForwardCache, loss_grad: np.ndarray) -> dict[str, np.ndarray]:
    return net.backward(cache, loss_grad)
