"""Class-balance weights: prevalence, effective-number and the positive/negative split."""
from __future__ import annotations

import csv
import enum
import io
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class Scheme(str, enum.Enum):
    EFFECTIVE_NUMBER = "effective_number"
    PREVALENCE = "prevalence"
    UNIFORM = "uniform"


class ClampWarning(UserWarning):
    """Raised (as a warning) when a negative-pattern weight is clamped to the floor."""


def _readonly(values, dtype=np.float64) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ClassCounts:
    pattern_names: tuple[str, ...]
    positives: np.ndarray
    negatives: np.ndarray
    total_samples: int

    def __init__(self, pattern_names: Sequence[str], positives: Sequence[int],
                 negatives: Sequence[int], total_samples: int | None = None):
        names = tuple(str(n) for n in pattern_names)
        pos = _readonly(positives, np.int64)
        neg = _readonly(negatives, np.int64)
        if not (len(names) == len(pos) == len(neg)) or len(names) == 0:
            raise ValueError("pattern_names, positives and negatives must have equal non-zero length")
        if (pos < 0).any() or (neg < 0).any():
            raise ValueError("counts must be non-negative")
        if len(set(names)) != len(names):
            raise ValueError("pattern names must be unique")
        if total_samples is None:
            total_samples = int(pos[0] + neg[0])
        bad = [n for n, p, q in zip(names, pos, neg) if p + q != total_samples]
        if bad:
            raise ValueError(f"positives + negatives != total_samples ({total_samples}) for: {bad}")
        object.__setattr__(self, "pattern_names", names)
        object.__setattr__(self, "positives", pos)
        object.__setattr__(self, "negatives", neg)
        object.__setattr__(self, "total_samples", int(total_samples))

    @classmethod
    def from_positives(cls, pattern_names: Sequence[str], positives: Sequence[int],
                       total_samples: int) -> "ClassCounts":
        pos = np.asarray(positives, dtype=np.int64)
        return cls(pattern_names, pos, total_samples - pos, total_samples)

    @property
    def num_classes(self) -> int:
        return len(self.pattern_names)


@dataclass(frozen=True)
class WeightConfig:
    beta: float = 0.9998
    scheme: Scheme = Scheme.EFFECTIVE_NUMBER
    negative_floor: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if not 0.0 <= self.beta < 1.0:
            raise ValueError(f"beta must lie in [0, 1), got {self.beta!r}")
        if not 0.0 <= self.negative_floor <= 1.0:
            raise ValueError(f"negative_floor must lie in [0, 1], got {self.negative_floor!r}")


@dataclass(frozen=True)
class WeightTable:
    """Per-pattern loss multipliers.

    ``alpha_raw``, ``alpha_norm`` and ``n_of_beta`` are only meaningful for the
    effective-number scheme; the other schemes leave them at neutral values
    (ones and ``C``).
    """

    beta: float
    alpha_raw: np.ndarray
    n_of_beta: float
    alpha_norm: np.ndarray
    omega_pos: np.ndarray
    omega_neg: np.ndarray
    omega_neg_raw: np.ndarray
    num_classes: int
    scheme: Scheme = Scheme.EFFECTIVE_NUMBER
    pattern_names: tuple[str, ...] = ()
    positives: np.ndarray | None = field(default=None, repr=False)
    negatives: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def from_omegas(cls, omega_pos, omega_neg, pattern_names: Sequence[str] = ()) -> "WeightTable":
        """Table with explicit multipliers, bypassing any weighting scheme."""
        pos = _readonly(np.atleast_1d(omega_pos))
        neg = _readonly(np.broadcast_to(np.asarray(omega_neg, dtype=np.float64), pos.shape))
        c = pos.shape[0]
        names = tuple(pattern_names) or tuple(f"class_{k}" for k in range(c))
        return cls(beta=0.0, alpha_raw=_readonly(np.ones(c)), n_of_beta=float(c),
                   alpha_norm=_readonly(np.ones(c)), omega_pos=pos, omega_neg=neg,
                   omega_neg_raw=neg, num_classes=c, scheme=Scheme.UNIFORM, pattern_names=names)

    @classmethod
    def uniform(cls, num_classes: int, pattern_names: Sequence[str] = ()) -> "WeightTable":
        return cls.from_omegas(np.ones(num_classes), np.ones(num_classes), pattern_names)

    def to_csv(self) -> str:
        return weight_table_to_csv(self)


def effective_alpha(beta: float, n_k: int) -> float:
    """Inverse effective number ``(1 - beta) / (1 - beta**n_k)``.

    Evaluated as ``d / -expm1(n_k * log1p(-d))`` with ``d = 1 - beta`` so that
    beta arbitrarily close to one keeps full relative precision.
    """
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must lie in [0, 1), got {beta!r}")
    if n_k < 1:
        raise ValueError("pattern has no positive samples")
    d = 1.0 - beta
    if d == 1.0:
        return 1.0
    return d / -math.expm1(n_k * math.log1p(-d))


def beta_from_sample_count(n: int) -> float:
    if n < 1:
        raise ValueError(f"sample count must be >= 1, got {n}")
    return (n - 1) / n


# Stored verbatim; strictly decreasing.
BETA_GRID = (1 - 2.0e-6, 1 - 2.0e-5, 1 - 2.0e-4, 1 - 7.0e-4, 1 - 2.0e-3)


def beta_grid_presets() -> list[float]:
    return list(BETA_GRID)


def build_weight_table(counts: ClassCounts, config: WeightConfig) -> WeightTable:
    c = counts.num_classes
    names = counts.pattern_names
    common = dict(num_classes=c, scheme=config.scheme, pattern_names=names,
                  positives=counts.positives, negatives=counts.negatives)

    if config.scheme is Scheme.UNIFORM:
        ones = _readonly(np.ones(c))
        return WeightTable(beta=config.beta, alpha_raw=ones, n_of_beta=float(c), alpha_norm=ones,
                           omega_pos=ones, omega_neg=ones, omega_neg_raw=ones, **common)

    empty = [n for n, p in zip(names, counts.positives) if p == 0]
    if empty:
        raise ValueError(f"pattern has no positive samples: {', '.join(empty)}")

    if config.scheme is Scheme.PREVALENCE:
        no_neg = [n for n, q in zip(names, counts.negatives) if q == 0]
        if no_neg:
            raise ValueError(f"pattern has no negative samples: {', '.join(no_neg)}")
        totals = (counts.positives + counts.negatives).astype(np.float64)
        pos = _readonly(totals / counts.positives)
        neg = _readonly(totals / counts.negatives)
        ones = _readonly(np.ones(c))
        return WeightTable(beta=config.beta, alpha_raw=ones, n_of_beta=float(c), alpha_norm=ones,
                           omega_pos=pos, omega_neg=neg, omega_neg_raw=neg, **common)

    alpha_raw = np.array([effective_alpha(config.beta, int(n)) for n in counts.positives])
    n_of_beta = math.fsum(alpha_raw)
    alpha_norm = (c / n_of_beta) * alpha_raw
    neg_raw = 1.0 - alpha_norm
    neg = np.maximum(config.negative_floor, neg_raw)
    clamped = [n for n, r, v in zip(names, neg_raw, neg) if r != v]
    if clamped:
        warnings.warn(f"negative weight clamped to {config.negative_floor:g} for: {', '.join(clamped)}",
                      ClampWarning, stacklevel=2)
    return WeightTable(beta=config.beta, alpha_raw=_readonly(alpha_raw), n_of_beta=n_of_beta,
                       alpha_norm=_readonly(alpha_norm), omega_pos=_readonly(alpha_norm),
                       omega_neg=_readonly(neg), omega_neg_raw=_readonly(neg_raw), **common)


CSV_HEADER = ("pattern", "positives", "negatives", "alpha_raw", "alpha_norm",
              "omega_pos", "omega_neg_raw", "omega_neg")


def weight_table_to_csv(table: WeightTable) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    pos = table.positives if table.positives is not None else [""] * table.num_classes
    neg = table.negatives if table.negatives is not None else [""] * table.num_classes
    for k in range(table.num_classes):
        writer.writerow([table.pattern_names[k], pos[k], neg[k],
                         repr(float(table.alpha_raw[k])), repr(float(table.alpha_norm[k])),
                         repr(float(table.omega_pos[k])), repr(float(table.omega_neg_raw[k])),
                         repr(float(table.omega_neg[k]))])
    return buf.getvalue()


def read_weight_table_csv(text: str) -> WeightTable:
    """Inverse of :func:`weight_table_to_csv` (beta and scheme are not stored)."""
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows or tuple(rows[0].keys()) != CSV_HEADER:
        raise ValueError("not a weight-table CSV")
    col = lambda key: _readonly([float(r[key]) for r in rows])  # noqa: E731
    alpha_raw = col("alpha_raw")
    return WeightTable(beta=float("nan"), alpha_raw=alpha_raw, n_of_beta=math.fsum(alpha_raw),
                       alpha_norm=col("alpha_norm"), omega_pos=col("omega_pos"),
                       omega_neg=col("omega_neg"), omega_neg_raw=col("omega_neg_raw"),
                       num_classes=len(rows), pattern_names=tuple(r["pattern"] for r in rows),
                       positives=_readonly([int(r["positives"]) for r in rows], np.int64),
                       negatives=_readonly([int(r["negatives"]) for r in rows], np.int64))
