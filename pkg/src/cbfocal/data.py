"""Label ingestion, class counting, dataset splits and the synthetic imbalanced generator."""
from __future__ import annotations

import csv
import enum
import io
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from statistics import NormalDist
from typing import Iterable, Mapping, Sequence, TextIO

import numpy as np

from . import tensorfile
from .weights import ClassCounts

NIH14 = (
    "Atelectasis", "Cardiomegaly", "Effusion", "Infiltration", "Mass", "Nodule", "Pneumonia",
    "Pneumothorax", "Consolidation", "Edema", "Emphysema", "Fibrosis", "Pleural Thickening",
    "Hernia",
)

# Spellings found in metadata files and tables, mapped to the configured names.
NIH14_ALIASES = {
    "Pleural_Thickening": "Pleural Thickening",
    "Pleural Thick.": "Pleural Thickening",
    "Pleural Thicken.": "Pleural Thickening",
}

NO_FINDING = "No Finding"

# Training distribution of the official split: positives per pattern, in
# ascending order, plus the healthy (no finding) count and the sample total.
OFFICIAL_TRAIN_POSITIVES = {
    "Hernia": 227, "Pneumonia": 1431, "Fibrosis": 1686, "Edema": 2303, "Emphysema": 2516,
    "Cardiomegaly": 2776, "Pleural Thickening": 3385, "Consolidation": 4667,
    "Pneumothorax": 5302, "Mass": 5782, "Nodule": 6331, "Atelectasis": 11559,
    "Effusion": 13317, "Infiltration": 19894,
}
OFFICIAL_TRAIN_HEALTHY = 60361
OFFICIAL_TRAIN_TOTAL = 112120


class LabelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    names: tuple[str, ...] = NIH14
    aliases: Mapping[str, str] = field(default_factory=lambda: dict(NIH14_ALIASES))

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        bad = {a: t for a, t in self.aliases.items() if t not in self.names}
        if bad:
            raise ValueError(f"aliases point outside the vocabulary: {bad}")

    def normalize(self, name: str) -> str | None:
        name = name.strip()
        if name in self.names:
            return name
        return self.aliases.get(name)

    def __len__(self) -> int:
        return len(self.names)


@dataclass(frozen=True)
class LabelRecord:
    image_id: str
    findings: frozenset[str] = frozenset()

    @property
    def healthy(self) -> bool:
        return not self.findings

    @property
    def patient_id(self) -> str:
        return patient_of(self.image_id)


def patient_of(image_id: str) -> str:
    """Patient key: the id prefix before the first underscore."""
    return image_id.split("_", 1)[0]


def parse_labels(stream: TextIO | str, vocabulary: Vocabulary = Vocabulary(),
                 source: str = "<labels>") -> list[LabelRecord]:
    """Read ``Image Index`` / ``Finding Labels`` rows (pipe-delimited findings)."""
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    reader = csv.reader(stream)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise LabelFormatError(f"{source}: empty label file") from None
    missing = [c for c in ("Image Index", "Finding Labels") if c not in header]
    if missing:
        raise LabelFormatError(f"{source}: missing columns {missing}")
    i_id, i_find = header.index("Image Index"), header.index("Finding Labels")

    records = []
    unknown: dict[str, list[int]] = {}
    seen: set[str] = set()
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) <= max(i_id, i_find):
            raise LabelFormatError(f"{source}:{lineno}: expected at least {max(i_id, i_find) + 1} fields")
        image_id = row[i_id].strip()
        if not image_id:
            raise LabelFormatError(f"{source}:{lineno}: empty image id")
        if image_id in seen:
            raise LabelFormatError(f"{source}:{lineno}: duplicate image id {image_id!r}")
        seen.add(image_id)
        raw = row[i_find].strip()
        findings = set()
        if raw and raw != NO_FINDING:
            for part in raw.split("|"):
                name = vocabulary.normalize(part)
                if name is None:
                    unknown.setdefault(part.strip(), []).append(lineno)
                else:
                    findings.add(name)
        records.append(LabelRecord(image_id, frozenset(findings)))
    if unknown:
        detail = "; ".join(f"{n!r} (rows {', '.join(map(str, rows[:5]))})" for n, rows in unknown.items())
        raise LabelFormatError(f"{source}: unknown finding names: {detail}")
    return records


def read_labels(path: str | Path, vocabulary: Vocabulary = Vocabulary()) -> list[LabelRecord]:
    with open(path, newline="") as fh:
        return parse_labels(fh, vocabulary, source=str(path))


def serialize_labels(records: Iterable[LabelRecord], vocabulary: Vocabulary = Vocabulary()) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["Image Index", "Finding Labels"])
    for r in records:
        names = [n for n in vocabulary.names if n in r.findings]
        w.writerow([r.image_id, "|".join(names) if names else NO_FINDING])
    return buf.getvalue()


def read_id_list(path: str | Path) -> list[str]:
    return [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]


def label_matrix(records: Sequence[LabelRecord], vocabulary: Vocabulary = Vocabulary()) -> np.ndarray:
    y = np.zeros((len(records), len(vocabulary)), dtype=np.uint8)
    col = {n: k for k, n in enumerate(vocabulary.names)}
    for i, r in enumerate(records):
        for f in r.findings:
            y[i, col[f]] = 1
    return y


def class_counts(records: Sequence[LabelRecord], membership: Iterable[str] | None = None,
                 vocabulary: Vocabulary = Vocabulary()) -> ClassCounts:
    """Per-pattern positives/negatives over the records in ``membership`` (all if None)."""
    if membership is not None:
        ids = set(membership)
        subset = [r for r in records if r.image_id in ids]
    else:
        subset = list(records)
    if not subset:
        raise ValueError("class_counts: empty split")
    pos = label_matrix(subset, vocabulary).sum(axis=0, dtype=np.int64)
    return ClassCounts.from_positives(vocabulary.names, pos, len(subset))


def official_class_counts(vocabulary: Vocabulary = Vocabulary()) -> ClassCounts:
    return ClassCounts.from_positives(vocabulary.names,
                                      [OFFICIAL_TRAIN_POSITIVES[n] for n in vocabulary.names], OFFICIAL_TRAIN_TOTAL)


def official_records() -> list[LabelRecord]:
    """A deterministic record set whose counts reproduce the official-split table.

    Healthy records come first; the remaining records receive findings by
    walking a cyclic cursor pattern by pattern (rarest first), which gives
    every sick record at least one finding and never repeats a pattern on a
    record.
    """
    n_sick = OFFICIAL_TRAIN_TOTAL - OFFICIAL_TRAIN_HEALTHY
    findings: list[set[str]] = [set() for _ in range(n_sick)]
    cursor = 0
    for name, count in OFFICIAL_TRAIN_POSITIVES.items():
        for j in range(count):
            findings[(cursor + j) % n_sick].add(name)
        cursor = (cursor + count) % n_sick
    records = [LabelRecord(f"{i:08d}_000.png") for i in range(OFFICIAL_TRAIN_HEALTHY)]
    records += [LabelRecord(f"{OFFICIAL_TRAIN_HEALTHY + i:08d}_000.png", frozenset(f))
                for i, f in enumerate(findings)]
    return records


# ---------------------------------------------------------------- splits


class SplitKind(str, enum.Enum):
    OFFICIAL = "official"
    KFOLD = "kfold"
    RATIO = "ratio"


@dataclass(frozen=True)
class SplitSpec:
    kind: SplitKind = SplitKind.RATIO
    seed: int = 0
    group_by_patient: bool = False
    # ratio
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    # kfold
    k: int = 5
    fold: int = 0
    # kfold / official: share of the non-test ids held out for validation
    val_fraction: float = 0.1
    # official
    train_val_ids: tuple[str, ...] = ()
    test_ids: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", SplitKind(self.kind))
        if self.kind is SplitKind.KFOLD:
            if self.k < 2:
                raise ValueError("k-fold split needs k >= 2")
            if not 0 <= self.fold < self.k:
                raise ValueError(f"fold index {self.fold} outside [0, {self.k})")
        if self.kind is SplitKind.RATIO:
            if len(self.ratios) != 3 or min(self.ratios) < 0 or not math.isclose(sum(self.ratios), 1.0, abs_tol=1e-9):
                raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {self.ratios}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")


@dataclass(frozen=True)
class Split:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]

    def subset_of(self) -> dict[str, str]:
        out = {}
        for name in ("train", "val", "test"):
            for i in getattr(self, name):
                out[i] = name
        return out

    def manifest_csv(self, order: Sequence[str] | None = None) -> str:
        lookup = self.subset_of()
        ids = order if order is not None else sorted(lookup)
        lines = ["image_id,subset"] + [f"{i},{lookup[i]}" for i in ids if i in lookup]
        return "\n".join(lines) + "\n"


def _groups(ids: Sequence[str], by_patient: bool) -> list[list[str]]:
    if not by_patient:
        return [[i] for i in ids]
    out: dict[str, list[str]] = {}
    for i in ids:
        out.setdefault(patient_of(i), []).append(i)
    return list(out.values())


def _partition(groups: list[list[str]], fractions: Sequence[float], rng) -> list[list[str]]:
    """Shuffle groups and cut the sequence at cumulative image-count targets."""
    order = rng.permutation(len(groups))
    total = sum(len(g) for g in groups)
    cuts = np.round(np.cumsum(fractions)[:-1] * total).astype(int)
    parts: list[list[str]] = [[] for _ in fractions]
    seen = 0
    for gi in order:
        g = groups[gi]
        part = int(np.searchsorted(cuts, seen, side="right"))
        parts[part].extend(g)
        seen += len(g)
    return parts


def make_split(records: Sequence[LabelRecord], spec: SplitSpec) -> Split:
    ids = [r.image_id for r in records]
    position = {i: n for n, i in enumerate(ids)}
    rng = np.random.default_rng(spec.seed)
    ordered = lambda xs: tuple(sorted(xs, key=position.__getitem__))  # noqa: E731

    if spec.kind is SplitKind.RATIO:
        train, val, test = _partition(_groups(ids, spec.group_by_patient), spec.ratios, rng)
        return Split(ordered(train), ordered(val), ordered(test))

    if spec.kind is SplitKind.KFOLD:
        groups = _groups(ids, spec.group_by_patient)
        order = rng.permutation(len(groups))
        folds = np.array_split(order, spec.k)
        test = [i for gi in folds[spec.fold] for i in groups[gi]]
        rest = [groups[gi] for f, idx in enumerate(folds) if f != spec.fold for gi in idx]
        train, val = _partition(rest, (1 - spec.val_fraction, spec.val_fraction), rng)
        return Split(ordered(train), ordered(val), ordered(test))

    trval, test = list(spec.train_val_ids), list(spec.test_ids)
    overlap = set(trval) & set(test)
    if overlap:
        raise ValueError(f"train_val and test lists overlap on {len(overlap)} ids, e.g. {sorted(overlap)[:3]}")
    absent = [i for i in trval + test if i not in position]
    if absent:
        raise ValueError(f"{len(absent)} listed ids are absent from the label records, e.g. {absent[:3]}")
    train, val = _partition(_groups(trval, spec.group_by_patient), (1 - spec.val_fraction, spec.val_fraction), rng)
    return Split(ordered(train), ordered(val), ordered(test))


def kfold_assignment(records: Sequence[LabelRecord], k: int, seed: int,
                     group_by_patient: bool = False) -> dict[str, int]:
    """Fold index of every id, consistent with ``make_split`` for any fold."""
    out = {}
    for f in range(k):
        split = make_split(records, SplitSpec(kind=SplitKind.KFOLD, k=k, fold=f, seed=seed,
                                              group_by_patient=group_by_patient))
        out.update({i: f for i in split.test})
    return out


# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SynthSpec:
    pattern_names: tuple[str, ...] = ("p0", "p1", "p2", "p3", "p4", "p5")
    prevalences: tuple[float, ...] = (0.005, 0.0113, 0.0257, 0.0583, 0.132, 0.3)
    n_samples: int = 5000
    image_size: int = 32
    channels: int = 1
    blob_sigma: float = 0.07  # fraction of image side
    blob_amplitude: float = 2.5
    noise_std: float = 1.0
    label_correlation: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "pattern_names", tuple(self.pattern_names))
        object.__setattr__(self, "prevalences", tuple(float(p) for p in self.prevalences))
        if len(self.pattern_names) != len(self.prevalences) or not self.pattern_names:
            raise ValueError("need one prevalence per pattern")
        if any(not 0.0 < p < 1.0 for p in self.prevalences):
            raise ValueError("prevalences must lie in (0, 1)")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.image_size < 4 or self.image_size % 2:
            raise ValueError("image_size must be an even number >= 4")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if not 0.0 <= self.label_correlation < 1.0:
            raise ValueError("label_correlation must lie in [0, 1)")

    @property
    def num_classes(self) -> int:
        return len(self.pattern_names)


def pattern_quadrant(k: int) -> int:
    """Quadrant holding pattern k's blob: 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right."""
    return k % 4


def pattern_polarity(k: int) -> float:
    return 1.0 if (k // 4) % 2 == 0 else -1.0


def quadrant_of(row: float, col: float, size: int) -> int:
    return 2 * int(row >= size / 2) + int(col >= size / 2)


@dataclass
class SyntheticDataset:
    images: np.ndarray          # (n, S, S, channels) float32
    labels: np.ndarray          # (n, C) uint8
    centers: np.ndarray         # (n, C, 2) blob centre (row, col); nan where absent
    records: list[LabelRecord]
    spec: SynthSpec

    @property
    def vocabulary(self) -> Vocabulary:
        return Vocabulary(self.spec.pattern_names, {})

    @property
    def ids(self) -> list[str]:
        return [r.image_id for r in self.records]

    def subset(self, ids: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        index = {r.image_id: n for n, r in enumerate(self.records)}
        rows = np.fromiter((index[i] for i in ids), dtype=np.int64, count=len(ids))
        return self.images[rows], self.labels[rows]

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        tensorfile.save(directory / "images.bin",
                        {"images": self.images, "labels": self.labels, "centers": self.centers},
                        meta={"kind": "synthetic-dataset", "spec": _spec_dict(self.spec),
                              "ids": self.ids})
        (directory / "labels.csv").write_text(serialize_labels(self.records, self.vocabulary))

    @classmethod
    def load(cls, directory: str | Path) -> "SyntheticDataset":
        directory = Path(directory)
        tensors, meta = tensorfile.load(directory / "images.bin")
        if meta.get("kind") != "synthetic-dataset":
            raise tensorfile.TensorFileError(f"{directory}: not a synthetic dataset file")
        spec = SynthSpec(**meta["spec"])
        vocab = Vocabulary(spec.pattern_names, {})
        records = read_labels(directory / "labels.csv", vocab)
        if [r.image_id for r in records] != meta["ids"]:
            raise ValueError(f"{directory}: labels.csv does not match images.bin")
        if not np.array_equal(label_matrix(records, vocab), tensors["labels"]):
            raise ValueError(f"{directory}: labels.csv disagrees with stored label tensor")
        return cls(tensors["images"], tensors["labels"], tensors["centers"], records, spec)


def _spec_dict(spec: SynthSpec) -> dict:
    return {"pattern_names": list(spec.pattern_names), "prevalences": list(spec.prevalences),
            "n_samples": spec.n_samples, "image_size": spec.image_size, "channels": spec.channels,
            "blob_sigma": spec.blob_sigma, "blob_amplitude": spec.blob_amplitude,
            "noise_std": spec.noise_std, "label_correlation": spec.label_correlation,
            "seed": spec.seed}


def generate_synthetic(spec: SynthSpec) -> SyntheticDataset:
    """Noise images with one Gaussian blob per positive label, placed in the pattern's quadrant."""
    n, c, s = spec.n_samples, spec.num_classes, spec.image_size
    low = [name for name, p in zip(spec.pattern_names, spec.prevalences) if n * p < 1.0]
    if low:
        warnings.warn(f"expected positive count below 1 for: {', '.join(low)}", stacklevel=2)

    rng = np.random.default_rng(spec.seed)
    thresholds = np.array([NormalDist().inv_cdf(p) for p in spec.prevalences])
    rho = spec.label_correlation
    shared = rng.standard_normal((n, 1))
    latent = math.sqrt(rho) * shared + math.sqrt(1.0 - rho) * rng.standard_normal((n, c))
    labels = (latent < thresholds).astype(np.uint8)

    images = (spec.noise_std * rng.standard_normal((n, s, s, spec.channels))).astype(np.float32)
    half = s / 2
    sigma = spec.blob_sigma * s
    margin = min(1.5 * sigma, half / 2 - 0.5)
    grid = np.arange(s) + 0.5
    centers = np.full((n, c, 2), np.nan)
    jitter = rng.uniform(margin, half - margin, size=(n, c, 2))
    for k in range(c):
        q = pattern_quadrant(k)
        origin = np.array([(q // 2) * half, (q % 2) * half])
        amp = pattern_polarity(k) * spec.blob_amplitude
        rows = np.flatnonzero(labels[:, k])
        for i in rows:
            cy, cx = origin + jitter[i, k]
            centers[i, k] = (cy, cx)
            blob = np.exp(-((grid[:, None] - cy) ** 2 + (grid[None, :] - cx) ** 2) / (2 * sigma ** 2))
            images[i] += (amp * blob)[:, :, None].astype(np.float32)

    vocab = Vocabulary(spec.pattern_names, {})
    records = [LabelRecord(f"s{i:06d}_000.png",
                           frozenset(vocab.names[k] for k in np.flatnonzero(labels[i])))
               for i in range(n)]
    return SyntheticDataset(images, labels, centers, records, spec)


def resize_images(images: np.ndarray, size: int) -> np.ndarray:
    """Block-mean downsampling or nearest upsampling by an integer factor."""
    s = images.shape[1]
    if size == s:
        return images
    if size < s:
        if s % size:
            raise ValueError(f"cannot downsample {s} to {size}: not an integer factor")
        f = s // size
        b, _, _, ch = images.shape
        return images.reshape(b, size, f, size, f, ch).mean(axis=(2, 4), dtype=np.float64).astype(images.dtype)
    if size % s:
        raise ValueError(f"cannot upsample {s} to {size}: not an integer factor")
    f = size // s
    return images.repeat(f, axis=1).repeat(f, axis=2)
