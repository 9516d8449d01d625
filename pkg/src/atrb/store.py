"""Binary embedding store: file format, validation, synthetic data.

The on-disk layout is little-endian with no padding:

    magic "ATRB" | version u32 | n u64 | d u32 | num_classes u32 |
    reserved u32 | features n*d f32 row-major | labels n i32 | ids n u64
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"ATRB"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sIQIII")


class StoreError(Exception):
    """Base class for embedding store failures."""


class FormatError(StoreError):
    """File does not carry the expected magic or version."""


class CorruptionError(StoreError):
    """File is structurally damaged (truncated or oversized payload)."""


class ValidationError(StoreError):
    """Decoded payload violates a set invariant (labels, ids, finiteness)."""


def _frozen_array(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype, order="C")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    """A training set: N feature rows with class labels and stable ids.

    Arrays are copied and marked read-only at construction, so instances
    are safe to share across threads and worker processes.
    """

    features: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    num_classes: int

    def __post_init__(self):
        features = np.array(self.features, dtype=np.float32, order="C")
        labels = np.array(self.labels, dtype=np.int64, order="C")
        ids = np.array(self.ids, dtype=np.uint64, order="C")
        if features.ndim != 2:
            raise ValidationError("features must be a 2-D matrix")
        n, d = features.shape
        if n < 1 or d < 1:
            raise ValidationError(f"need n >= 1 and d >= 1, got n={n}, d={d}")
        if self.num_classes < 2:
            raise ValidationError(f"need num_classes >= 2, got {self.num_classes}")
        if labels.shape != (n,):
            raise ValidationError(f"labels must have shape ({n},), got {labels.shape}")
        if ids.shape != (n,):
            raise ValidationError(f"ids must have shape ({n},), got {ids.shape}")
        if not np.isfinite(features).all():
            raise ValidationError("features contain NaN or Inf")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise ValidationError(
                f"labels must lie in [0, {self.num_classes}), "
                f"found range [{labels.min()}, {labels.max()}]"
            )
        if np.unique(ids).size != n:
            raise ValidationError("sample ids are not unique")
        for name, arr in (("features", features), ("labels", labels), ("ids", ids)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True, eq=False)
class TargetSample:
    """One evaluation sample: a feature vector with its true label and id."""

    feature: np.ndarray
    label: int
    id: int

    def __post_init__(self):
        feature = np.array(self.feature, dtype=np.float32, order="C").ravel()
        if feature.size < 1:
            raise ValidationError("target feature is empty")
        if not np.isfinite(feature).all():
            raise ValidationError("target feature contains NaN or Inf")
        if self.label < 0:
            raise ValidationError(f"target label must be >= 0, got {self.label}")
        feature.setflags(write=False)
        object.__setattr__(self, "feature", feature)


@dataclass(frozen=True)
class SyntheticConfig:
    """Gaussian-mixture generator settings.

    Class centers are placed deterministically (scaled one-hot axes when the
    dimension allows, an evenly spaced line otherwise) so that every pair of
    centers is at least ``inter_class_distance`` apart; the only randomness
    is the per-sample Gaussian noise with standard deviation
    ``cluster_spread``, drawn from ``seed``.
    """

    num_classes: int
    samples_per_class: int
    d: int
    cluster_spread: float = 1.0
    inter_class_distance: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if not self.cluster_spread > 0:
            raise ValueError("cluster_spread must be > 0")
        if not self.inter_class_distance > 0:
            raise ValueError("inter_class_distance must be > 0")
        if self.seed < 0:
            raise ValueError("seed must be a non-negative integer")


def class_centers(cfg: SyntheticConfig) -> np.ndarray:
    """Deterministic (num_classes, d) center layout for a config."""
    centers = np.zeros((cfg.num_classes, cfg.d), dtype=np.float64)
    if cfg.d >= cfg.num_classes:
        # One-hot axes scaled so every pairwise distance equals the minimum.
        scale = cfg.inter_class_distance / np.sqrt(2.0)
        for c in range(cfg.num_classes):
            centers[c, c] = scale
    else:
        for c in range(cfg.num_classes):
            centers[c, 0] = c * cfg.inter_class_distance
    return centers


def generate_synthetic(cfg: SyntheticConfig) -> EmbeddingSet:
    """Draw a class-balanced Gaussian mixture; pure function of ``cfg``."""
    centers = class_centers(cfg)
    n = cfg.num_classes * cfg.samples_per_class
    labels = np.repeat(np.arange(cfg.num_classes, dtype=np.int64), cfg.samples_per_class)
    rng = np.random.default_rng(cfg.seed)
    noise = rng.standard_normal((n, cfg.d)) * cfg.cluster_spread
    features = (centers[labels] + noise).astype(np.float32)
    ids = np.arange(n, dtype=np.uint64)
    return EmbeddingSet(features=features, labels=labels, ids=ids, num_classes=cfg.num_classes)


def class_indices(dataset: EmbeddingSet, label: int) -> np.ndarray:
    """Ascending indices of all samples carrying ``label``."""
    if not 0 <= label < dataset.num_classes:
        raise ValueError(f"label {label} out of range [0, {dataset.num_classes})")
    return np.flatnonzero(dataset.labels == label)


def save_embeddings(dataset: EmbeddingSet, path) -> None:
    """Write the exact binary layout; identical sets produce identical bytes."""
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, dataset.n, dataset.d, dataset.num_classes, 0)
    payload = b"".join(
        (
            header,
            np.ascontiguousarray(dataset.features, dtype="<f4").tobytes(),
            np.ascontiguousarray(dataset.labels, dtype="<i4").tobytes(),
            np.ascontiguousarray(dataset.ids, dtype="<u8").tobytes(),
        )
    )
    Path(path).write_bytes(payload)


def load_embeddings(path) -> EmbeddingSet:
    """Read and validate a store file; round-trips bit-exactly with save."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: not an embedding store (bad magic)")
    if len(data) < _HEADER.size:
        raise CorruptionError(f"{path}: truncated header")
    _, version, n, d, num_classes, _reserved = _HEADER.unpack_from(data, 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    expected = _HEADER.size + n * d * 4 + n * 4 + n * 8
    if len(data) != expected:
        raise CorruptionError(
            f"{path}: payload is {len(data)} bytes, expected {expected} "
            f"for n={n}, d={d}"
        )
    offset = _HEADER.size
    features = np.frombuffer(data, dtype="<f4", count=n * d, offset=offset).reshape(n, d)
    offset += n * d * 4
    labels = np.frombuffer(data, dtype="<i4", count=n, offset=offset)
    offset += n * 4
    ids = np.frombuffer(data, dtype="<u8", count=n, offset=offset)
    return EmbeddingSet(features=features, labels=labels, ids=ids, num_classes=num_classes)


def target_from_row(dataset: EmbeddingSet, index: int) -> TargetSample:
    """View one store row as an evaluation target."""
    if not 0 <= index < dataset.n:
        raise ValueError(f"row {index} out of range [0, {dataset.n})")
    return TargetSample(
        feature=dataset.features[index],
        label=int(dataset.labels[index]),
        id=int(dataset.ids[index]),
    )


def iter_targets(dataset: EmbeddingSet) -> list[TargetSample]:
    """All rows of a store as evaluation targets, in row order."""
    return [target_from_row(dataset, i) for i in range(dataset.n)]


def unit_normalized(dataset: EmbeddingSet) -> EmbeddingSet:
    """Copy of the set with every feature row scaled to unit L2 norm.

    Zero-norm rows are left unchanged (they carry no direction).
    """
    norms = np.linalg.norm(dataset.features.astype(np.float64), axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    features = (dataset.features / norms).astype(np.float32)
    return EmbeddingSet(
        features=features,
        labels=dataset.labels,
        ids=dataset.ids,
        num_classes=dataset.num_classes,
    )
