"""Counterfactual retraining oracle over embedding features.

A deterministic multinomial logistic (softmax) classifier stands in for
"an average training run": it is cheap enough to retrain thousands of
times during support searches. Dataset modifications (removal, mislabel)
are lazy views over the original store, never copied feature matrices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .store import EmbeddingSet, TargetSample

_U64 = (1 << 64) - 1


def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _U64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _U64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _U64
    return z ^ (z >> 31)


def derive_seed(base: int, *parts: int) -> int:
    """Stable 64-bit seed from a base seed and any number of integer parts.

    Concurrent and serial executions that derive seeds the same way train
    identical models, which is what makes sweep results reproducible.
    """
    h = _splitmix64(int(base) & _U64)
    for p in parts:
        h = _splitmix64(h ^ (int(p) & _U64))
    return h


class ModKind(str, Enum):
    REMOVE = "remove"
    MISLABEL = "mislabel"


@dataclass(frozen=True, eq=False)
class Modification:
    """A lazy dataset edit: drop rows, or relabel rows to ``new_label``."""

    kind: ModKind
    indices: np.ndarray
    new_label: int | None = None

    def __post_init__(self):
        idx = np.array(self.indices, dtype=np.int64, order="C").ravel()
        if idx.size and np.unique(idx).size != idx.size:
            raise ValueError("modification indices must be distinct")
        if self.kind is ModKind.MISLABEL and self.new_label is None:
            raise ValueError("mislabel modification requires new_label")
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "kind", ModKind(self.kind))


def _effective_view(dataset: EmbeddingSet, mod: Modification | None):
    """Row indices into the original feature matrix plus the labels to use."""
    if mod is not None and mod.indices.size:
        if mod.indices.min() < 0 or mod.indices.max() >= dataset.n:
            raise ValueError(f"modification index out of range [0, {dataset.n})")
    if mod is None or mod.indices.size == 0:
        return np.arange(dataset.n, dtype=np.int64), dataset.labels
    if mod.kind is ModKind.REMOVE:
        keep = np.ones(dataset.n, dtype=bool)
        keep[mod.indices] = False
        rows = np.flatnonzero(keep)
        return rows, dataset.labels[rows]
    if not 0 <= mod.new_label < dataset.num_classes:
        raise ValueError(f"new_label {mod.new_label} out of range [0, {dataset.num_classes})")
    labels = dataset.labels.copy()
    labels[mod.indices] = mod.new_label
    return np.arange(dataset.n, dtype=np.int64), labels


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    learning_rate: float = 0.1
    weight_decay: float = 1e-4
    batch_size: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be a non-negative integer")


@dataclass(frozen=True, eq=False)
class Model:
    """Trained softmax classifier: logits(x) = weights @ x + bias."""

    weights: np.ndarray
    bias: np.ndarray
    train_seed: int

    def __post_init__(self):
        weights = np.array(self.weights, dtype=np.float64, order="C")
        bias = np.array(self.bias, dtype=np.float64, order="C").ravel()
        if weights.ndim != 2 or bias.size != weights.shape[0]:
            raise ValueError("weights must be (num_classes, d) with a matching bias")
        if not (np.isfinite(weights).all() and np.isfinite(bias).all()):
            raise ValueError("model parameters must be finite")
        weights.setflags(write=False)
        bias.setflags(write=False)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "bias", bias)

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def d(self) -> int:
        return self.weights.shape[1]


def softmax_loss_grad(weights, bias, features, labels, weight_decay: float = 0.0):
    """Mean cross-entropy with L2 penalty on the weights, plus its gradient.

    Returns (loss, grad_weights, grad_bias). The bias is not penalized.
    """
    W = np.asarray(weights, dtype=np.float64)
    b = np.asarray(bias, dtype=np.float64)
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n = X.shape[0]
    logits = X @ W.T + b
    zmax = logits.max(axis=1, keepdims=True)
    shifted = logits - zmax
    expz = np.exp(shifted)
    norm = expz.sum(axis=1, keepdims=True)
    probs = expz / norm
    log_norm = np.log(norm[:, 0]) + zmax[:, 0]
    loss = float(np.mean(log_norm - logits[np.arange(n), y]))
    loss += 0.5 * weight_decay * float((W * W).sum())
    grad = probs
    grad[np.arange(n), y] -= 1.0
    grad /= n
    grad_w = grad.T @ X + weight_decay * W
    grad_b = grad.sum(axis=0)
    return loss, grad_w, grad_b


def train(dataset: EmbeddingSet, mod: Modification | None, cfg: TrainConfig) -> Model:
    """Mini-batch gradient descent with cosine learning-rate decay.

    The seed controls both the weight initialization and per-epoch
    shuffling, so (dataset, mod, cfg) fully determines the model.
    """
    rows, labels = _effective_view(dataset, mod)
    if rows.size == 0:
        raise ValueError("modification leaves an empty training set")
    populated = np.unique(labels)
    if populated.size < 2:
        raise ValueError(
            f"modification leaves {populated.size} populated class(es); need at least 2"
        )
    X = dataset.features[rows].astype(np.float64)
    y = labels
    n, d = X.shape
    num_classes = dataset.num_classes

    rng = np.random.default_rng(cfg.seed)
    W = rng.normal(0.0, 0.01, size=(num_classes, d))
    b = np.zeros(num_classes, dtype=np.float64)
    batch = min(cfg.batch_size, n)
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * epoch / cfg.epochs))
        order = rng.permutation(n)
        for start in range(0, n, batch):
            sel = order[start : start + batch]
            _, grad_w, grad_b = softmax_loss_grad(W, b, X[sel], y[sel], cfg.weight_decay)
            W -= lr * grad_w
            b -= lr * grad_b
    return Model(weights=W, bias=b, train_seed=cfg.seed)


def predict(model: Model, feature) -> tuple[int, np.ndarray]:
    """Logits and argmax label (ties broken toward the lower class id)."""
    x = np.asarray(feature, dtype=np.float64).ravel()
    if x.size != model.d:
        raise ValueError(f"dimension mismatch: model expects d={model.d}, got {x.size}")
    logits = model.weights @ x + model.bias
    return int(np.argmax(logits)), logits


def margin(model: Model, target: TargetSample) -> float:
    """Correct-class logit minus the highest incorrect logit.

    Positive iff the target is strictly correctly classified.
    """
    if not 0 <= target.label < model.num_classes:
        raise ValueError(f"target label {target.label} out of range [0, {model.num_classes})")
    _, logits = predict(model, target.feature)
    correct = logits[target.label]
    others = np.delete(logits, target.label)
    return float(correct - others.max())


def unmodified_models(
    dataset: EmbeddingSet, cfg: TrainConfig, n_test: int, trainer=None
) -> list[Model]:
    """The n_test baseline models (seeds cfg.seed .. cfg.seed+n_test-1).

    They depend only on the unmodified set, so harnesses train them once
    and share them across targets. ``trainer`` may substitute a heavier
    oracle with the same (set, mod, cfg) -> model signature.
    """
    if n_test < 1:
        raise ValueError("n_test must be >= 1")
    trainer = trainer or train
    return [trainer(dataset, None, replace(cfg, seed=cfg.seed + trial)) for trial in range(n_test)]


def highest_incorrect_class(models: list[Model], target: TargetSample) -> int:
    """Argmax over classes != target.label of the model-averaged logits."""
    total = np.zeros(models[0].num_classes, dtype=np.float64)
    for model in models:
        _, logits = predict(model, target.feature)
        total += logits
    total /= len(models)
    total[target.label] = -np.inf
    return int(np.argmax(total))


def mislabel_target_class(
    dataset: EmbeddingSet, target: TargetSample, cfg: TrainConfig, n_test: int
) -> int:
    """Class to relabel toward: highest incorrect logit averaged over
    ``n_test`` unmodified training runs (seeds cfg.seed .. cfg.seed+n_test-1)."""
    if dataset.num_classes < 2:
        raise ValueError("need at least 2 classes")
    return highest_incorrect_class(unmodified_models(dataset, cfg, n_test), target)


def counterfactual_test(
    dataset: EmbeddingSet,
    mod: Modification | None,
    target: TargetSample,
    cfg: TrainConfig,
    n_test: int,
    trainer=None,
) -> float:
    """Fraction of ``n_test`` independent runs on the modified set that
    still classify the target correctly (seeds cfg.seed .. cfg.seed+n_test-1).

    ``trainer`` may substitute a heavier oracle with the same
    (set, mod, cfg) -> model signature.
    """
    if n_test < 1:
        raise ValueError("n_test must be >= 1")
    trainer = trainer or train
    correct = 0
    for trial in range(n_test):
        model = trainer(dataset, mod, replace(cfg, seed=cfg.seed + trial))
        label, _ = predict(model, target.feature)
        if label == target.label:
            correct += 1
    return correct / n_test
