"""Attribution scores: one value per training sample for a given target.

All methods share one convention: higher score means more positive
influence, so distances are negated. Ties anywhere are broken toward the
lower training index, which keeps rankings (and everything downstream of
them) reproducible.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .esvm import EsvmParams, decision_values, train_exemplar
from .oracle import Model
from .store import EmbeddingSet, TargetSample, class_indices

# Sentinel for candidates excluded from ranking by construction
# (e.g. other-class rows under the exemplar-SVM method).
EXCLUDED_SCORE = float("-inf")


class Method(str, Enum):
    L2 = "l2"
    COSINE = "cosine"
    ESVM = "esvm"
    GRADCOS = "gradcos"
    SIGNED_SPARSE_L2 = "signed-sparse"


class CandidateFilter(str, Enum):
    SAME_CLASS = "same-class"
    ALL = "all"


class DegenerateInputWarning(UserWarning):
    """Raised as a warning when an input forces a defined fallback score."""


@dataclass(frozen=True, eq=False)
class ScoreVector:
    """Length-n attribution scores for one target.

    Scores are finite except for the -inf exclusion sentinel; NaN and +inf
    are rejected.
    """

    scores: np.ndarray
    method: Method
    target_id: int

    def __post_init__(self):
        scores = np.array(self.scores, dtype=np.float64, order="C").ravel()
        if np.isnan(scores).any() or (scores == np.inf).any():
            raise ValueError("scores must not contain NaN or +Inf")
        scores.setflags(write=False)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "method", Method(self.method))

    @property
    def n(self) -> int:
        return self.scores.shape[0]


@dataclass(frozen=True, eq=False)
class RankedIndices:
    """Top-k training indices in decreasing order of positive influence."""

    indices: np.ndarray
    k: int
    filter: CandidateFilter

    def __post_init__(self):
        idx = np.array(self.indices, dtype=np.int64, order="C").ravel()
        if np.unique(idx).size != idx.size:
            raise ValueError("ranked indices must be distinct")
        if self.k != idx.size:
            raise ValueError(f"k={self.k} must equal the number of indices ({idx.size})")
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "filter", CandidateFilter(self.filter))


def _check_dims(dataset: EmbeddingSet, target: TargetSample) -> None:
    if target.feature.size != dataset.d:
        raise ValueError(
            f"dimension mismatch: target has d={target.feature.size}, set has d={dataset.d}"
        )


def l2_scores(dataset: EmbeddingSet, target: TargetSample) -> ScoreVector:
    """Negated Euclidean distance, so an exact duplicate scores 0 (the max)."""
    _check_dims(dataset, target)
    diff = dataset.features.astype(np.float64) - target.feature.astype(np.float64)
    dist = np.sqrt((diff * diff).sum(axis=1))
    return ScoreVector(scores=-dist, method=Method.L2, target_id=target.id)


def cosine_scores(dataset: EmbeddingSet, target: TargetSample) -> ScoreVector:
    """Cosine similarity in [-1, 1]; zero-norm vectors score -1 with a warning."""
    _check_dims(dataset, target)
    rows = dataset.features.astype(np.float64)
    x = target.feature.astype(np.float64)
    row_norms = np.linalg.norm(rows, axis=1)
    x_norm = np.linalg.norm(x)
    degenerate_rows = row_norms == 0.0
    if x_norm == 0.0:
        warnings.warn("zero-norm target: all cosine scores set to -1", DegenerateInputWarning)
        scores = np.full(dataset.n, -1.0)
    else:
        safe = np.where(degenerate_rows, 1.0, row_norms)
        scores = (rows @ x) / (safe * x_norm)
        if degenerate_rows.any():
            warnings.warn(
                f"{int(degenerate_rows.sum())} zero-norm training row(s) scored -1",
                DegenerateInputWarning,
            )
            scores[degenerate_rows] = -1.0
    return ScoreVector(scores=scores, method=Method.COSINE, target_id=target.id)


def esvm_scores(
    dataset: EmbeddingSet, target: TargetSample, params: EsvmParams = EsvmParams()
) -> ScoreVector:
    """Decision values of an exemplar SVM trained with the target as the one
    positive and every same-class training sample as a negative.

    Other-class rows get the -inf exclusion sentinel; they are never
    candidates for this method.
    """
    _check_dims(dataset, target)
    if not 0 <= target.label < dataset.num_classes:
        raise ValueError(f"target label {target.label} out of range [0, {dataset.num_classes})")
    same = class_indices(dataset, target.label)
    if same.size == 0:
        raise ValueError(f"no training samples of class {target.label}: cannot train an exemplar")
    hyperplane = train_exemplar(target.feature, dataset.features[same], params)
    scores = np.full(dataset.n, EXCLUDED_SCORE)
    scores[same] = decision_values(hyperplane, dataset, same)
    return ScoreVector(scores=scores, method=Method.ESVM, target_id=target.id)


def gradcos_scores(model: Model, dataset: EmbeddingSet, target: TargetSample) -> ScoreVector:
    """Cosine between per-sample loss gradients at the trained parameters.

    The gradient of the cross-entropy loss w.r.t. all parameters (W, b)
    factors as outer(p - e_y, x) for W plus (p - e_y) for b, so the inner
    product of two sample gradients is (g_a . g_b) * (1 + x_a . x_b) with
    g = p - e_y. That identity lets the whole score vector be computed
    without materializing n x (num_classes * d) gradients.

    No same-class filter applies downstream: the method already favors
    same-class samples on its own.
    """
    _check_dims(dataset, target)
    if model.d != dataset.d or model.num_classes != dataset.num_classes:
        raise ValueError("model shape does not match the embedding set")
    if not 0 <= target.label < model.num_classes:
        raise ValueError(f"target label {target.label} out of range [0, {model.num_classes})")
    X = dataset.features.astype(np.float64)
    x_t = target.feature.astype(np.float64)

    logits = X @ model.weights.T + model.bias
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    g_rows = probs
    g_rows[np.arange(dataset.n), dataset.labels] -= 1.0

    t_logits = model.weights @ x_t + model.bias
    t_logits -= t_logits.max()
    g_t = np.exp(t_logits)
    g_t /= g_t.sum()
    g_t[target.label] -= 1.0

    feat_term = 1.0 + X @ x_t
    feat_sq = 1.0 + (X * X).sum(axis=1)
    t_norm_sq = float(g_t @ g_t) * (1.0 + float(x_t @ x_t))
    row_norm_sq = (g_rows * g_rows).sum(axis=1) * feat_sq

    zero_rows = row_norm_sq == 0.0
    if t_norm_sq == 0.0:
        warnings.warn("zero target gradient: all scores set to -1", DegenerateInputWarning)
        scores = np.full(dataset.n, -1.0)
    else:
        inner = (g_rows @ g_t) * feat_term
        denom = np.sqrt(np.where(zero_rows, 1.0, row_norm_sq) * t_norm_sq)
        scores = inner / denom
        if zero_rows.any():
            warnings.warn(
                f"{int(zero_rows.sum())} zero-gradient training row(s) scored -1",
                DegenerateInputWarning,
            )
            scores[zero_rows] = -1.0
        np.clip(scores, -1.0, 1.0, out=scores)
    return ScoreVector(scores=scores, method=Method.GRADCOS, target_id=target.id)


def rank(
    scores: ScoreVector,
    dataset: EmbeddingSet,
    target: TargetSample,
    candidate_filter: CandidateFilter = CandidateFilter.SAME_CLASS,
    k: int = 1,
) -> RankedIndices:
    """Top-k candidates by descending score, ties toward the lower index.

    Requesting more than the available candidates returns all of them.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if scores.n != dataset.n:
        raise ValueError(f"score vector has length {scores.n}, set has n={dataset.n}")
    candidate_filter = CandidateFilter(candidate_filter)
    if candidate_filter is CandidateFilter.SAME_CLASS:
        candidates = class_indices(dataset, target.label)
    else:
        candidates = np.arange(dataset.n, dtype=np.int64)
    # lexsort uses the last key as primary: descending score, then ascending index.
    order = np.lexsort((candidates, -scores.scores[candidates]))
    top = candidates[order[: min(k, candidates.size)]]
    return RankedIndices(indices=top, k=top.size, filter=candidate_filter)


def signed_sparse_scores(
    dataset: EmbeddingSet,
    target: TargetSample,
    base: ScoreVector,
    keep_fraction: float = 0.05,
) -> ScoreVector:
    """Inverse signed L2 distance, sparsified to the top fraction by magnitude.

    raw_i = s_i / (dist_i + 1e-12) with s_i = +1 when labels match the
    target and -1 otherwise; everything outside the ceil(keep_fraction * n)
    largest |raw| entries is zeroed. This variant keeps negative influence,
    which the ranking-only methods discard.
    """
    if base.method is not Method.L2:
        raise ValueError(f"base scores must come from the l2 method, got {base.method.value}")
    if base.n != dataset.n:
        raise ValueError(f"base score vector has length {base.n}, set has n={dataset.n}")
    if not 0 < keep_fraction <= 1:
        raise ValueError("keep_fraction must lie in (0, 1]")
    dist = -base.scores
    sign = np.where(dataset.labels == target.label, 1.0, -1.0)
    raw = sign / (dist + 1e-12)
    keep = int(np.ceil(keep_fraction * dataset.n))
    order = np.lexsort((np.arange(dataset.n), -np.abs(raw)))
    sparse = np.zeros(dataset.n, dtype=np.float64)
    kept = order[:keep]
    sparse[kept] = raw[kept]
    return ScoreVector(scores=sparse, method=Method.SIGNED_SPARSE_L2, target_id=target.id)


def write_ranking_csv(path, blocks, dataset: EmbeddingSet, comment: str | None = None) -> None:
    """Export rankings as target_id,rank,train_index,train_id,score rows.

    ``blocks`` is an iterable of (target_id, RankedIndices, ScoreVector).
    """
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh)
        writer.writerow(["target_id", "rank", "train_index", "train_id", "score"])
        for target_id, ranked, scores in blocks:
            for position, idx in enumerate(ranked.indices, start=1):
                writer.writerow(
                    [
                        target_id,
                        position,
                        int(idx),
                        int(dataset.ids[idx]),
                        repr(float(scores.scores[idx])),
                    ]
                )
