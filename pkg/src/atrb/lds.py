"""Linear datamodeling score: rank-correlating additive score predictions
against margins of models actually retrained on random subsets.

For each of m random alpha-fraction subsets, a model is retrained and its
correct-class margin at the target recorded; the attribution scores
predict that margin as the sum of scores inside the subset. The score is
the Spearman correlation between the two length-m sequences.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from joblib import Parallel, delayed

from .attribution import DegenerateInputWarning, ScoreVector
from .oracle import ModKind, Modification, TrainConfig, derive_seed, margin, train
from .store import EmbeddingSet, TargetSample


@dataclass(frozen=True, eq=False)
class SubsetMask:
    """Indicator vector of one random training subset."""

    mask: np.ndarray
    alpha: float
    subset_seed: int

    def __post_init__(self):
        mask = np.array(self.mask, dtype=bool, order="C").ravel()
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        expected = int(np.floor(self.alpha * mask.size))
        if int(mask.sum()) != expected:
            raise ValueError(
                f"mask has {int(mask.sum())} selected rows, expected floor(alpha*n)={expected}"
            )
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)

    @property
    def n(self) -> int:
        return self.mask.size


@dataclass(frozen=True)
class LdsResult:
    per_target_rho: tuple[float, ...]
    mean_rho: float
    m: int
    alpha: float


def sample_subsets(n: int, alpha: float, m: int, seed: int) -> list[SubsetMask]:
    """m independent uniform subsets of size floor(alpha * n); may overlap."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if m < 2:
        raise ValueError("m must be >= 2")
    size = int(np.floor(alpha * n))
    if size == 0 or size == n:
        raise ValueError(f"floor(alpha*n)={size} leaves nothing to vary (n={n})")
    rng = np.random.default_rng(seed)
    masks = []
    for j in range(m):
        mask = np.zeros(n, dtype=bool)
        mask[rng.choice(n, size=size, replace=False)] = True
        masks.append(SubsetMask(mask=mask, alpha=alpha, subset_seed=derive_seed(seed, j)))
    return masks


def _margins_for_mask(dataset, mask: SubsetMask, targets, cfg, index, trainer):
    dropped = np.flatnonzero(~mask.mask)
    mod = Modification(kind=ModKind.REMOVE, indices=dropped)
    # Seeds come from the mask's own seed, not its position, so duplicated
    # masks reproduce identical margin columns.
    model_cfg = replace(cfg, seed=derive_seed(cfg.seed, mask.subset_seed))
    try:
        model = (trainer or train)(dataset, mod, model_cfg)
    except Exception as exc:
        raise RuntimeError(f"training on subset {index} failed: {exc}") from exc
    return np.array([margin(model, t) for t in targets])


def subset_margins(
    dataset: EmbeddingSet,
    masks: Sequence[SubsetMask],
    targets: Sequence[TargetSample],
    cfg: TrainConfig,
    n_jobs: int = 1,
    trainer=None,
) -> np.ndarray:
    """(targets x m) matrix of retrained correct-class margins.

    One model is trained per mask and evaluated at every target;
    ``trainer`` may substitute a heavier oracle.
    """
    if not masks:
        raise ValueError("need at least one subset mask")
    for mask in masks:
        if mask.n != dataset.n:
            raise ValueError(f"mask length {mask.n} does not match set n={dataset.n}")
    columns = Parallel(n_jobs=n_jobs)(
        delayed(_margins_for_mask)(dataset, mask, targets, cfg, j, trainer)
        for j, mask in enumerate(masks)
    )
    return np.stack(columns, axis=1)


def _fractional_ranks(values: np.ndarray) -> np.ndarray:
    """Average ranks in 1..m; tied values share the mean of their positions."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(a, b) -> float:
    """Rank correlation with average-rank tie handling.

    Either sequence having zero rank variance is degenerate and yields 0
    with a warning rather than an error: it happens legitimately when a
    subset makes a target unlearnable.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise ValueError("need at least two observations")
    ranks_a = _fractional_ranks(a)
    ranks_b = _fractional_ranks(b)
    if (ranks_a == ranks_a[0]).all() or (ranks_b == ranks_b[0]).all():
        warnings.warn("constant input: rank correlation set to 0", DegenerateInputWarning)
        return 0.0
    # Identical or exactly reversed rankings are +-1 by definition; the
    # early return keeps those cases exact instead of within rounding.
    if np.array_equal(ranks_a, ranks_b):
        return 1.0
    if np.array_equal(ranks_a, a.size + 1.0 - ranks_b):
        return -1.0
    da = ranks_a - ranks_a.mean()
    db = ranks_b - ranks_b.mean()
    rho = float((da @ db) / np.sqrt((da @ da) * (db @ db)))
    return float(np.clip(rho, -1.0, 1.0))


def lds_score(tau: ScoreVector, margins_row, masks: Sequence[SubsetMask]) -> float:
    """Spearman correlation of retrained margins against additive predictions."""
    margins_row = np.asarray(margins_row, dtype=np.float64).ravel()
    if len(masks) != margins_row.size:
        raise ValueError(f"{len(masks)} masks but {margins_row.size} margins")
    if len(masks) < 2:
        raise ValueError("need at least two subsets")
    for mask in masks:
        if mask.n != tau.n:
            raise ValueError(f"mask length {mask.n} does not match score length {tau.n}")
    if not np.isfinite(tau.scores).all():
        raise ValueError("scores with exclusion sentinels cannot form additive predictions")
    indicator = np.stack([mask.mask for mask in masks]).astype(np.float64)
    predicted = indicator @ tau.scores
    return spearman(margins_row, predicted)


def evaluate_lds(
    dataset: EmbeddingSet,
    targets: Sequence[TargetSample],
    taus: Sequence[ScoreVector],
    cfg: TrainConfig,
    alpha: float = 0.5,
    m: int = 64,
    seed: int = 0,
    n_jobs: int = 1,
    trainer=None,
) -> LdsResult:
    """Sample fresh subsets, retrain once per subset, score every target."""
    if len(targets) != len(taus):
        raise ValueError("need exactly one score vector per target")
    masks = sample_subsets(dataset.n, alpha, m, seed)
    margins_matrix = subset_margins(dataset, masks, targets, cfg, n_jobs=n_jobs, trainer=trainer)
    rhos = tuple(
        lds_score(tau, margins_matrix[t], masks) for t, tau in enumerate(taus)
    )
    return LdsResult(
        per_target_rho=rhos, mean_rho=float(np.mean(rhos)), m=m, alpha=alpha
    )


def write_lds_csv(path, targets: Sequence[TargetSample], result: LdsResult,
                  comment: str | None = None) -> None:
    """Per-target rho rows plus a final mean summary line."""
    if len(targets) != len(result.per_target_rho):
        raise ValueError("target list does not match the result")
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh)
        writer.writerow(["target_id", "rho"])
        for target, rho in zip(targets, result.per_target_rho):
            writer.writerow([target.id, repr(rho)])
        writer.writerow(["mean", repr(result.mean_rho)])


def write_masks_binary(path, masks: Sequence[SubsetMask]) -> None:
    """Audit export: bit-packed masks prefixed by u64 counts (m, n)."""
    if not masks:
        raise ValueError("no masks to write")
    n = masks[0].n
    packed = [np.packbits(mask.mask).tobytes() for mask in masks]
    with open(path, "wb") as fh:
        fh.write(np.array([len(masks), n], dtype="<u8").tobytes())
        for chunk in packed:
            fh.write(chunk)
