"""Exemplar SVM: one positive sample against many same-class negatives.

The solver minimizes

    J(w, b) = 0.5 * ||w||^2
            + c_pos * max(0, 1 - (w . x_pos + b))
            + c_neg * sum_j max(0, 1 + (w . x_neg_j + b))

in two deterministic phases: a dual coordinate-ascent warm start
(maximal-violating-pair updates on the box-constrained dual, which pins
the optimum to roughly machine precision) followed by full-batch
subgradient descent with a decaying step size and a backtracking halving
safeguard. Plain subgradient descent from zero stalls far from the
optimum because the bias direction carries no curvature; the warm start
removes that failure mode while the descent phase keeps the recorded
objective non-increasing on every run. Identical inputs produce
bit-identical hyperplanes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .store import EmbeddingSet

# Descent-phase step-size schedule: eta_t = STEP0 / (1 + t * STEP_DECAY).
STEP0 = 0.1
STEP_DECAY = 0.001
_MAX_BACKTRACKS = 60
_KKT_TOL = 1e-10
_GRAD_REFRESH = 1024


@dataclass(frozen=True)
class EsvmParams:
    """Solver constants. The lone positive is weighted far above each negative."""

    c_pos: float = 0.5
    c_neg: float = 0.01
    max_iters: int = 2000
    tol: float = 1e-8
    seed: int = 0  # reserved; the solver is deterministic and uses no randomness

    def __post_init__(self):
        if not self.c_pos > 0:
            raise ValueError("c_pos must be > 0")
        if not self.c_neg > 0:
            raise ValueError("c_neg must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if self.seed < 0:
            raise ValueError("seed must be a non-negative integer")


@dataclass(frozen=True, eq=False)
class Hyperplane:
    """Decision boundary w . x + b with solver diagnostics."""

    w: np.ndarray
    b: float
    converged: bool
    final_objective: float

    def __post_init__(self):
        w = np.array(self.w, dtype=np.float64, order="C").ravel()
        if not np.isfinite(w).all() or not np.isfinite(self.b):
            raise ValueError("hyperplane parameters must be finite")
        if self.final_objective < 0:
            raise ValueError("objective is a sum of non-negative terms")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)


def _as_instance(positive, negatives) -> tuple[np.ndarray, np.ndarray]:
    pos = np.asarray(positive, dtype=np.float64).ravel()
    neg = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    if neg.shape[0] < 1:
        raise ValueError("need at least one negative sample")
    if neg.shape[1] != pos.size:
        raise ValueError(
            f"dimension mismatch: positive has d={pos.size}, negatives have d={neg.shape[1]}"
        )
    if not (np.isfinite(pos).all() and np.isfinite(neg).all()):
        raise ValueError("inputs contain NaN or Inf")
    return pos, neg


def _objective(w, b, pos, neg, params: EsvmParams) -> float:
    pos_hinge = max(0.0, 1.0 - (pos @ w + b))
    neg_hinge = np.maximum(0.0, 1.0 + (neg @ w + b)).sum()
    return float(0.5 * (w @ w) + params.c_pos * pos_hinge + params.c_neg * neg_hinge)


def _subgradient(w, b, pos, neg, params: EsvmParams):
    gw = w.copy()
    gb = 0.0
    if pos @ w + b < 1.0:
        gw -= params.c_pos * pos
        gb -= params.c_pos
    active = (neg @ w + b) > -1.0
    if active.any():
        gw += params.c_neg * neg[active].sum(axis=0)
        gb += params.c_neg * float(active.sum())
    return gw, gb


def _optimal_bias(score_pos: float, scores_neg: np.ndarray, params: EsvmParams) -> float:
    """Exact minimizer over b of the hinge sums at fixed w.

    The objective is piecewise linear in b with slope -c_pos below the
    positive breakpoint and +c_neg gained at each negative breakpoint;
    the leftmost breakpoint where the running slope turns >= 0 minimizes.
    """
    breaks = np.concatenate([[1.0 - score_pos], -1.0 - scores_neg])
    gains = np.concatenate([[params.c_pos], np.full(scores_neg.size, params.c_neg)])
    order = np.argsort(breaks, kind="stable")
    slope = -params.c_pos
    for idx in order:
        slope += gains[idx]
        if slope >= 0.0:
            return float(breaks[idx])
    return float(breaks[order[-1]])


def _dual_warm_start(pos, neg, params: EsvmParams):
    """Maximal-violating-pair coordinate ascent on the dual box QP.

    Dual: max sum(a) - 0.5 aQa with Q = (y y^T) * (X X^T), 0 <= a_i <= C_i,
    sum(y a) = 0. Each step moves one (i, j) pair along the equality-
    feasible direction by the clipped Newton step; kernel columns are
    formed on demand so no M x M matrix is materialized.
    """
    m = neg.shape[0]
    X = np.vstack([pos[None, :], neg])
    y = np.concatenate([[1.0], -np.ones(m)])
    caps = np.concatenate([[params.c_pos], np.full(m, params.c_neg)])
    diag = (X * X).sum(axis=1)
    alpha = np.zeros(m + 1)
    grad = np.ones(m + 1)
    max_steps = max(200 * (m + 1), params.max_iters)
    for step in range(max_steps):
        if step and step % _GRAD_REFRESH == 0:
            # Incremental updates drift; refresh from scratch periodically.
            grad = 1.0 - y * (X @ (X.T @ (alpha * y)))
        yg = y * grad
        up = ((y > 0) & (alpha < caps)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < caps))
        if not up.any() or not low.any():
            break
        up_idx = np.flatnonzero(up)
        low_idx = np.flatnonzero(low)
        i = up_idx[np.argmax(yg[up_idx])]
        j = low_idx[np.argmin(yg[low_idx])]
        violation = yg[i] - yg[j]
        if violation < _KKT_TOL:
            break
        quad = diag[i] + diag[j] - 2.0 * float(X[i] @ X[j])
        s = violation / max(quad, 1e-12)
        s = min(s, caps[i] - alpha[i] if y[i] > 0 else alpha[i])
        s = min(s, alpha[j] if y[j] > 0 else caps[j] - alpha[j])
        if s <= 0.0:
            break
        alpha[i] += y[i] * s
        alpha[j] -= y[j] * s
        grad -= s * y * (X @ (X[i] - X[j]))
    w = (alpha * y) @ X
    return w


def _solve(pos, neg, params: EsvmParams):
    """Warm start + monotone subgradient descent; returns (w, b, converged, trace)."""
    w = _dual_warm_start(pos, neg, params)
    b = _optimal_bias(float(pos @ w), neg @ w, params)
    obj = _objective(w, b, pos, neg, params)
    trace = [obj]
    converged = False
    for t in range(params.max_iters):
        gw, gb = _subgradient(w, b, pos, neg, params)
        eta = STEP0 / (1.0 + STEP_DECAY * t)
        descended = False
        for _ in range(_MAX_BACKTRACKS):
            w_next = w - eta * gw
            b_next = b - eta * gb
            obj_next = _objective(w_next, b_next, pos, neg, params)
            b_exact = _optimal_bias(float(pos @ w_next), neg @ w_next, params)
            obj_exact = _objective(w_next, b_exact, pos, neg, params)
            if obj_exact < obj_next:
                b_next, obj_next = b_exact, obj_exact
            if obj_next < obj:
                descended = True
                break
            eta *= 0.5
        if not descended:
            # No strictly decreasing step exists at any tried scale: optimal.
            converged = True
            break
        decrease = obj - obj_next
        w, b, obj = w_next, b_next, obj_next
        trace.append(obj)
        if decrease < params.tol:
            converged = True
            break
    return w, b, converged, np.asarray(trace)


def train_exemplar(positive, negatives, params: EsvmParams = EsvmParams()) -> Hyperplane:
    """Fit the exemplar hyperplane for one positive against M negatives."""
    pos, neg = _as_instance(positive, negatives)
    w, b, converged, trace = _solve(pos, neg, params)
    return Hyperplane(w=w, b=float(b), converged=converged, final_objective=float(trace[-1]))


def objective(h: Hyperplane, positive, negatives, params: EsvmParams = EsvmParams()) -> float:
    """Evaluate J(w, b) for an existing hyperplane on an instance."""
    pos, neg = _as_instance(positive, negatives)
    if h.w.size != pos.size:
        raise ValueError(f"dimension mismatch: hyperplane has d={h.w.size}, instance d={pos.size}")
    return _objective(h.w, h.b, pos, neg, params)


def decision_values(h: Hyperplane, dataset: EmbeddingSet, indices) -> np.ndarray:
    """Signed decision values w . x_i + b for the requested rows.

    Higher means more similar to the exemplar. Values are reported
    unnormalized; ranking is invariant to positive scaling of (w, b).
    """
    idx = np.asarray(indices, dtype=np.int64).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= dataset.n):
        raise ValueError(f"index out of range [0, {dataset.n})")
    if h.w.size != dataset.d:
        raise ValueError(f"dimension mismatch: hyperplane has d={h.w.size}, set has d={dataset.d}")
    rows = dataset.features[idx].astype(np.float64)
    return rows @ h.w + h.b
