"""Exemplar-SVM solver tests.

Two independent oracles check the solver: a slow projected-subgradient
reference run with 100x the iterations (any subgradient method's best
value upper-bounds the optimum, so the implementation must land at or
below it), and an interior-point solve via cvxpy, which pins the optimum
tightly enough for a two-sided comparison.
"""

import numpy as np
import pytest

from atrb.esvm import (
    EsvmParams,
    Hyperplane,
    _as_instance,
    _solve,
    decision_values,
    objective,
    train_exemplar,
)
from atrb.store import EmbeddingSet


def reference_subgradient_solve(positive, negatives, c_pos, c_neg, iters):
    """Slow projected subgradient on J(w, b) with best-point tracking."""
    pos = np.asarray(positive, dtype=np.float64).ravel()
    neg = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    d = pos.size
    X = np.vstack([pos[None, :], neg])
    signs = np.concatenate([[1.0], -np.ones(neg.shape[0])])
    coefs = np.concatenate([[c_pos], np.full(neg.shape[0], c_neg)])
    radius = 100.0 * (1.0 + float(np.abs(X).max()) * np.sqrt(d + 1))

    def value(v):
        slack = 1.0 - signs * (X @ v[:d] + v[d])
        return 0.5 * float(v[:d] @ v[:d]) + float(coefs @ np.maximum(0.0, slack))

    v = np.zeros(d + 1)
    best = value(v)
    best_v = v.copy()
    for t in range(iters):
        active = (signs * (X @ v[:d] + v[d])) < 1.0
        weights = coefs * signs * active
        g = np.concatenate([v[:d] - weights @ X, [-weights.sum()]])
        v = v - (2.0 / (t + 2.0)) * g
        norm = np.linalg.norm(v)
        if norm > radius:
            v *= radius / norm
        obj = value(v)
        if obj < best:
            best = obj
            best_v = v.copy()
    return best_v[:d], float(best_v[d]), best


def cvxpy_objective(positive, negatives, params):
    import cvxpy as cp

    pos = np.asarray(positive, dtype=np.float64).ravel()
    neg = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    w = cp.Variable(pos.size)
    b = cp.Variable()
    objective_expr = (
        0.5 * cp.sum_squares(w)
        + params.c_pos * cp.pos(1 - (pos @ w + b))
        + params.c_neg * cp.sum(cp.pos(1 + (neg @ w + b)))
    )
    problem = cp.Problem(cp.Minimize(objective_expr))
    problem.solve(solver=cp.CLARABEL)
    return float(problem.value)


def random_instance(rng):
    d = int(rng.integers(2, 8))
    m = int(rng.integers(2, 30))
    center = rng.normal(0, 2.0, d)
    pos = center + rng.normal(0, 0.5, d)
    neg = center + rng.normal(0, 0.5, (m, d)) + rng.normal(0, 3.0, d)
    return pos, neg


class TestTrainExemplar:
    def test_separable_sign_case(self):
        params = EsvmParams(c_pos=10.0, c_neg=10.0)
        hp = train_exemplar([1.0], [[-1.0], [-1.0]], params)
        assert hp.w[0] > 0
        pos_value = hp.w[0] * 1.0 + hp.b
        neg_value = hp.w[0] * -1.0 + hp.b
        assert pos_value > neg_value

    def test_positive_duplicated_in_negatives_ties(self):
        # No hyperplane separates identical points: their decision values tie.
        params = EsvmParams()
        pos = np.array([0.3, -0.7])
        neg = np.array([[0.3, -0.7], [1.0, 2.0], [-1.5, 0.4]])
        hp = train_exemplar(pos, neg, params)
        assert hp.converged
        value_pos = float(pos @ hp.w + hp.b)
        value_dup = float(neg[0] @ hp.w + hp.b)
        assert abs(value_pos - value_dup) <= params.tol

    def test_determinism_bit_equal(self):
        rng = np.random.default_rng(5)
        pos, neg = random_instance(rng)
        a = train_exemplar(pos, neg)
        b = train_exemplar(pos, neg)
        assert a.w.tobytes() == b.w.tobytes()
        assert a.b == b.b
        assert a.final_objective == b.final_objective

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            train_exemplar([1.0, 2.0], [[1.0, 2.0, 3.0]])

    def test_nonfinite_input(self):
        with pytest.raises(ValueError):
            train_exemplar([np.nan], [[1.0]])

    def test_monotone_objective_trace(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            pos, neg = random_instance(rng)
            p, n = _as_instance(pos, neg)
            _, _, _, trace = _solve(p, n, EsvmParams())
            assert np.all(np.diff(trace) <= 0)

    def test_matches_interior_point_optimum(self):
        params = EsvmParams()
        rng = np.random.default_rng(17)
        for _ in range(5):
            pos, neg = random_instance(rng)
            hp = train_exemplar(pos, neg, params)
            reference = cvxpy_objective(pos, neg, params)
            assert abs(hp.final_objective - reference) <= 1e-6 * (1 + reference)

    def test_never_above_slow_subgradient_reference(self):
        params = EsvmParams(max_iters=400)
        rng = np.random.default_rng(23)
        for _ in range(5):
            pos, neg = random_instance(rng)
            hp = train_exemplar(pos, neg, params)
            _, _, ref = reference_subgradient_solve(
                pos, neg, params.c_pos, params.c_neg, 100 * params.max_iters
            )
            assert hp.final_objective <= ref + 1e-6 * (1 + ref)


class TestObjective:
    def test_zero_hyperplane_value(self):
        params = EsvmParams(c_pos=0.5, c_neg=0.01)
        h = Hyperplane(w=np.zeros(3), b=0.0, converged=True, final_objective=0.0)
        negatives = np.ones((7, 3))
        # every hinge sits exactly at margin 1
        assert objective(h, np.ones(3), negatives, params) == pytest.approx(
            params.c_pos + params.c_neg * 7
        )

    def test_hand_computed_one_dimensional(self):
        # w=1, b=0, x_pos=2, x_neg=-2: both hinges inactive, J = 0.5 * 1.
        h = Hyperplane(w=np.array([1.0]), b=0.0, converged=True, final_objective=0.0)
        assert objective(h, [2.0], [[-2.0]]) == pytest.approx(0.5)

    def test_final_objective_is_consistent(self):
        rng = np.random.default_rng(29)
        pos, neg = random_instance(rng)
        params = EsvmParams()
        hp = train_exemplar(pos, neg, params)
        assert objective(hp, pos, neg, params) == pytest.approx(
            hp.final_objective, abs=1e-12
        )


class TestDecisionValues:
    def make_set(self, features):
        features = np.asarray(features, dtype=np.float32)
        n = features.shape[0]
        return EmbeddingSet(
            features=features,
            labels=np.zeros(n, dtype=np.int64) if n == 1 else np.arange(n) % 2,
            ids=np.arange(n, dtype=np.uint64),
            num_classes=2,
        )

    def test_zero_hyperplane_gives_zeros(self):
        dataset = self.make_set(np.random.default_rng(0).normal(size=(4, 3)))
        h = Hyperplane(w=np.zeros(3), b=0.0, converged=True, final_objective=0.0)
        assert np.array_equal(decision_values(h, dataset, [0, 1, 2, 3]), np.zeros(4))

    def test_positive_scaling_preserves_order(self):
        rng = np.random.default_rng(31)
        pos, neg = random_instance(rng)
        hp = train_exemplar(pos, neg)
        dataset = self.make_set(neg.astype(np.float32))
        doubled = Hyperplane(
            w=2.0 * hp.w, b=2.0 * hp.b, converged=True, final_objective=0.0
        )
        idx = np.arange(dataset.n)
        base = decision_values(hp, dataset, idx)
        scaled = decision_values(doubled, dataset, idx)
        assert np.array_equal(np.argsort(-base, kind="stable"), np.argsort(-scaled, kind="stable"))

    def test_exemplar_attains_maximum_on_separable_instance(self):
        rng = np.random.default_rng(37)
        pos = rng.normal(0, 0.2, 4) + 5.0
        neg = rng.normal(0, 0.2, (10, 4)) - 5.0
        hp = train_exemplar(pos, neg)
        rows = np.vstack([pos, neg]).astype(np.float32)
        dataset = self.make_set(rows)
        values = decision_values(hp, dataset, np.arange(dataset.n))
        assert int(np.argmax(values)) == 0

    def test_index_out_of_range(self):
        dataset = self.make_set(np.zeros((2, 3), dtype=np.float32))
        h = Hyperplane(w=np.zeros(3), b=0.0, converged=True, final_objective=0.0)
        with pytest.raises(ValueError):
            decision_values(h, dataset, [2])
