"""Analytic IR extraction from head gradients."""

import numpy as np
import pytest

from gradleak import leakage
from gradleak import tensor as T
from gradleak.leakage import (dedupe_candidates, exclusive_columns,
                              extract_candidate_irs, leakage_rate_oracle,
                              masked_z_gradient, match_candidates)
from gradleak.models import SpabHead
from gradleak.tensor import Tensor


def head_gradients(head, y, labels):
    """Run one backward pass; returns (dw, db, z, zp, dzp)."""
    logits, z, zp = head.forward(Tensor(y))
    T.backward(T.cross_entropy(logits, np.asarray(labels)))
    dw = head.params["w"].grad.copy()
    db = head.params["b"].grad.copy()
    out = dw, db, z.data.copy(), zp.data.copy(), zp.grad.copy()
    for p in head.params.values():
        p.grad = None
    return out


def test_batch_of_one_recovery_is_exact():
    rng = np.random.default_rng(0)
    head = SpabHead(12, 16, 3, rng=rng)
    y = rng.normal(size=(1, 12))
    dw, db, z, zp, dzp = head_gradients(head, y, [1])
    cands = extract_candidate_irs(dw, db)
    assert cands, "a singleton batch must leak"
    for c in cands:
        np.testing.assert_allclose(c.vector, y[0], rtol=1e-10, atol=1e-12)


def test_crafted_single_nonzero_column():
    # dw = Y^T dZ; build dZ with column 2 touched only by row 1
    rng = np.random.default_rng(1)
    y = rng.normal(size=(4, 6))
    dz = rng.normal(size=(4, 5))
    dz[:, 2] = 0.0
    dz[1, 2] = 0.7
    dw = y.T @ dz
    db = dz.sum(axis=0)
    cands = {c.source_column: c for c in extract_candidate_irs(dw, db)}
    np.testing.assert_allclose(cands[2].vector, y[1], rtol=1e-10)


def test_masked_z_gradient_applies_relu_mask():
    z = np.array([[1.0, -1.0], [0.0, 2.0]])
    g = np.ones((2, 2))
    np.testing.assert_array_equal(masked_z_gradient(z, g),
                                  [[1.0, 0.0], [0.0, 1.0]])


def test_exclusive_columns_and_oracle():
    z = np.ones((3, 4))  # all active, mask is a no-op
    dz = np.zeros((3, 4))
    dz[0, 0] = 1.0           # exclusive to row 0
    dz[2, 1] = -0.5          # exclusive to row 2
    dz[:, 2] = 1.0           # shared column
    assert exclusive_columns(z, dz) == [(0, 0), (2, 1)]
    assert leakage_rate_oracle(z, np.maximum(z, 0), dz) == pytest.approx(2 / 3)


def test_tolerance_filters_tiny_bias_gradients():
    dw = np.ones((4, 3))
    db = np.array([1e-12, 1e-3, 0.0])
    cands = extract_candidate_irs(dw, db, tol=1e-9)
    assert [c.source_column for c in cands] == [1]


def test_dedupe_groups_cosine_duplicates():
    base = np.array([1.0, 2.0, 3.0, 4.0])
    cands = extract_candidate_irs(
        np.column_stack([base * 0.5, base * 2.0, np.array([4.0, -3.0, 2.0, -1.0])]),
        np.array([0.5, 2.0, 1.0]))
    merged = dedupe_candidates(cands)
    assert len(merged) == 2
    groups = {c.duplicate_group for c in merged}
    assert len(groups) == 2


def test_end_to_end_recovery_via_oracle_agrees():
    rng = np.random.default_rng(7)
    head = SpabHead(16, 24, 4, rng=rng)
    # spread biases so some ReLUs are off and columns decouple
    head.params["b"].data[:] = rng.normal(0.0, 1.0, 24)
    y = rng.normal(size=(4, 16))
    dw, db, z, zp, dzp = head_gradients(head, y, rng.integers(0, 4, 4))
    rate = leakage_rate_oracle(z, zp, dzp)
    cands = extract_candidate_irs(dw, db)
    matched = match_candidates(cands, y)
    # every row the oracle marks leaked must be recovered
    leaked_rows = {p for p, _ in exclusive_columns(z, dzp)}
    assert leaked_rows <= matched
    assert rate == pytest.approx(len(leaked_rows) / 4)


def test_shape_validation():
    with pytest.raises(ValueError):
        extract_candidate_irs(np.zeros((3, 2)), np.zeros(3))
