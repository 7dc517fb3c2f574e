import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from maglab.geometry import (AnchorSet, GeometryError, PhaseState, as_configuration, as_permutation,
                             compose, cost_matrix, inner, inverse, norm, permute_anchors)


def naive_sum_squares(x):
    total = 0.0
    for row in x:
        for comp in row:
            total += comp * comp
    return total


def test_norm_examples():
    assert norm(as_configuration([[3.0]])) == 3.0
    assert norm(as_configuration([[3.0, 0.0], [0.0, 4.0]])) == 5.0


def test_norm_matches_naive_loop():
    x = np.random.default_rng(7).normal(size=(6, 3))
    assert norm(x) == pytest.approx(math.sqrt(naive_sum_squares(x)), rel=1e-15)


def test_inner_examples():
    assert inner([[1.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [0.0, 1.0]]) == 0.0
    x = [[3.0, 0.0], [0.0, 4.0]]
    assert inner(x, x) == 25.0


def test_inner_matches_naive_loop():
    rng = np.random.default_rng(11)
    x, y = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
    naive = sum(x[a, k] * y[a, k] for a in range(5) for k in range(2))
    assert inner(x, y) == pytest.approx(naive, rel=1e-14)
    assert norm(x) ** 2 == pytest.approx(inner(x, x), rel=1e-15)


def test_inner_dimension_mismatch():
    with pytest.raises(GeometryError):
        inner(np.zeros((2, 2)), np.zeros((3, 2)))


def test_configuration_rejects_nonfinite():
    with pytest.raises(GeometryError):
        as_configuration([[np.nan, 0.0]])
    with pytest.raises(GeometryError):
        as_configuration([[np.inf]])


def test_permutation_rejects_repeats():
    with pytest.raises(GeometryError):
        as_permutation([0, 0, 2])
    with pytest.raises(GeometryError):
        as_permutation([0, 3, 1])
    assert as_permutation([2, 0, 1]).tolist() == [2, 0, 1]


def test_permutation_algebra():
    p = as_permutation([2, 0, 3, 1])
    assert compose(p, inverse(p)).tolist() == [0, 1, 2, 3]


def test_anchor_set_radius_and_distinctness():
    A = AnchorSet([[3.0, 4.0], [1.0, 0.0]])
    assert A.radius == 5.0
    with pytest.raises(GeometryError):
        AnchorSet([[1.0, 1.0], [1.0, 1.0]])


def test_phase_state_shapes_must_agree():
    with pytest.raises(GeometryError):
        PhaseState(np.zeros((2, 2)), np.zeros((3, 2)))


def test_permute_anchors_examples():
    A = AnchorSet([[0.0], [1.0]])
    assert permute_anchors(A, [0, 1]).ravel().tolist() == [0.0, 1.0]
    assert permute_anchors(A, [1, 0]).ravel().tolist() == [1.0, 0.0]


def test_permute_anchors_norm_invariant():
    rng = np.random.default_rng(1)
    A = AnchorSet(rng.normal(size=(7, 3)))
    ref = norm(permute_anchors(A, np.arange(7)))
    for _ in range(100):
        assert norm(permute_anchors(A, rng.permutation(7))) == pytest.approx(ref, rel=1e-15)


def test_cost_matrix_examples():
    A = AnchorSet([[0.0], [1.0]])
    np.testing.assert_array_equal(cost_matrix([[0.0], [2.0]], A), [[0.0, 1.0], [4.0, 1.0]])
    B = AnchorSet(np.random.default_rng(2).normal(size=(4, 2)))
    assert np.all(np.diag(cost_matrix(B.points, B)) == 0.0)


def test_cost_matrix_matches_loop():
    rng = np.random.default_rng(3)
    A = AnchorSet(rng.normal(size=(5, 3)))
    x = rng.normal(size=(5, 3))
    c = cost_matrix(x, A)
    for a in range(5):
        for b in range(5):
            assert c[a, b] == pytest.approx(sum((x[a, k] - A.points[b, k]) ** 2 for k in range(3)), rel=1e-14)
    assert np.all(c >= 0)


# squared norms underflow below ~1e-154
finite = st.floats(-1e3, 1e3, allow_nan=False).filter(lambda v: v == 0 or abs(v) > 1e-100)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (4, 2), elements=finite), arrays(np.float64, (4, 2), elements=finite))
def test_cauchy_schwarz(x, y):
    assert abs(inner(x, y)) <= norm(x) * norm(y) * (1 + 1e-12) + 1e-300
