import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from laprox.linalg import (
    ParameterError, ShapeError, as_matrix, avg_pool_1d, col_l2_norms, cosine, make_rng, matmul,
    row_l2_norms, softmax_rows,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def naive_matmul(a, b):
    out = [[0.0] * len(b[0]) for _ in a]
    for i in range(len(a)):
        for j in range(len(b[0])):
            out[i][j] = sum(a[i][k] * b[k][j] for k in range(len(b)))
    return out


def naive_pool(v, k):
    half = k // 2
    return [sum(v[max(i - half, 0):i + half + 1]) / len(v[max(i - half, 0):i + half + 1]) for i in range(len(v))]


def test_matmul_examples():
    m = make_rng(0).standard_normal((3, 3))
    assert np.array_equal(matmul(np.eye(3), m), m)
    assert np.array_equal(matmul(as_matrix([[1, 2], [3, 4]]), as_matrix([[5], [6]])), [[17.0], [39.0]])
    assert not matmul(m, np.zeros((3, 2))).any()


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4, 2), elements=finite))
def test_matmul_matches_triple_loop(a, b):
    assert np.allclose(matmul(a, b), naive_matmul(a.tolist(), b.tolist()), rtol=1e-12, atol=1e-9)


@given(arrays(np.float64, (2, 3), elements=finite), arrays(np.float64, (3, 4), elements=finite),
       arrays(np.float64, (4, 2), elements=finite))
def test_matmul_associative(a, b, c):
    left, right = matmul(matmul(a, b), c), matmul(a, matmul(b, c))
    assert np.allclose(left, right, rtol=1e-9, atol=1e-6 * (1 + np.abs(left).max()))


def test_softmax_examples():
    assert np.allclose(softmax_rows([[0.0, 0.0, 0.0]]), [[1 / 3] * 3])
    assert np.allclose(softmax_rows([[0.0, math.log(3)]]), [[0.25, 0.75]])
    assert softmax_rows([[5.0]])[0, 0] == 1.0


def test_softmax_masked_entries_are_zero():
    p = softmax_rows([[0.0, -np.inf, 1.0]])
    assert p[0, 1] == 0.0
    assert p.sum() == pytest.approx(1.0)


def test_softmax_fully_masked_row_raises():
    with pytest.raises(ParameterError):
        softmax_rows([[0.0, 1.0], [-np.inf, -np.inf]])


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 9)), elements=finite))
def test_softmax_rows_sum_to_one(logits):
    p = softmax_rows(logits)
    assert np.all(p >= 0)
    assert np.all(np.abs(p.sum(axis=1) - 1.0) <= 1e-12)


def test_norm_examples():
    assert np.array_equal(col_l2_norms(np.eye(3)), [1, 1, 1])
    assert np.array_equal(row_l2_norms(np.eye(3)), [1, 1, 1])
    assert col_l2_norms(as_matrix([[3], [4]]))[0] == 5.0
    assert row_l2_norms(as_matrix([[3, 4]]))[0] == 5.0
    assert not col_l2_norms(np.zeros((2, 3))).any()
    assert np.array_equal(row_l2_norms(as_matrix([[1, 0], [0, 0], [0, 2]])), [1, 0, 2])


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)), elements=finite))
def test_col_norms_are_row_norms_of_transpose(m):
    assert np.allclose(col_l2_norms(m), row_l2_norms(m.T))
    assert np.all(col_l2_norms(m) >= 0)


def test_pool_examples():
    v = make_rng(1).standard_normal(9)
    assert np.array_equal(avg_pool_1d(v, 1), v)
    assert np.allclose(avg_pool_1d([0.0, 3.0, 0.0], 3), [1.5, 1.0, 1.5])
    assert np.allclose(avg_pool_1d(np.full(10, 2.5), 7), 2.5)


@pytest.mark.parametrize("kernel", [0, 2, 4, -1])
def test_pool_rejects_bad_kernel(kernel):
    with pytest.raises(ParameterError):
        avg_pool_1d([1.0, 2.0], kernel)


@settings(max_examples=60)
@given(st.lists(finite, min_size=1, max_size=20), st.sampled_from([1, 3, 7]))
def test_pool_matches_sliding_window(v, kernel):
    assert np.allclose(avg_pool_1d(v, kernel), naive_pool(v, kernel), atol=1e-9)


def test_rng_reproducible_and_streams_differ():
    a, b = make_rng(3).standard_normal(5), make_rng(3).standard_normal(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(make_rng(3, 0).standard_normal(5), make_rng(3, 1).standard_normal(5))
    with pytest.raises(ParameterError):
        make_rng(-1)


def test_cosine_edges():
    assert cosine([1, 0], [2, 0]) == 1.0
    assert cosine([1, 0], [-1, 0]) == -1.0
    assert cosine([0, 0], [0, 0]) == 1.0
    assert cosine([0, 0], [1, 0]) == 0.0
