import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ssmsens import numerics as nx


def triple_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i][j] = s
    return np.array(out)


def test_matmul_identity_and_hand_value():
    b = np.array([[1.5, -2.0], [3.25, 4.0]])
    assert np.array_equal(nx.matmul(np.eye(2), b), b)
    assert nx.matmul([[1.0, 2.0]], [[3.0], [4.0]]).tolist() == [[11.0]]


def test_matmul_matches_triple_loop(rng):
    a, b = rng.standard_normal((7, 5)), rng.standard_normal((5, 3))
    assert np.abs(nx.matmul(a, b) - triple_loop(a, b)).max() <= 1e-12


def test_matmul_is_exactly_sequential(rng):
    # same accumulation order as the loop oracle, so equality is bitwise
    a, b = rng.standard_normal((4, 9)), rng.standard_normal((9, 6))
    assert np.array_equal(nx.matmul(a, b), triple_loop(a, b))


def test_matmul_batch_rows_independent(rng):
    a, b = rng.standard_normal((3, 6, 5)), rng.standard_normal((5, 4))
    full = nx.matmul(a, b)
    for i in range(3):
        assert np.array_equal(full[i], nx.matmul(a[i], b))
        assert np.array_equal(full[i, 2:3], nx.matmul(a[i, 2:3], b))


def test_matmul_shape_error():
    with pytest.raises(ValueError):
        nx.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_seq_sum_matches_left_fold(rng):
    x = rng.standard_normal(1000)
    acc = 0.0
    for v in x:
        acc += v
    assert nx.seq_sum(x) == acc


def test_softmax_examples():
    assert np.allclose(nx.softmax([0.0, 0.0, 0.0]), [1 / 3] * 3, atol=1e-15)
    assert nx.softmax([4.2]).tolist() == [1.0]


def test_softmax_shift_1000(rng):
    z = rng.standard_normal((6, 10))
    assert np.abs(nx.softmax(z + 1000.0) - nx.softmax(z)).max() <= 1e-12


def test_log_softmax_examples(rng):
    assert np.allclose(nx.log_softmax([0.0, 0.0]), [-math.log(2)] * 2, atol=1e-15)
    z = rng.standard_normal((5, 7))
    assert np.abs(nx.log_softmax(z) - np.log(nx.softmax(z))).max() <= 1e-10
    assert np.abs(nx.log_softmax(z + 37.5) - nx.log_softmax(z)).max() <= 1e-10


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 12)), elements=st.floats(-50, 50)),
    st.floats(-1e3, 1e3),
)
def test_softmax_shift_invariance_property(z, c):
    assert np.abs(nx.softmax(z + c) - nx.softmax(z)).max() <= 1e-12
    p = nx.softmax(z)
    assert np.all(p >= 0) and np.allclose(p.sum(-1), 1.0, atol=1e-12)


def test_silu_softplus_values():
    assert nx.silu([0.0]).tolist() == [0.0]
    assert math.isclose(nx.silu([1.0])[0], 1 / (1 + math.exp(-1)), rel_tol=1e-15)
    assert math.isclose(nx.softplus([0.0])[0], math.log(2), rel_tol=1e-15)
    assert nx.softplus([800.0])[0] == 800.0


def test_rmsnorm_unit_rms(rng):
    x = rng.standard_normal((3, 16)) * 5
    y = nx.rmsnorm(x, np.ones(16), eps=0.0)
    assert np.allclose(np.sqrt((y * y).mean(-1)), 1.0, atol=1e-12)


def test_causal_conv1d_identity_kernel(rng):
    x = rng.standard_normal((9, 3))
    assert np.array_equal(nx.causal_conv1d(x, np.ones((3, 1))), x)


def test_causal_conv1d_hand_taps():
    x = np.array([[1.0], [2.0], [3.0]])
    # tap 1 = current step (weight 10), tap 0 = previous step (weight 1)
    out = nx.causal_conv1d(x, np.array([[1.0, 10.0]]))
    assert out[:, 0].tolist() == [10.0, 21.0, 32.0]


def test_causal_conv1d_is_causal(rng):
    x = rng.standard_normal((12, 4))
    k = rng.standard_normal((4, 3))
    full = nx.causal_conv1d(x, k)
    assert np.array_equal(full[:5], nx.causal_conv1d(x[:5], k))


def test_scan_single_step_base_case(rng):
    x, B, C = rng.standard_normal((1, 2)), rng.standard_normal((1, 3)), rng.standard_normal((1, 3))
    dt = np.full((1, 2), 0.3)
    A = np.full((2, 3), -1e6)
    y = nx.selective_scan(x, A, B, C, dt)
    expect = [(C[0] * (dt[0, d] * B[0] * x[0, d])).sum() for d in range(2)]
    assert np.allclose(y[0], expect, rtol=1e-12)


def test_scan_two_step_unrolled():
    x = np.array([[2.0], [-1.0]])
    A = np.array([[-0.5]])
    B = np.array([[0.7], [1.3]])
    C = np.array([[1.1], [0.4]])
    dt = np.array([[0.2], [0.6]])
    h1 = 0.2 * 0.7 * 2.0
    h2 = math.exp(0.6 * -0.5) * h1 + 0.6 * 1.3 * -1.0
    y = nx.selective_scan(x, A, B, C, dt)
    assert np.allclose(y[:, 0], [1.1 * h1, 0.4 * h2], rtol=0, atol=1e-15)


def test_scan_vanishing_dt(rng):
    x, B, C = rng.standard_normal((6, 2)), rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
    A = -np.ones((2, 3))
    small = nx.selective_scan(x, A, B, C, np.full((6, 2), 1e-12))
    assert np.abs(small).max() < 1e-10


def test_scan_rejects_bad_inputs(rng):
    x, B = np.ones((2, 1)), np.ones((2, 1))
    with pytest.raises(ValueError):
        nx.selective_scan(x, np.array([[0.0]]), B, B, np.ones((2, 1)))
    with pytest.raises(ValueError):
        nx.selective_scan(x, np.array([[-1.0]]), B, B, np.zeros((2, 1)))
    with pytest.raises(ValueError):
        nx.selective_scan(x, np.array([[-1.0]]), B, np.ones((3, 1)), np.ones((2, 1)))


def test_kernels_are_pure(rng):
    x = rng.standard_normal((5, 2))
    A = -np.ones((2, 2))
    B, C, dt = rng.standard_normal((5, 2)), rng.standard_normal((5, 2)), np.full((5, 2), 0.1)
    before = x.copy()
    y1 = nx.selective_scan(x, A, B, C, dt)
    y2 = nx.selective_scan(x, A, B, C, dt)
    assert np.array_equal(y1, y2) and np.array_equal(x, before)
