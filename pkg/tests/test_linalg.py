import numpy as np
import pytest
import scipy.linalg
from hypothesis import example, given, settings
from hypothesis import strategies as st

from glyforge.linalg import THETA, TOLERANCE, MatrixExpError, matrix_exp, squaring_count


def taylor_oracle(M, terms=40):
    out = np.eye(M.shape[0])
    term = np.eye(M.shape[0])
    for k in range(1, terms):
        term = term @ M / k
        out = out + term
    return out


def test_zero_and_diagonal():
    assert np.array_equal(matrix_exp(np.zeros((4, 4))), np.eye(4))
    d = np.array([-1.0, 0.5, 2.0])
    assert np.allclose(matrix_exp(np.diag(d)), np.diag(np.exp(d)), rtol=1e-14)


def test_nilpotent_closed_form():
    # exp of a strictly upper-triangular 2x2 is I + N
    N = np.array([[0.0, 3.0], [0.0, 0.0]])
    assert np.allclose(matrix_exp(N), [[1.0, 3.0], [0.0, 1.0]], atol=1e-15)


def test_rotation_generator():
    t = 1.3
    M = np.array([[0.0, -t], [t, 0.0]])
    R = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    assert np.allclose(matrix_exp(M), R, atol=1e-14)


def test_matches_scipy_on_large_norms(rng):
    for scale in (0.01, 1.0, 10.0, 60.0):
        M = rng.normal(size=(13, 13)) * scale / 13
        ref = scipy.linalg.expm(M)
        assert np.linalg.norm(matrix_exp(M) - ref) / np.linalg.norm(ref) < 1e-11


def test_batch_matches_single(rng):
    stack = rng.normal(size=(7, 5, 5)) * np.array([0.01, 0.1, 1, 3, 10, 0.5, 2])[:, None, None]
    batched = matrix_exp(stack)
    for i in range(7):
        assert np.array_equal(batched[i], matrix_exp(stack[i]))


def test_squaring_count_brings_norm_under_theta():
    for norm in (0.0, THETA / 2, THETA, 1.0, 37.5, 1e4):
        s = int(squaring_count(norm))
        assert norm / 2**s <= THETA
        if s:
            assert norm / 2 ** (s - 1) > THETA


def test_rejects_bad_input():
    with pytest.raises(ValueError):
        matrix_exp(np.zeros((3, 4)))
    with pytest.raises(ValueError):
        matrix_exp(np.full((2, 2), np.nan))
    with pytest.raises(ValueError):
        matrix_exp(np.zeros((17, 17)))


def test_overflow_raises_with_diagnostics():
    with pytest.raises(MatrixExpError, match="squarings"):
        matrix_exp(np.array([[800.0]]))


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 13), st.floats(0.0, 2.0), st.integers(0, 2**32 - 1))
@example(2, 1.0, 2)
def test_inverse_property(n, norm, seed):
    M = np.random.default_rng(seed).normal(size=(n, n))
    M *= norm / max(np.abs(M).sum(axis=0).max(), 1e-300)
    assert np.allclose(matrix_exp(M) @ matrix_exp(-M), np.eye(n), atol=1e-12)
    # the kernel remainder is below TOLERANCE and each squaring can double it
    s = int(squaring_count(np.abs(M).sum(axis=0).max()))
    ref = taylor_oracle(M)
    assert np.linalg.norm(matrix_exp(M) - ref) / np.linalg.norm(ref) < 2.0**s * TOLERANCE
