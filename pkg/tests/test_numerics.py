import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icl_gd.numerics import (
    RngStream,
    SingularMatrixError,
    as_stream,
    check_spd,
    random_orthogonal,
    ridge_solve,
    ridge_solve_batch,
    sample_gaussian_matrix,
    sample_spd,
    spd_inv_sqrt,
    spd_inverse,
    spd_sqrt,
)


def test_stream_reproducible():
    a = RngStream(7, (1, 2)).generator().standard_normal(5)
    b = RngStream(7).split(1).split(2).generator().standard_normal(5)
    np.testing.assert_array_equal(a, b)


def test_split_streams_differ_and_parent_untouched():
    root = RngStream(3)
    first = root.generator().standard_normal(4)
    kids = [root.split(k).generator().standard_normal(4) for k in range(3)]
    assert not np.allclose(kids[0], kids[1])
    assert not np.allclose(kids[0], first)
    np.testing.assert_array_equal(root.generator().standard_normal(4), first)


def test_split_rejects_negative():
    with pytest.raises(ValueError):
        RngStream(0).split(-1)


def test_seed_wraps_to_64_bits():
    assert RngStream(-1).seed == (1 << 64) - 1
    assert as_stream(5) == RngStream(5)


def test_gaussian_matrix_moments():
    m = sample_gaussian_matrix(400, 50, RngStream(1))
    # 4 standard errors at 20000 draws
    assert abs(m.mean()) < 4 / np.sqrt(m.size)
    assert abs(m.var() - 1) < 4 * np.sqrt(2 / m.size)
    with pytest.raises(ValueError):
        sample_gaussian_matrix(0, 3, RngStream(1))


def test_random_orthogonal():
    q = random_orthogonal(6, np.random.default_rng(0))
    np.testing.assert_allclose(q @ q.T, np.eye(6), atol=1e-12)


@given(st.integers(1, 6), st.floats(0.1, 1.0), st.floats(1.0, 10.0), st.integers(0, 2**32))
@settings(max_examples=40, deadline=None)
def test_sample_spd_eigenvalues_in_range(dim, lo, hi, seed):
    m = sample_spd(dim, lo, hi, RngStream(seed))
    lam = check_spd(m)
    assert lam.min() >= lo * (1 - 1e-9)
    assert lam.max() <= hi * (1 + 1e-9)


def test_sample_spd_rejects_bad_range():
    with pytest.raises(ValueError):
        sample_spd(3, 2.0, 1.0, RngStream(0))
    with pytest.raises(ValueError):
        sample_spd(3, 0.0, 1.0, RngStream(0))


def test_check_spd_errors():
    with pytest.raises(ValueError, match="symmetric"):
        check_spd(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(SingularMatrixError):
        check_spd(np.diag([1.0, -1.0]))
    with pytest.raises(SingularMatrixError, match="condition"):
        check_spd(np.diag([1.0, 1e-13]))
    with pytest.raises(ValueError, match="square"):
        check_spd(np.ones((2, 3)))


@given(st.integers(1, 5), st.integers(0, 2**32))
@settings(max_examples=40, deadline=None)
def test_spd_roots_and_inverse(dim, seed):
    m = sample_spd(dim, 0.2, 5.0, RngStream(seed))
    r = spd_sqrt(m)
    np.testing.assert_allclose(r @ r, m, atol=1e-10)
    ri = spd_inv_sqrt(m)
    np.testing.assert_allclose(ri @ m @ ri, np.eye(dim), atol=1e-10)
    np.testing.assert_allclose(spd_inverse(m) @ m, np.eye(dim), atol=1e-10)


@given(st.integers(1, 5), st.integers(1, 12), st.one_of(st.just(0.0), st.floats(1e-3, 3.0)), st.integers(0, 2**32))
@settings(max_examples=50, deadline=None)
def test_ridge_matches_augmented_least_squares(d, n, lam, seed):
    gen = np.random.default_rng(seed)
    X = gen.standard_normal((n, d))
    y = gen.standard_normal(n)
    if lam == 0 and n < d:
        with pytest.raises(SingularMatrixError):
            ridge_solve(X, y, lam)
        return
    # oracle: ordinary least squares on the ridge-augmented system
    Xa = np.vstack([X, np.sqrt(lam) * np.eye(d)])
    ya = np.concatenate([y, np.zeros(d)])
    ref = np.linalg.lstsq(Xa, ya, rcond=None)[0]
    np.testing.assert_allclose(ridge_solve(X, y, lam), ref, rtol=1e-7, atol=1e-9)


def test_ridge_rejects_negative_lambda():
    with pytest.raises(ValueError):
        ridge_solve(np.eye(2), np.ones(2), -1.0)


def test_ridge_batch_matches_loop():
    gen = np.random.default_rng(4)
    X = gen.standard_normal((7, 6, 3))
    y = gen.standard_normal((7, 6))
    reg = sample_spd(3, 0.5, 2.0, RngStream(2))
    out = ridge_solve_batch(X, y, 0.3, reg)
    for b in range(7):
        ref = np.linalg.solve(X[b].T @ X[b] + 0.3 * reg, X[b].T @ y[b])
        np.testing.assert_allclose(out[b], ref, rtol=1e-10)
    np.testing.assert_allclose(ridge_solve_batch(X, y, 0.3)[2], ridge_solve(X[2], y[2], 0.3), rtol=1e-10)


def test_ridge_batch_singular():
    X = np.zeros((2, 3, 2))
    with pytest.raises(SingularMatrixError):
        ridge_solve_batch(X, np.zeros((2, 3)), 0.0)
