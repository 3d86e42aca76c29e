import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nth_lab import linalg


def test_matvec_examples():
    np.testing.assert_array_equal(linalg.matvec(np.eye(3), np.array([1.0, 2.0, 3.0])), [1, 2, 3])
    np.testing.assert_array_equal(linalg.matvec(np.zeros((2, 3)), np.array([4.0, 5.0, 6.0])), [0, 0])
    np.testing.assert_array_equal(linalg.matvec(np.array([[1.0, 2.0], [3.0, 4.0]]), np.ones(2)), [3, 7])


def test_matvec_shape_error_names_both_shapes():
    with pytest.raises(linalg.DimensionError, match=r"\(2, 3\).*\(2,\)"):
        linalg.matvec(np.ones((2, 3)), np.ones(2))


def test_plumbing():
    A, B = np.arange(6.0).reshape(2, 3), np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(linalg.matmul(A, B), A @ B)
    assert linalg.dot(np.array([1.0, 2.0]), np.array([3.0, 4.0])) == 11.0
    np.testing.assert_array_equal(linalg.axpy(2.0, np.ones(2), np.array([1.0, 0.0])), [3.0, 2.0])
    assert linalg.frobenius_norm(np.array([[3.0, 4.0]])) == 5.0
    assert linalg.vector_inf_norm(np.array([1.0, -7.0, 2.0])) == 7.0
    with pytest.raises(linalg.DimensionError):
        linalg.matmul(A, A)


def test_spectral_norm_examples():
    assert linalg.spectral_norm(np.eye(5)) == pytest.approx(1.0, rel=1e-10)
    assert linalg.spectral_norm(np.diag([3.0, -5.0])) == pytest.approx(5.0, rel=1e-10)
    assert linalg.spectral_norm(np.zeros((3, 3))) == 0.0


def test_spectral_norm_matches_svd():
    rng = linalg.make_rng(3)
    A = linalg.gaussian_matrix(30, 20, rng)
    assert linalg.spectral_norm(A) == pytest.approx(np.linalg.svd(A, compute_uv=False)[0], rel=1e-9)


def test_spectral_norm_retries_when_start_is_in_kernel():
    # rank one, (1, 2)(1, -1)^T: the all-ones start is in its null space
    A = np.array([[1.0, -1.0], [2.0, -2.0]])
    assert linalg.spectral_norm(A) == pytest.approx(np.sqrt(5.0) * np.sqrt(2.0), rel=1e-10)  # ||u|| ||v||


def test_spectral_norm_nonconvergence_carries_state():
    rng = linalg.make_rng(0)
    A = linalg.gaussian_matrix(50, 50, rng)
    with pytest.raises(linalg.ConvergenceError) as err:
        linalg.spectral_norm(A, tol=1e-15, max_iter=3)
    assert err.value.vector is not None and err.value.residual > 0


def test_gaussian_spectral_norm_bound():
    for seed in range(20):
        W = linalg.gaussian_matrix(256, 256, linalg.make_rng(seed))
        assert linalg.spectral_norm(W, tol=1e-8) / 16.0 <= 3.0


def test_two_to_infinity_examples():
    assert linalg.two_to_infinity_norm(np.eye(4)) == 1.0
    assert linalg.two_to_infinity_norm(np.array([[3.0, 4.0]])) == 5.0


def test_two_to_infinity_gaussian():
    # the max row norm of an m x m Gaussian matrix sits near sqrt(m); the
    # logarithmic sub-Gaussian bound applies to ||W x||_inf for a fixed unit x
    m = 1024
    bound = 3 * np.sqrt(2 * np.log(2 * m))
    x = np.ones(m) / np.sqrt(m)
    for seed in range(20):
        W = linalg.gaussian_matrix(m, m, linalg.make_rng(seed))
        assert linalg.two_to_infinity_norm(W) <= np.sqrt(m) + bound
        assert linalg.vector_inf_norm(W @ x) <= bound


def test_sym_eig_min_examples():
    assert linalg.sym_eig_min(np.diag([2.0, 5.0, 9.0])) == 2.0
    assert linalg.sym_eig_min(np.array([[2.0, 1.0], [1.0, 2.0]])) == pytest.approx(1.0, abs=1e-14)
    v = np.array([1.0, -2.0, 0.5, 3.0])
    assert abs(linalg.sym_eig_min(np.outer(v, v))) <= 1e-12


def test_sym_eig_min_rejects_asymmetric():
    A = np.array([[1.0, 2.0], [2.0 + 1e-6, 1.0]])
    with pytest.raises(linalg.AsymmetryError) as err:
        linalg.sym_eig_min(A)
    assert err.value.max_asymmetry == pytest.approx(1e-6)


def test_jacobi_matches_eigh():
    rng = linalg.make_rng(7)
    B = linalg.gaussian_matrix(12, 12, rng)
    A = B + B.T
    w, V = linalg.jacobi_eigh(A)
    np.testing.assert_allclose(w, np.linalg.eigvalsh(A), atol=1e-12)
    np.testing.assert_allclose(V @ np.diag(w) @ V.T, A, atol=1e-12)


def _orthogonal(n, rng):
    # Gram-Schmidt on Gaussian columns
    Q = np.zeros((n, n))
    for j in range(n):
        v = rng.standard_normal(n)
        v -= Q[:, :j] @ (Q[:, :j].T @ v)
        Q[:, j] = v / np.linalg.norm(v)
    return Q


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(2, 9))
def test_eig_min_of_rotated_diagonal(seed, n):
    rng = linalg.make_rng(seed)
    Q = _orthogonal(n, rng)
    D = rng.uniform(-3, 3, size=n)
    assert linalg.sym_eig_min(linalg.symmetrize(Q @ np.diag(D) @ Q.T)) == pytest.approx(D.min(), abs=1e-10)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), rows=st.integers(1, 12), cols=st.integers(1, 12))
def test_norm_ordering_and_transpose(seed, rows, cols):
    A = linalg.gaussian_matrix(rows, cols, linalg.make_rng(seed))
    fro, spec, two_inf = linalg.frobenius_norm(A), linalg.spectral_norm(A), linalg.two_to_infinity_norm(A)
    assert fro >= spec * (1 - 1e-9) and spec >= two_inf * (1 - 1e-9)
    assert linalg.spectral_norm(A.T) == pytest.approx(spec, rel=1e-8)


def test_cholesky_2x2():
    L = linalg.cholesky_2x2(np.array([[4.0, 2.0], [2.0, 2.0]]))
    np.testing.assert_allclose(L @ L.T, [[4.0, 2.0], [2.0, 2.0]])
    # rank-deficient within tolerance is accepted
    linalg.cholesky_2x2(np.array([[1.0, 1.0], [1.0, 1.0 - 1e-13]]))
    with pytest.raises(linalg.NotPSDError):
        linalg.cholesky_2x2(np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_gaussian_sampling_reproducible_and_moments():
    a = linalg.gaussian_matrix(5, 7, linalg.make_rng(11))
    b = linalg.gaussian_matrix(5, 7, linalg.make_rng(11))
    np.testing.assert_array_equal(a, b)
    x = linalg.gaussian_vector(10**6, linalg.make_rng(5))
    assert abs(x.mean()) <= 4 / np.sqrt(10**6)
    assert abs(x.var() - 1.0) <= 0.01
