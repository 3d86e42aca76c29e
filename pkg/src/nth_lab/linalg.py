"""Dense float64 linear algebra used throughout the lab.

Matrices and vectors are plain ``numpy`` arrays of dtype float64.  The
routines here add the pieces numpy does not hand us in the form we need:
a deterministic power-iteration spectral norm, the 2->inf norm, a cyclic
Jacobi eigensolver for small symmetric Gram matrices, and seeded Gaussian
sampling.
"""

from __future__ import annotations

import numpy as np

SYMMETRY_RTOL = 1e-12
PSD_ATOL = 1e-12


class DimensionError(ValueError):
    """Operand shapes do not line up."""


class AsymmetryError(ValueError):
    """A symmetric routine received a matrix that is not symmetric."""

    def __init__(self, max_asymmetry: float):
        super().__init__(f"matrix is not symmetric: max |A - A^T| = {max_asymmetry:.3e}")
        self.max_asymmetry = max_asymmetry


class ConvergenceError(RuntimeError):
    """An iterative routine ran out of iterations."""

    def __init__(self, message: str, estimate: float, vector: np.ndarray, residual: float):
        super().__init__(f"{message} (estimate={estimate:.17g}, residual={residual:.3e})")
        self.estimate = estimate
        self.vector = vector
        self.residual = residual


class NotPSDError(ValueError):
    """A matrix expected to be positive semi-definite is not."""


def _as_float_array(a, ndim: int, name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != ndim:
        raise DimensionError(f"{name} must be {ndim}-d, got shape {arr.shape}")
    return arr


def _check_finite(a: np.ndarray, name: str = "input") -> None:
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")


# -- plumbing -----------------------------------------------------------------


def matvec(A, v) -> np.ndarray:
    A = _as_float_array(A, 2, "A")
    v = _as_float_array(v, 1, "v")
    if A.shape[1] != v.shape[0]:
        raise DimensionError(f"matvec shape mismatch: A is {A.shape}, v is {v.shape}")
    return A @ v


def matmul(A, B) -> np.ndarray:
    A = _as_float_array(A, 2, "A")
    B = _as_float_array(B, 2, "B")
    if A.shape[1] != B.shape[0]:
        raise DimensionError(f"matmul shape mismatch: A is {A.shape}, B is {B.shape}")
    return A @ B


def dot(u, v) -> float:
    u = _as_float_array(u, 1, "u")
    v = _as_float_array(v, 1, "v")
    if u.shape != v.shape:
        raise DimensionError(f"dot shape mismatch: {u.shape} vs {v.shape}")
    return float(u @ v)


def axpy(alpha: float, x, y) -> np.ndarray:
    """Return ``alpha * x + y`` (new array)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"axpy shape mismatch: {x.shape} vs {y.shape}")
    return alpha * x + y


def frobenius_norm(A) -> float:
    return float(np.sqrt(np.sum(np.square(np.asarray(A, dtype=np.float64)))))


def vector_inf_norm(v) -> float:
    v = np.asarray(v, dtype=np.float64)
    return float(np.max(np.abs(v))) if v.size else 0.0


def symmetrize(A) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    return 0.5 * (A + A.T)


# -- norms --------------------------------------------------------------------


def _power_iterate(A: np.ndarray, v: np.ndarray, tol: float, max_iter: int):
    sigma_sq = 0.0
    change = np.inf
    for _ in range(max_iter):
        w = A.T @ (A @ v)
        new = float(np.linalg.norm(w))
        if new == 0.0:
            return 0.0, v, 0.0, True
        change = abs(new - sigma_sq) / new
        v = w / new
        sigma_sq = new
        if change <= tol:
            return sigma_sq, v, change, True
    return sigma_sq, v, change, False


def spectral_norm(A, tol: float = 1e-10, max_iter: int = 20000) -> float:
    """Operator 2-norm by power iteration on ``A^T A``.

    The start vector is the normalised all-ones vector.  If it happens to lie in
    the null space of a non-zero ``A`` (the iteration stalls at zero), one retry
    is made from a fixed deterministic perturbation of it.
    """
    A = _as_float_array(A, 2, "A")
    _check_finite(A, "A")
    if tol <= 0:
        raise ValueError("tol must be positive")
    n = A.shape[1]
    if A.size == 0 or not np.any(A):
        return 0.0

    starts = [np.full(n, 1.0 / np.sqrt(n))]
    bump = np.cos(np.arange(1, n + 1) * 1.618033988749895)
    starts.append((starts[0] + bump) / np.linalg.norm(starts[0] + bump))

    for v0 in starts:
        sigma_sq, v, change, converged = _power_iterate(A, v0, tol, max_iter)
        if sigma_sq == 0.0:
            continue
        if not converged:
            raise ConvergenceError(
                f"power iteration did not converge in {max_iter} iterations",
                estimate=float(np.sqrt(sigma_sq)),
                vector=v,
                residual=change,
            )
        return float(np.sqrt(sigma_sq))
    # A is non-zero but both starts were annihilated: fall back to its largest row.
    return float(np.max(np.linalg.norm(A, axis=1)))


def two_to_infinity_norm(A) -> float:
    """max_i ||A[i, :]||_2, i.e. sup over unit x of ||A x||_inf."""
    A = _as_float_array(A, 2, "A")
    _check_finite(A, "A")
    if A.size == 0:
        return 0.0
    return float(np.max(np.sqrt(np.sum(A * A, axis=1))))


# -- symmetric eigenproblems ----------------------------------------------------


def check_symmetric(A, rtol: float = SYMMETRY_RTOL) -> np.ndarray:
    """Validate symmetry and return the symmetrised copy ``(A + A^T)/2``."""
    A = _as_float_array(A, 2, "A")
    if A.shape[0] != A.shape[1]:
        raise DimensionError(f"expected a square matrix, got {A.shape}")
    _check_finite(A, "A")
    asym = float(np.max(np.abs(A - A.T))) if A.size else 0.0
    scale = max(1.0, float(np.max(np.abs(A)))) if A.size else 1.0
    if asym > rtol * scale:
        raise AsymmetryError(asym)
    return symmetrize(A)


def _off_norm(A: np.ndarray) -> float:
    off = A - np.diag(np.diag(A))
    return float(np.sqrt(np.sum(off * off)))


def jacobi_eigh(A, tol: float = 1e-14, max_sweeps: int = 100):
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Sweeps until the off-diagonal Frobenius mass is at most ``tol * ||A||_F``.
    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues ascending and
    eigenvectors as columns.
    """
    A = check_symmetric(A).copy()
    n = A.shape[0]
    V = np.eye(n)
    target = tol * max(frobenius_norm(A), np.finfo(float).tiny)
    for _ in range(max_sweeps):
        if _off_norm(A) <= target:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                diff = A[q, q] - A[p, p]
                if abs(diff) > 1e150 * abs(apq):
                    t = apq / diff  # tau would overflow; t ~ 1 / (2 tau)
                else:
                    tau = diff / (2.0 * apq)
                    t = np.copysign(1.0, tau) / (abs(tau) + np.hypot(1.0, tau))
                c = 1.0 / np.hypot(1.0, t)
                s = t * c
                rp, rq = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * rp - s * rq
                A[q, :] = s * rp + c * rq
                cp, cq = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * cp - s * cq
                A[:, q] = s * cp + c * cq
                A[p, q] = A[q, p] = 0.0
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    else:
        off = _off_norm(A)
        if off > target:
            raise ConvergenceError(
                f"Jacobi did not converge in {max_sweeps} sweeps",
                estimate=float(np.min(np.diag(A))),
                vector=np.diag(A).copy(),
                residual=off,
            )
    w = np.diag(A).copy()
    order = np.argsort(w, kind="stable")
    return w[order], V[:, order]


def sym_eig_min(A, tol: float = 1e-14) -> float:
    """Smallest eigenvalue of a symmetric matrix (cyclic Jacobi)."""
    w, _ = jacobi_eigh(A, tol=tol)
    return float(w[0])


def cholesky_2x2(A, atol: float = PSD_ATOL) -> np.ndarray:
    """Lower Cholesky factor of a 2x2 PSD matrix; tiny negative pivots clamp to 0."""
    A = check_symmetric(A)
    if A.shape != (2, 2):
        raise DimensionError(f"expected 2x2, got {A.shape}")
    a, b, c = A[0, 0], A[0, 1], A[1, 1]
    if a < -atol or c < -atol:
        raise NotPSDError(f"negative diagonal in {A.tolist()}")
    l11 = np.sqrt(max(a, 0.0))
    l21 = b / l11 if l11 > 0 else 0.0
    if l11 == 0.0 and abs(b) > atol:
        raise NotPSDError(f"zero variance with non-zero covariance in {A.tolist()}")
    rem = c - l21 * l21
    if rem < -atol * max(1.0, abs(c)):
        raise NotPSDError(f"matrix is not PSD: Schur complement {rem:.3e}")
    return np.array([[l11, 0.0], [l21, np.sqrt(max(rem, 0.0))]])


# -- sampling ------------------------------------------------------------------


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; identical seed gives identical streams."""
    return np.random.Generator(np.random.Philox(int(seed)))


def gaussian_matrix(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal((rows, cols))


def gaussian_vector(length: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal(length)
