"""Sparse matrix helpers and direct/iterative solvers.

Backed by scipy.sparse; this module pins the conventions the rest of the
code relies on: CSR storage with sorted, duplicate-free indices, one-time
factorization with repeated solves, and deterministic assembly from
coordinate triplets.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SingularMatrixError(RuntimeError):
    pass


class NotSymmetricError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    pass


def from_triplets(rows, cols, vals, shape) -> sp.csr_matrix:
    """CSR matrix with duplicates summed; deterministic for fixed input order."""
    A = sp.coo_matrix((vals, (rows, cols)), shape=shape).tocsr()
    A.sum_duplicates()
    A.sort_indices()
    return A


def spmv(A: sp.spmatrix, x: np.ndarray) -> np.ndarray:
    if A.shape[1] != len(x):
        raise ValueError(f"dimension mismatch: {A.shape} @ {len(x)}")
    return A @ x


def symmetry_defect(A: sp.spmatrix) -> float:
    d = A - A.T
    scale = max(abs(A).max(), 1e-300)
    return abs(d).max() / scale if d.nnz else 0.0


class FactorHandle:
    """One-time LU factorization supporting repeated solves."""

    def __init__(self, lu, n: int):
        self._lu = lu
        self.n = n

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.n:
            raise ValueError(f"rhs length {b.shape[0]} != {self.n}")
        return self._lu.solve(b)


def factor_spd(A: sp.spmatrix, sym_tol: float = 1e-12) -> FactorHandle:
    """Factor a symmetric positive definite matrix.

    Uses an LU with diagonal pivoting suppressed so that negative or
    vanishing pivots expose indefiniteness/singularity.
    """
    A = sp.csc_matrix(A)
    if A.shape[0] != A.shape[1]:
        raise ValueError("matrix must be square")
    if symmetry_defect(A) > sym_tol:
        raise NotSymmetricError(f"symmetry defect {symmetry_defect(A):.2e}")
    try:
        lu = spla.splu(A, diag_pivot_thresh=0.0,
                       permc_spec="MMD_AT_PLUS_A",
                       options={"SymmetricMode": True})
    except RuntimeError as exc:
        raise SingularMatrixError(str(exc)) from exc
    d = lu.U.diagonal()
    if np.any(d <= 0):
        raise SingularMatrixError("non-positive pivot: matrix is not positive definite")
    if d.min() <= 1e-14 * d.max():
        raise SingularMatrixError("pivot underflow: matrix is numerically singular")
    return FactorHandle(lu, A.shape[0])


def factor_general(A: sp.spmatrix) -> FactorHandle:
    """Factor a general (possibly indefinite) square matrix."""
    A = sp.csc_matrix(A)
    if A.shape[0] != A.shape[1]:
        raise ValueError("matrix must be square")
    try:
        lu = spla.splu(A)
    except RuntimeError as exc:
        raise SingularMatrixError(str(exc)) from exc
    d = np.abs(lu.U.diagonal())
    if d.min() <= 1e-14 * max(abs(A).max(), 1e-300):
        raise SingularMatrixError("pivot underflow: matrix is numerically singular")
    return FactorHandle(lu, A.shape[0])


class AmgHandle:
    """Multigrid-preconditioned CG for very large SPD systems.

    Drop-in replacement for FactorHandle where the LU fill would not fit in
    memory. Solves to a relative residual so tight that quadrature-level
    comparisons downstream cannot see the iteration error, and warm-starts
    from the previous solution, which suits time stepping.
    """

    def __init__(self, A: sp.spmatrix, tol: float = 1e-12,
                 sym_tol: float = 1e-12):
        import pyamg

        A = sp.csr_matrix(A)
        if A.shape[0] != A.shape[1]:
            raise ValueError("matrix must be square")
        if symmetry_defect(A) > sym_tol:
            raise NotSymmetricError(f"symmetry defect {symmetry_defect(A):.2e}")
        self._A = A
        # the setup phase estimates spectral radii by power iteration seeded
        # from the global numpy RNG; pin it so repeated runs are identical
        state = np.random.get_state()
        np.random.seed(0)
        try:
            self._ml = pyamg.smoothed_aggregation_solver(A,
                                                         symmetry="hermitian")
        finally:
            np.random.set_state(state)
        self._tol = tol
        self.n = A.shape[0]
        self._last: np.ndarray | None = None

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.n:
            raise ValueError(f"rhs length {b.shape[0]} != {self.n}")
        x0 = self._last if self._last is not None else np.zeros(self.n)
        x = self._ml.solve(b, x0=x0, tol=self._tol, accel="cg", maxiter=1000)
        bn = np.linalg.norm(b)
        if bn > 0:
            res = np.linalg.norm(b - self._A @ x) / bn
            if res > 100 * self._tol:
                raise ConvergenceError(
                    f"multigrid CG stalled at relative residual {res:.2e}")
        self._last = x
        return x


def cg(A: sp.spmatrix, b: np.ndarray, tol: float = 1e-10,
       maxit: int = 10000) -> np.ndarray:
    x, info = spla.cg(A, b, rtol=tol, atol=0.0, maxiter=maxit)
    if info != 0:
        raise ConvergenceError(f"CG did not converge within {maxit} iterations")
    return x


def write_matrix_market(path, A: sp.spmatrix) -> None:
    from scipy.io import mmwrite
    mmwrite(str(path), sp.coo_matrix(A))
