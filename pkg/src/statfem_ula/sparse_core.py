"""Sparse and banded linear algebra kernels.

Everything in the package works on :class:`SparseMatrix` (compressed sparse
row, sorted columns) and :class:`BandedCholesky` factors.  Mat-vecs are
delegated to ``scipy.sparse`` and the band factorisation/solves to LAPACK
(``dpbtrf`` / ``dtbtrs``); the CSR container, conjugate gradients and the
power / inverse iteration eigenvalue estimates are implemented here.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Union

import numpy as np
import scipy.sparse as sp
from scipy.linalg import lapack

__all__ = [
    "SparseMatrix",
    "BandedCholesky",
    "EigEstimate",
    "ConvergenceError",
    "NotPositiveDefiniteError",
    "spmv",
    "cg_solve",
    "banded_cholesky",
    "extreme_eigs",
    "max_eig",
    "as_operator",
]


class ConvergenceError(RuntimeError):
    """An iterative method ran out of iterations."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Cholesky met a non-positive pivot."""

    def __init__(self, row):
        super().__init__(f"non-positive pivot at row {row}: matrix is not positive definite")
        self.row = row


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    """CSR matrix with strictly increasing column indices in every row.

    Symmetric matrices are stored in full (both triangles).
    """

    n_rows: int
    n_cols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray
    symmetric: bool = False

    def __post_init__(self):
        offsets = np.asarray(self.row_offsets, dtype=np.int64)
        cols = np.asarray(self.col_indices, dtype=np.int64)
        vals = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "row_offsets", offsets)
        object.__setattr__(self, "col_indices", cols)
        object.__setattr__(self, "values", vals)

        if offsets.shape != (self.n_rows + 1,):
            raise ValueError("row_offsets must have length n_rows + 1")
        if offsets[0] != 0 or offsets[-1] != vals.size or cols.size != vals.size:
            raise ValueError("row_offsets inconsistent with stored values")
        if np.any(np.diff(offsets) < 0):
            raise ValueError("row_offsets must be nondecreasing")
        if cols.size:
            if cols.min() < 0 or cols.max() >= self.n_cols:
                raise ValueError("column index out of range")
            rows = np.repeat(np.arange(self.n_rows), np.diff(offsets))
            same_row = rows[1:] == rows[:-1]
            if np.any(np.diff(cols)[same_row] <= 0):
                raise ValueError("column indices must be strictly increasing within rows")

    # construction -------------------------------------------------------

    @classmethod
    def from_scipy(cls, mat, symmetric=False):
        csr = sp.csr_matrix(mat, dtype=np.float64)
        csr.sum_duplicates()
        csr.sort_indices()
        return cls(csr.shape[0], csr.shape[1], csr.indptr, csr.indices, csr.data, symmetric)

    @classmethod
    def from_dense(cls, arr, symmetric=False):
        return cls.from_scipy(sp.csr_matrix(np.asarray(arr, dtype=np.float64)), symmetric)

    @classmethod
    def from_coo(cls, rows, cols, vals, shape, symmetric=False):
        """Build from triplets; duplicate entries are summed."""
        return cls.from_scipy(sp.coo_matrix((vals, (rows, cols)), shape=shape), symmetric)

    @classmethod
    def identity(cls, n):
        idx = np.arange(n)
        return cls(n, n, np.arange(n + 1), idx, np.ones(n), symmetric=True)

    @classmethod
    def diagonal_matrix(cls, diag):
        diag = np.asarray(diag, dtype=np.float64)
        n = diag.size
        return cls(n, n, np.arange(n + 1), np.arange(n), diag.copy(), symmetric=True)

    # views ----------------------------------------------------------------

    @cached_property
    def csr(self) -> sp.csr_matrix:
        return sp.csr_matrix(
            (self.values, self.col_indices, self.row_offsets), shape=(self.n_rows, self.n_cols)
        )

    @property
    def shape(self):
        return (self.n_rows, self.n_cols)

    @property
    def nnz(self):
        return self.values.size

    def todense(self):
        return self.csr.toarray()

    def diagonal(self):
        return self.csr.diagonal()

    def transpose(self):
        if self.symmetric:
            return self
        return SparseMatrix.from_scipy(self.csr.T)

    @property
    def T(self):
        return self.transpose()

    def bandwidth(self):
        """Largest |i - j| over stored entries."""
        if self.nnz == 0:
            return 0
        rows = np.repeat(np.arange(self.n_rows), np.diff(self.row_offsets))
        return int(np.max(np.abs(rows - self.col_indices)))

    def is_symmetric(self, rtol=1e-12):
        diff = abs(self.csr - self.csr.T)
        scale = max(abs(self.values).max(initial=0.0), 1.0)
        return diff.nnz == 0 or diff.max() <= rtol * scale

    def __matmul__(self, other):
        if isinstance(other, SparseMatrix):
            return SparseMatrix.from_scipy(self.csr @ other.csr)
        return spmv(self, other)

    def __repr__(self):
        sym = ", symmetric" if self.symmetric else ""
        return f"SparseMatrix({self.n_rows}x{self.n_cols}, nnz={self.nnz}{sym})"


def spmv(A: SparseMatrix, x: np.ndarray) -> np.ndarray:
    """Sparse mat-vec ``A @ x``; ``x`` may also hold several columns."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != A.n_cols:
        raise ValueError(f"dimension mismatch: A has {A.n_cols} columns, x has {x.shape[0]} rows")
    return A.csr @ x


Operator = Union[SparseMatrix, np.ndarray, Callable[[np.ndarray], np.ndarray]]


def as_operator(A: Operator) -> Callable[[np.ndarray], np.ndarray]:
    """Wrap a matrix (sparse or dense) or callable as a mat-vec callable."""
    if isinstance(A, SparseMatrix):
        return lambda x: spmv(A, x)
    if isinstance(A, np.ndarray):
        return lambda x: A @ x
    if sp.issparse(A):
        return lambda x: A @ x
    if callable(A):
        return A
    raise TypeError(f"cannot use {type(A).__name__} as a linear operator")


def cg_solve(A: Operator, b, tol=1e-8, max_iter=None, x0=None, full_output=False):
    """Conjugate gradients for SPD ``A``.

    Stops once ``||A x - b|| <= tol * ||b||`` (the recursively updated
    residual is re-checked against a true residual before returning).

    Raises
    ------
    ConvergenceError
        If the tolerance is not met within ``max_iter`` iterations; the
        error carries the final relative residual.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    apply = as_operator(A)
    b = np.asarray(b, dtype=np.float64)
    n = b.shape[0]
    if max_iter is None:
        max_iter = 10 * n
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        x = np.zeros_like(b)
        return (x, 0) if full_output else x

    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - apply(x) if x0 is not None else b.copy()
    p = r.copy()
    rr = r @ r
    target = tol * bnorm
    it = 0
    while it < max_iter:
        if np.sqrt(rr) <= target:
            true_res = np.linalg.norm(b - apply(x))
            if true_res <= target:
                break
            r = b - apply(x)
            p = r.copy()
            rr = r @ r
        Ap = apply(p)
        pAp = p @ Ap
        if pAp <= 0:
            raise ConvergenceError(
                "CG breakdown: operator not positive definite",
                residual=np.sqrt(rr) / bnorm,
                iterations=it,
            )
        alpha = rr / pAp
        x += alpha * p
        r -= alpha * Ap
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
        it += 1
    else:
        res = np.linalg.norm(b - apply(x)) / bnorm
        if res > tol:
            raise ConvergenceError(
                f"CG did not converge in {max_iter} iterations (relative residual {res:.3e})",
                residual=res,
                iterations=it,
            )
    return (x, it) if full_output else x


@dataclass(frozen=True, eq=False)
class BandedCholesky:
    """Lower band Cholesky factor ``A = L L^T``.

    ``factor`` uses LAPACK lower band storage: ``factor[k, j] = L[j + k, j]``
    for ``k = 0..bandwidth``.
    """

    n: int
    bandwidth: int
    factor: np.ndarray

    def solve_lower(self, b):
        """``L^{-1} b``."""
        return self._trsv(b, "N")

    def solve_upper(self, b):
        """``L^{-T} b``."""
        return self._trsv(b, "T")

    def solve(self, b):
        """``A^{-1} b``."""
        return self.solve_upper(self.solve_lower(b))

    def _trsv(self, b, trans):
        b = np.asarray(b, dtype=np.float64)
        if b.shape[0] != self.n:
            raise ValueError(f"dimension mismatch: factor is {self.n}, rhs has {b.shape[0]} rows")
        x, info = lapack.dtbtrs(self.factor, b, uplo="L", trans=trans)
        if info != 0:
            raise np.linalg.LinAlgError(f"band triangular solve failed (info={info})")
        return x

    def matvec_lower(self, x):
        """``L x``."""
        x = np.asarray(x, dtype=np.float64)
        y = np.zeros_like(x)
        n = self.n
        for k in range(self.bandwidth + 1):
            coef = self.factor[k, : n - k]
            if x.ndim > 1:
                coef = coef[:, None]
            y[k:] += coef * x[: n - k]
        return y

    def matvec_upper(self, x):
        """``L^T x``."""
        x = np.asarray(x, dtype=np.float64)
        y = np.zeros_like(x)
        n = self.n
        for k in range(self.bandwidth + 1):
            coef = self.factor[k, : n - k]
            if x.ndim > 1:
                coef = coef[:, None]
            y[: n - k] += coef * x[k:]
        return y

    def diagonal(self):
        return self.factor[0].copy()

    def logdet(self):
        """``log det A``."""
        return 2.0 * np.sum(np.log(self.factor[0]))

    def to_dense(self):
        L = np.zeros((self.n, self.n))
        for k in range(self.bandwidth + 1):
            idx = np.arange(self.n - k)
            L[idx + k, idx] = self.factor[k, : self.n - k]
        return L


def banded_cholesky(A: SparseMatrix, bandwidth=None) -> BandedCholesky:
    """Band Cholesky factorisation of an SPD matrix in natural ordering.

    Parameters
    ----------
    A : SparseMatrix
        Symmetric positive definite matrix (both triangles stored; only the
        lower band is read).
    bandwidth : int, optional
        Half bandwidth. Computed from the sparsity pattern when omitted.

    Raises
    ------
    NotPositiveDefiniteError
        On a non-positive pivot; ``err.row`` is the offending row.
    """
    if A.n_rows != A.n_cols:
        raise ValueError("matrix must be square")
    n = A.n_rows
    rows = np.repeat(np.arange(n), np.diff(A.row_offsets))
    cols = A.col_indices
    offset = rows - cols
    lower = offset >= 0
    actual = int(offset[lower].max(initial=0))
    if bandwidth is None:
        bandwidth = actual
    elif actual > bandwidth:
        nz = lower & (offset > bandwidth) & (A.values != 0.0)
        if np.any(nz):
            raise ValueError(f"matrix has entries outside the declared bandwidth {bandwidth}")
        lower &= offset <= bandwidth
    ab = np.zeros((bandwidth + 1, n))
    ab[offset[lower], cols[lower]] = A.values[lower]
    c, info = lapack.dpbtrf(ab, lower=1)
    if info > 0:
        raise NotPositiveDefiniteError(info - 1)
    if info < 0:
        raise ValueError(f"dpbtrf: illegal argument {-info}")
    return BandedCholesky(n, bandwidth, c)


@dataclass(frozen=True)
class EigEstimate:
    lambda_max: float
    lambda_min: float
    iterations_used: int
    converged: bool

    @property
    def condition_number(self):
        return self.lambda_max / self.lambda_min


def _unit_start(n, seed):
    v = np.random.default_rng(seed).standard_normal(n)
    return v / np.linalg.norm(v)


def _power(apply, n, tol, max_iter, seed):
    v = _unit_start(n, seed)
    lam = 0.0
    for it in range(1, max_iter + 1):
        w = apply(v)
        lam = v @ w
        res = np.linalg.norm(w - lam * v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0, it, True
        if res <= tol * abs(lam):
            return lam, it, True
        v = w / nw
    return lam, max_iter, False


def max_eig(A_apply: Operator, n: int, tol=1e-6, max_iter=20000, seed=0) -> float:
    """Largest eigenvalue of an SPD operator by power iteration."""
    lam, _, _ = _power(as_operator(A_apply), n, tol, max_iter, seed)
    return float(lam)


def extreme_eigs(
    A_apply: Operator,
    n: int,
    tol=1e-6,
    max_iter=20000,
    solve=None,
    cg_tol=1e-8,
    max_outer=500,
    seed=0,
) -> EigEstimate:
    """Largest and smallest eigenvalues of an SPD operator.

    ``lambda_max`` comes from power iteration, ``lambda_min`` from inverse
    iteration. Both stop on the eigen-residual ``||A v - lambda v|| <=
    tol * lambda``, which bounds the relative eigenvalue error by ``tol``.

    Parameters
    ----------
    A_apply : SparseMatrix, ndarray or callable
        The operator (may be a composite such as ``S^T P S``).
    n : int
        Dimension.
    solve : callable, optional
        Applies ``A^{-1}``. Defaults to :func:`cg_solve` with ``cg_tol``.
    """
    apply = as_operator(A_apply)
    if solve is None:
        def solve(b):
            return cg_solve(apply, b, tol=cg_tol, max_iter=20 * n)

    lam_max, it_max, ok_max = _power(apply, n, tol, max_iter, seed)
    mu, it_min, ok_min = _power(solve, n, tol, max_outer, seed + 1)
    lam_min = 1.0 / mu
    return EigEstimate(float(lam_max), float(lam_min), it_max + it_min, ok_max and ok_min)
