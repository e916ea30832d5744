"""Sparse symmetric linear algebra: preconditioned conjugate gradients and
extreme-eigenvalue estimation for condition number studies."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

__all__ = [
    "CsrMatrix",
    "SolveReport",
    "NotSPDError",
    "EigenEstimationError",
    "cg_solve",
    "extreme_eigs",
    "condition_number",
]

DEFAULT_SEED = 42


class NotSPDError(RuntimeError):
    """Raised when CG meets a direction of nonpositive curvature."""


class EigenEstimationError(RuntimeError):
    """Raised when an eigenvalue iteration repeatedly breaks down."""


@dataclass
class CsrMatrix:
    """Symmetric sparse matrix in compressed sparse row form."""

    csr: sparse.csr_matrix

    def __init__(self, csr):
        mat = sparse.csr_matrix(csr)
        mat.sum_duplicates()
        mat.sort_indices()
        self.csr = mat

    @classmethod
    def from_triplets(cls, rows, cols, vals, dim: int) -> "CsrMatrix":
        coo = sparse.coo_matrix((vals, (rows, cols)), shape=(dim, dim))
        return cls(coo.tocsr())

    @property
    def dim(self) -> int:
        return self.csr.shape[0]

    @property
    def row_offsets(self) -> np.ndarray:
        return self.csr.indptr

    @property
    def col_indices(self) -> np.ndarray:
        return self.csr.indices

    @property
    def values(self) -> np.ndarray:
        return self.csr.data

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.csr @ x

    def diagonal(self) -> np.ndarray:
        return self.csr.diagonal()

    def symmetry_defect(self) -> float:
        """max |A - A^T| entrywise; 0 for exactly symmetric matrices."""
        d = self.csr - self.csr.T
        return float(np.abs(d.data).max()) if d.nnz else 0.0

    def max_abs(self) -> float:
        return float(np.abs(self.csr.data).max()) if self.csr.nnz else 0.0

    def submatrix(self, idx: np.ndarray) -> "CsrMatrix":
        return CsrMatrix(self.csr[np.ix_(idx, idx)].tocsr())

    def todense(self) -> np.ndarray:
        return self.csr.toarray()


@dataclass
class SolveReport:
    iterations: int
    relative_residual: float
    converged: bool
    residual_history: np.ndarray = None


def cg_solve(
    A: CsrMatrix,
    b: np.ndarray,
    tol: float = 1e-10,
    maxit: int | None = None,
    x0: np.ndarray | None = None,
) -> tuple[np.ndarray, SolveReport]:
    """Jacobi-preconditioned conjugate gradients for SPD systems.

    Stops when the true residual satisfies ||b - Ax|| <= tol * ||b||.
    Raises NotSPDError on a nonpositive-curvature direction, which flags an
    indefinite (or unpinned) system.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    n = A.dim
    if maxit is None:
        maxit = max(10 * n, 100)
    b = np.asarray(b, dtype=float)
    normb = float(np.linalg.norm(b))
    if normb == 0.0:
        return np.zeros(n), SolveReport(0, 0.0, True, np.zeros(1))
    diag = A.diagonal()
    if np.any(diag <= 0):
        bad = int(np.argmin(diag))
        raise NotSPDError(f"nonpositive diagonal entry {diag[bad]:.3e} at dof {bad}")
    inv_diag = 1.0 / diag
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - A.matvec(x)
    z = inv_diag * r
    p = z.copy()
    rz = float(np.dot(r, z))
    history = [float(np.sqrt(rz))]
    k = 0
    while k < maxit:
        if np.linalg.norm(r) <= tol * normb:
            # the recursive residual drifts from the true one near the
            # tolerance floor: verify, and restart the recursion if needed
            r_true = b - A.matvec(x)
            if np.linalg.norm(r_true) <= tol * normb:
                break
            r = r_true
            z = inv_diag * r
            p = z.copy()
            rz = float(np.dot(r, z))
        Ap = A.matvec(p)
        pAp = float(np.dot(p, Ap))
        if pAp <= 0.0:
            j = int(np.argmax(np.abs(p)))
            raise NotSPDError(
                f"negative curvature p'Ap = {pAp:.3e} in direction peaking at dof {j}"
            )
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        z = inv_diag * r
        rz_new = float(np.dot(r, z))
        p = z + (rz_new / rz) * p
        rz = rz_new
        history.append(float(np.sqrt(max(rz, 0.0))))
        k += 1
    true_res = float(np.linalg.norm(b - A.matvec(x)) / normb)
    return x, SolveReport(k, true_res, true_res <= tol, np.array(history))


def _lanczos_lambda_max(A: CsrMatrix, rng: np.random.Generator, rtol: float, maxit: int) -> float:
    """Largest eigenvalue via the Lanczos iteration with full reorthogonalization."""
    n = A.dim
    if n == 1:
        return float(A.diagonal()[0])
    q = rng.standard_normal(n)
    q /= np.linalg.norm(q)
    Q = [q]
    alphas: list[float] = []
    betas: list[float] = []
    est_prev = None
    for j in range(min(maxit, n)):
        w = A.matvec(Q[-1])
        alpha = float(np.dot(Q[-1], w))
        alphas.append(alpha)
        w -= alpha * Q[-1]
        if len(Q) > 1:
            w -= betas[-1] * Q[-2]
        # full reorthogonalization keeps the Ritz values honest
        for v in Q:
            w -= np.dot(v, w) * v
        beta = float(np.linalg.norm(w))
        T = np.diag(alphas)
        if betas:
            off = np.array(betas)
            T += np.diag(off, 1) + np.diag(off, -1)
        evals, evecs = np.linalg.eigh(T)
        est = float(evals[-1])
        resid = beta * abs(evecs[-1, -1])
        if est_prev is not None and (
            resid <= rtol * abs(est) or abs(est - est_prev) <= rtol * abs(est)
        ):
            return est
        est_prev = est
        if beta <= 1e-14 * abs(est):
            return est  # invariant subspace found: estimate is exact
        betas.append(beta)
        Q.append(w / beta)
    return est_prev


def _inverse_iteration_lambda_min(
    A: CsrMatrix, rng: np.random.Generator, rtol: float, maxit: int
) -> float:
    """Smallest eigenvalue via inverse iteration, inner solves done with CG.

    Stops on the eigen-residual ||Av - lam v|| <= rtol * lam, which for a
    symmetric matrix puts the Rayleigh quotient within rtol * lam of a true
    eigenvalue (the bottom one, which the iteration converges to).
    """
    n = A.dim
    if n == 1:
        return float(A.diagonal()[0])
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    lam = None
    x = None
    for _ in range(maxit):
        x, _ = cg_solve(A, v, tol=1e-10, maxit=20 * n, x0=x)
        nx = np.linalg.norm(x)
        if nx == 0.0:
            raise EigenEstimationError("inverse iteration produced a zero vector")
        v = x / nx
        Av = A.matvec(v)
        lam = float(np.dot(v, Av))
        if np.linalg.norm(Av - lam * v) <= rtol * abs(lam):
            return lam
    return lam


def extreme_eigs(
    A: CsrMatrix,
    seed: int = DEFAULT_SEED,
    rtol_max: float = 1e-6,
    rtol_min: float = 1e-4,
) -> tuple[float, float]:
    """(lambda_max, lambda_min) of an SPD matrix.

    lambda_max comes from Lanczos, lambda_min from inverse iteration with CG
    solves. On breakdown, each estimator retries once from a fresh seeded
    start before giving up.
    """
    rng = np.random.default_rng(seed)
    lam_max = lam_min = None
    for attempt in range(2):
        try:
            lam_max = _lanczos_lambda_max(A, rng, rtol_max, maxit=500)
            break
        except (FloatingPointError, np.linalg.LinAlgError):
            if attempt == 1:
                raise EigenEstimationError("Lanczos broke down twice")
    for attempt in range(2):
        try:
            lam_min = _inverse_iteration_lambda_min(A, rng, rtol_min, maxit=200)
            break
        except (NotSPDError, EigenEstimationError):
            if attempt == 1:
                raise
    return lam_max, lam_min


def condition_number(A: CsrMatrix, seed: int = DEFAULT_SEED) -> float:
    """Spectral condition number lambda_max / lambda_min of an SPD matrix."""
    lam_max, lam_min = extreme_eigs(A, seed=seed)
    if lam_min <= 0:
        raise NotSPDError(f"estimated lambda_min = {lam_min:.3e} is not positive")
    return lam_max / lam_min
