"""
Numerical kernels: dense symmetric eigensolver, the PSD generalized
eigenproblem used to extract sharp constants, and sparse symmetric solves.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Tuple, Union

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse import linalg as spla

from .utils import (
    EigenCrossCheckError,
    IndefiniteFormError,
    NonFiniteMatrixError,
    SolverBreakdownError,
    require_finite,
)

logger = logging.getLogger(__name__)

DEFAULT_NULL_TOL = 1e-10
RESIDUAL_TOL = 1e-10
CROSS_CHECK_TOL = 1e-8
CROSS_CHECK_ITERATIONS = 300
START_PERTURBATION = 1e-6


@dataclass
class SymmetricDense:
    """Dense symmetric matrix; the stored array is the symmetric part of the input."""
    matrix: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.matrix, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"symmetric matrix must be square, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise NonFiniteMatrixError("matrix has non-finite entries")
        self.matrix = 0.5 * (a + a.T)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


def _as_symmetric(a: Union[SymmetricDense, np.ndarray]) -> SymmetricDense:
    return a if isinstance(a, SymmetricDense) else SymmetricDense(a)


def sym_eig(a: Union[SymmetricDense, np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """Eigenvalues in ascending order and an orthonormal eigenbasis (columns)."""
    a = _as_symmetric(a)
    return scipy.linalg.eigh(a.matrix, check_finite=False)


def _top_eigenpair(a: np.ndarray) -> Tuple[float, np.ndarray]:
    n = a.shape[0]
    w, v = scipy.linalg.eigh(a, subset_by_index=[n - 1, n - 1], check_finite=False)
    return float(w[0]), v[:, 0]


@dataclass
class GenEigResult:
    lambda_max: float
    witness: np.ndarray
    bounded: bool
    null_dim: int


def gen_eig_max(
    a: Union[SymmetricDense, np.ndarray],
    b: Union[SymmetricDense, np.ndarray],
    null_tol: float = DEFAULT_NULL_TOL,
) -> GenEigResult:
    """
    Largest generalized Rayleigh quotient x'Ax / x'Bx over x with x'Bx > 0.

    B is diagonalized; A is whitened on the range of B and its largest
    eigenpair gives the constant. If A carries energy on the null space of B
    the quotient is unbounded and the returned witness is a direction proving it.

    Args:
        a: PSD numerator form
        b: PSD denominator form
        null_tol: Relative eigenvalue threshold separating range from null space
    """
    a, b = _as_symmetric(a), _as_symmetric(b)
    if a.n != b.n:
        raise ValueError(f"forms have different orders {a.n} and {b.n}")
    wb, vb = scipy.linalg.eigh(b.matrix, check_finite=False)
    scale_b = float(np.max(np.abs(wb))) if wb.size else 0.0
    if scale_b > 0 and wb[0] < -null_tol * scale_b:
        raise IndefiniteFormError(f"denominator form has eigenvalue {wb[0]:.3e} < 0")
    norm_a = float(np.linalg.norm(a.matrix))
    if norm_a > 0 and np.min(np.diag(a.matrix)) < -null_tol * norm_a:
        raise IndefiniteFormError("numerator form has a negative diagonal entry")

    keep = wb > null_tol * scale_b if scale_b > 0 else np.zeros(b.n, dtype=bool)
    null_dim = int(np.count_nonzero(~keep))

    if null_dim:
        z = vb[:, ~keep]
        z_max, z_vec = _top_eigenpair(z.T @ a.matrix @ z)
        if z_max > null_tol * max(norm_a, 1e-300):
            logger.debug(f"Form unbounded: energy {z_max:.3e} on a {null_dim}-dimensional null space")
            return GenEigResult(float("inf"), z @ z_vec, False, null_dim)

    if not np.any(keep):
        return GenEigResult(0.0, np.zeros(b.n), True, null_dim)

    whitening = vb[:, keep] / np.sqrt(wb[keep])
    whitened = whitening.T @ a.matrix @ whitening
    lam, y = _top_eigenpair(0.5 * (whitened + whitened.T))
    if lam < -null_tol * max(norm_a / scale_b, 1.0):
        raise IndefiniteFormError(f"numerator form is negative on the range of the denominator ({lam:.3e})")
    return GenEigResult(max(lam, 0.0), whitening @ y, True, null_dim)


def rayleigh_quotient(a: np.ndarray, b: np.ndarray, x: np.ndarray) -> float:
    a = a.matrix if isinstance(a, SymmetricDense) else a
    b = b.matrix if isinstance(b, SymmetricDense) else b
    return float((x @ a @ x) / (x @ b @ x))


def power_iteration(
    operator: Callable[[np.ndarray], np.ndarray],
    n: int,
    max_iter: int = 5000,
    tol: float = 1e-10,
    seed: int = 0,
    x0: Optional[np.ndarray] = None,
) -> Tuple[float, np.ndarray]:
    """
    Dominant eigenpair of a symmetric PSD operator by power iteration.

    Starts from ``x0`` when given, otherwise from a random vector.
    Stops when ||A x - lambda x|| < tol * |lambda|.
    """
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n) if x0 is None else np.array(x0, dtype=float)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(max_iter):
        y = operator(x)
        y_norm = np.linalg.norm(y)
        if y_norm == 0:
            # x fell into the null space; restart
            x = rng.normal(size=n)
            x /= np.linalg.norm(x)
            continue
        lam = float(x @ y)
        x = y / y_norm
        if np.linalg.norm(operator(x) - lam * x) < tol * max(abs(lam), 1e-300):
            break
    return float(x @ operator(x)), x


def power_cross_check(
    a: Union[SymmetricDense, np.ndarray],
    b: Union[SymmetricDense, np.ndarray],
    null_tol: float = DEFAULT_NULL_TOL,
    max_iter: int = 20000,
    start: Optional[np.ndarray] = None,
    seed: int = 0,
) -> float:
    """
    Largest generalized eigenvalue recomputed by power iteration on the whitened operator.

    ``start`` is a vector in the original coordinates (an eigensolver witness).
    It is mapped to whitened coordinates and perturbed by a random direction
    of relative size START_PERTURBATION, so a witness that is not the dominant
    eigenvector drifts toward the larger eigenvalue.
    """
    a, b = _as_symmetric(a), _as_symmetric(b)
    wb, vb = scipy.linalg.eigh(b.matrix, check_finite=False)
    keep = wb > null_tol * np.max(np.abs(wb))
    whitening = vb[:, keep] / np.sqrt(wb[keep])
    whitened = whitening.T @ a.matrix @ whitening
    whitened = 0.5 * (whitened + whitened.T)
    m = int(np.count_nonzero(keep))
    x0 = None
    if start is not None:
        y0 = np.sqrt(wb[keep]) * (vb[:, keep].T @ start)
        y0 /= np.linalg.norm(y0)
        noise = np.random.default_rng(seed).normal(size=m)
        x0 = y0 + START_PERTURBATION * noise / np.linalg.norm(noise)
    lam, _ = power_iteration(lambda y: whitened @ y, m, max_iter=max_iter, tol=1e-12, seed=seed, x0=x0)
    return lam


def check_against_power(
    result: "GenEigResult",
    a: Union[SymmetricDense, np.ndarray],
    b: Union[SymmetricDense, np.ndarray],
    null_tol: float = DEFAULT_NULL_TOL,
    label: str = "form",
) -> float:
    """
    Recompute a bounded, nonzero lambda_max by power iteration seeded with the
    witness; raise EigenCrossCheckError if the two differ by more than
    CROSS_CHECK_TOL relative.

    Returns:
        The power iteration estimate (lambda_max itself when nothing to check)
    """
    if not result.bounded or result.lambda_max <= 0:
        return result.lambda_max
    power = power_cross_check(a, b, null_tol, max_iter=CROSS_CHECK_ITERATIONS, start=result.witness)
    if abs(power - result.lambda_max) > CROSS_CHECK_TOL * result.lambda_max:
        raise EigenCrossCheckError(
            f"{label}: power iteration gives {power:.12e}, eigensolver {result.lambda_max:.12e}"
        )
    return power


class SparseSymmetric:
    """Sparse symmetric matrix stored as the CSR lower triangle."""

    def __init__(self, lower: sp.csr_matrix):
        self.lower = sp.csr_matrix(lower)

    @classmethod
    @require_finite("matrix")
    def from_matrix(cls, matrix, sym_tol: float = 1e-12) -> "SparseSymmetric":
        m = sp.csr_matrix(matrix)
        scale = max(abs(m).max(), 1e-300) if m.nnz else 1.0
        if m.nnz and abs(m - m.T).max() > sym_tol * scale:
            raise SolverBreakdownError("matrix is not symmetric")
        return cls(sp.tril(m, format="csr"))

    @property
    def n(self) -> int:
        return self.lower.shape[0]

    def full(self) -> sp.csr_matrix:
        diag = sp.diags(self.lower.diagonal())
        return (self.lower + self.lower.T - diag).tocsr()

    def __matmul__(self, x: np.ndarray) -> np.ndarray:
        return self.full() @ x


@dataclass
class SolveReport:
    x: np.ndarray
    residual: float
    min_pivot: float


def _relative_residual(matrix: sp.spmatrix, x: np.ndarray, b: np.ndarray) -> float:
    norm_b = np.linalg.norm(b)
    return float(np.linalg.norm(b - matrix @ x) / norm_b) if norm_b > 0 else float(np.linalg.norm(matrix @ x))


@require_finite("b")
def sparse_solve_spd(m: SparseSymmetric, b: np.ndarray, tol: float = RESIDUAL_TOL) -> SolveReport:
    """
    Solve M x = b for SPD M by a symmetric-mode sparse LU with diagonal pivoting.

    With diagonal pivoting the U diagonal holds the LDL' pivots, so a
    non-positive pivot proves M is not SPD.
    """
    b = np.asarray(b, dtype=float)
    full = m.full().tocsc()
    if m.n == 0:
        return SolveReport(np.zeros(0), 0.0, float("inf"))
    try:
        lu = spla.splu(
            full,
            permc_spec="MMD_AT_PLUS_A",
            diag_pivot_thresh=0.0,
            options={"SymmetricMode": True},
        )
    except RuntimeError as e:
        raise SolverBreakdownError(f"sparse factorization failed: {e}") from e
    min_pivot = float(np.min(lu.U.diagonal()))
    if min_pivot <= 0:
        raise SolverBreakdownError(f"matrix is not SPD: factorization pivot {min_pivot:.3e}")
    x = lu.solve(b)
    x += lu.solve(b - full @ x)
    residual = _relative_residual(full, x, b)
    if residual > tol:
        raise SolverBreakdownError(f"relative residual {residual:.3e} exceeds {tol:.0e}")
    logger.debug(f"SPD solve n={m.n}: residual {residual:.2e}, min pivot {min_pivot:.3e}")
    return SolveReport(x, residual, min_pivot)


@require_finite("b")
def sparse_solve(matrix: sp.spmatrix, b: np.ndarray, tol: float = RESIDUAL_TOL) -> SolveReport:
    """Solve a nonsingular (possibly indefinite) sparse system with one refinement step."""
    full = sp.csc_matrix(matrix)
    try:
        lu = spla.splu(full)
    except RuntimeError as e:
        raise SolverBreakdownError(f"sparse factorization failed: {e}") from e
    x = lu.solve(b)
    x += lu.solve(b - full @ x)
    residual = _relative_residual(full, x, b)
    if residual > tol:
        raise SolverBreakdownError(f"relative residual {residual:.3e} exceeds {tol:.0e}")
    return SolveReport(x, residual, float("nan"))
