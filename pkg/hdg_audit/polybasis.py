"""
Quadrature rules, orthonormal reference bases and per-cell / per-face kernels.

Physical bases are the reference orthonormal bases rescaled by (2|K|)^{-1/2}
on cells and |e|^{-1/2} on faces, so every local mass matrix is the identity
and coefficient vectors carry L2 norms directly.
"""
import math
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Tuple

import numpy as np
from numpy.polynomial import legendre
from scipy.special import roots_jacobi, roots_legendre

from .mesh import Mesh
from .utils import BasisDegreeError, QuadratureDegreeError, log_duration

logger = logging.getLogger(__name__)

MAX_DEGREE = 4
MAX_QUAD_DEGREE = 40
REFERENCE_CENTROID = np.array([1.0 / 3.0, 1.0 / 3.0])


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray
    weights: np.ndarray
    exactness_degree: int

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Weighted sum over the leading (point) axis."""
        return np.tensordot(self.weights, values, axes=(0, 0))


def _check_quad_degree(deg: int) -> None:
    if deg < 0 or deg > MAX_QUAD_DEGREE:
        raise QuadratureDegreeError(
            f"quadrature exactness {deg} outside the supported range 0..{MAX_QUAD_DEGREE}"
        )


@lru_cache(maxsize=None)
def quad_segment(deg: int) -> QuadratureRule:
    """Gauss-Legendre rule on [0, 1] exact for polynomials of degree <= deg."""
    _check_quad_degree(deg)
    n = max(1, math.ceil((deg + 1) / 2))
    nodes, weights = roots_legendre(n)
    points = 0.5 * (nodes + 1.0)
    return QuadratureRule(_readonly(points), _readonly(0.5 * weights), 2 * n - 1)


@lru_cache(maxsize=None)
def quad_triangle(deg: int) -> QuadratureRule:
    """
    Conical-product (Stroud) rule on the unit right triangle.

    Collapses the triangle onto the unit square via x = u(1-v), y = v and
    combines Gauss-Legendre in u with Gauss-Jacobi(1, 0) in v, which absorbs
    the (1-v) Jacobian.
    """
    _check_quad_degree(deg)
    n = max(1, math.ceil((deg + 1) / 2))
    tu, wu = roots_legendre(n)
    tv, wv = roots_jacobi(n, 1.0, 0.0)
    u = 0.5 * (tu + 1.0)
    v = 0.5 * (tv + 1.0)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    points = np.column_stack([(uu * (1.0 - vv)).ravel(), vv.ravel()])
    weights = np.outer(0.5 * wu, 0.25 * wv).ravel()
    return QuadratureRule(_readonly(points), _readonly(weights), 2 * n - 1)


def _readonly(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array, dtype=float)
    array.flags.writeable = False
    return array


def triangle_dim(k: int) -> int:
    return (k + 1) * (k + 2) // 2


def monomial_exponents(k: int) -> List[Tuple[int, int]]:
    """Exponent pairs ordered by total degree, then by the power of y."""
    return [(d - j, j) for d in range(k + 1) for j in range(d + 1)]


def _check_degree(k: int) -> None:
    if not 0 <= k <= MAX_DEGREE:
        raise BasisDegreeError(f"polynomial degree {k} outside the supported range 0..{MAX_DEGREE}")


class ReferenceBasis(ABC):
    """Orthonormal polynomial basis of degree k on a reference element."""

    def __init__(self, k: int):
        _check_degree(k)
        self.k = k
        self.rule = self.default_rule()
        self.values = _readonly(self.evaluate(self.rule.points))
        self.gradients = _readonly(self.gradient(self.rule.points))

    @property
    @abstractmethod
    def dim(self) -> int:
        pass

    @abstractmethod
    def default_rule(self) -> QuadratureRule:
        pass

    @abstractmethod
    def evaluate(self, points: np.ndarray) -> np.ndarray:
        """Basis values, shape (n_points, dim)."""

    @abstractmethod
    def gradient(self, points: np.ndarray) -> np.ndarray:
        """Basis derivatives, shape (n_points, dim, n_reference_dims)."""

    def gram(self) -> np.ndarray:
        v = self.values
        return np.einsum("q,qa,qb->ab", self.rule.weights, v, v)


class TriangleBasis(ReferenceBasis):
    """
    Hierarchical orthonormal basis on the unit right triangle, obtained by
    orthonormalizing centred monomials with a weighted QR factorization.
    """

    def __init__(self, k: int):
        _check_degree(k)
        self.exponents = np.array(monomial_exponents(k))
        self.coefficients = _readonly(self._orthonormalize(k))
        super().__init__(k)

    @property
    def dim(self) -> int:
        return triangle_dim(self.k)

    def default_rule(self) -> QuadratureRule:
        return quad_triangle(2 * self.k + 2)

    def _monomials(self, points: np.ndarray) -> np.ndarray:
        shifted = np.asarray(points, dtype=float) - REFERENCE_CENTROID
        return shifted[..., 0, None] ** self.exponents[:, 0] * shifted[..., 1, None] ** self.exponents[:, 1]

    def _monomial_gradients(self, points: np.ndarray) -> np.ndarray:
        shifted = np.asarray(points, dtype=float) - REFERENCE_CENTROID
        x, y = shifted[..., 0, None], shifted[..., 1, None]
        px, py = self.exponents[:, 0], self.exponents[:, 1]
        dx = np.where(px > 0, px * x ** np.maximum(px - 1, 0), 0.0) * y ** py
        dy = x ** px * np.where(py > 0, py * y ** np.maximum(py - 1, 0), 0.0)
        return np.stack([dx, dy], axis=-1)

    def _orthonormalize(self, k: int) -> np.ndarray:
        rule = quad_triangle(2 * k + 2)
        vandermonde = self._monomials(rule.points)
        sqrt_w = np.sqrt(rule.weights)[:, None]
        _, r = np.linalg.qr(sqrt_w * vandermonde)
        r = r * np.sign(np.diag(r))[:, None]
        coefficients = np.linalg.inv(r)
        # one Cholesky pass removes the round-off left by the triangular inverse
        gram = coefficients.T @ (vandermonde.T * rule.weights) @ vandermonde @ coefficients
        chol = np.linalg.cholesky(gram)
        return coefficients @ np.linalg.inv(chol.T)

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        return self._monomials(points) @ self.coefficients

    def gradient(self, points: np.ndarray) -> np.ndarray:
        return np.einsum("...md,ma->...ad", self._monomial_gradients(points), self.coefficients)


class SegmentBasis(ReferenceBasis):
    """Orthonormal shifted Legendre polynomials sqrt(2n+1) P_n(2t-1) on [0, 1]."""

    @property
    def dim(self) -> int:
        return self.k + 1

    def default_rule(self) -> QuadratureRule:
        return quad_segment(2 * self.k + 2)

    def _scale(self) -> np.ndarray:
        return np.sqrt(2.0 * np.arange(self.k + 1) + 1.0)

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        t = np.asarray(points, dtype=float).reshape(-1)
        return legendre.legvander(2.0 * t - 1.0, self.k) * self._scale()

    def gradient(self, points: np.ndarray) -> np.ndarray:
        t = np.asarray(points, dtype=float).reshape(-1)
        columns = []
        for n in range(self.k + 1):
            c = np.zeros(n + 1)
            c[n] = 1.0
            columns.append(2.0 * legendre.legval(2.0 * t - 1.0, legendre.legder(c)))
        return (np.stack(columns, axis=1) * self._scale())[:, :, None]


@lru_cache(maxsize=None)
def build_orthonormal_basis(k: int, element: str = "triangle") -> ReferenceBasis:
    """
    Build (and memoize) the orthonormal reference basis of degree k.

    Args:
        k: Polynomial degree, 0..4
        element: 'triangle' or 'segment'
    """
    if element == "triangle":
        return TriangleBasis(k)
    if element == "segment":
        return SegmentBasis(k)
    raise ValueError(f"unknown reference element '{element}'")


class LocalKernels:
    """
    Batched local matrices of the physical orthonormal bases on a mesh.

    Shapes (nc cells, nb = dim P^k(K), mf = k+1 face dofs, local face j):
        cell_mass        (nc, nb, nb)       (phi_a, phi_b)_K
        gradgrad         (nc, nb, nb)       (grad phi_a, grad phi_b)_K
        div_coupling     (nc, 2, nb, nb)    (d_d phi_a, phi_b)_K
        trace            (nc, 3, nb, mf)    <phi_a, psi_c>_{e_j}
        cell_face_mass   (nc, 3, nb, nb)    <phi_a, phi_b>_{e_j}
        normal_coupling  (nc, 3, 2, nb, mf) n_d <phi_a, psi_c>_{e_j}
        cell_face_integral (nc, 3, nb)      <phi_a, 1>_{e_j}
        cell_integral    (nc, nb)           (phi_a, 1)_K
        face_mass        (nf, mf, mf)       <psi_a, psi_b>_e
        face_integral    (nf, mf)           <psi_c, 1>_e
    """

    @log_duration
    def __init__(self, mesh: Mesh, k: int, quad_degree: int = None):
        self.mesh = mesh
        self.k = k
        self.cell_basis = build_orthonormal_basis(k, "triangle")
        self.face_basis = build_orthonormal_basis(k, "segment")
        self.quad_degree = 2 * k + 2 if quad_degree is None else quad_degree
        self.cell_rule = quad_triangle(self.quad_degree)
        self.face_rule = quad_segment(self.quad_degree)
        self._assemble_cells()
        self._assemble_faces()
        logger.debug(f"Assembled local kernels k={k} on {mesh}")

    @property
    def n_cell_dofs(self) -> int:
        return self.cell_basis.dim

    @property
    def n_face_dofs(self) -> int:
        return self.face_basis.dim

    def _assemble_cells(self) -> None:
        mesh, rule = self.mesh, self.cell_rule
        area = mesh.cell_area
        values = self.cell_basis.evaluate(rule.points)  # (nq, nb)
        ref_grad = self.cell_basis.gradient(rule.points)  # (nq, nb, 2)
        # grad_ref @ J^{-1}; the (2|K|)^{-1/2} basis scaling cancels the 2|K| quadrature factor
        phys_grad = np.einsum("qar,krd->kqad", ref_grad, mesh.inverse_jacobian)
        w = rule.weights

        reference_mass = np.einsum("q,qa,qb->ab", w, values, values)
        self.cell_mass = _readonly(np.repeat(reference_mass[None], mesh.n_cells, axis=0))
        self.gradgrad = _readonly(np.einsum("q,kqad,kqbd->kab", w, phys_grad, phys_grad))
        self.div_coupling = _readonly(np.einsum("q,kqad,qb->kdab", w, phys_grad, values))
        self.cell_integral = _readonly(np.sqrt(2.0 * area)[:, None] * (w @ values)[None, :])

        origin = mesh.vertices[mesh.cells[:, 0]]
        self.cell_points = _readonly(origin[:, None, :] + np.einsum("kdr,qr->kqd", mesh.jacobian, rule.points))
        self.cell_weights = _readonly(2.0 * area[:, None] * w[None, :])
        self.cell_values = _readonly(values / np.sqrt(2.0 * area)[:, None, None])

    def _assemble_faces(self) -> None:
        mesh, rule = self.mesh, self.face_rule
        t, w = rule.points, rule.weights
        psi = self.face_basis.evaluate(t)  # (nq, mf)
        length = mesh.face_length

        fv = mesh.vertices[mesh.face_vertices]  # (nf, 2, 2)
        face_points = fv[:, None, 0, :] + t[None, :, None] * (fv[:, 1] - fv[:, 0])[:, None, :]
        self.face_points = _readonly(face_points)
        self.face_weights = _readonly(length[:, None] * w[None, :])
        self.face_values = _readonly(psi[None, :, :] / np.sqrt(length)[:, None, None])
        reference_mass = np.einsum("q,qa,qb->ab", w, psi, psi)
        self.face_mass = _readonly(np.repeat(reference_mass[None], mesh.n_faces, axis=0))
        self.face_integral = _readonly(np.sqrt(length)[:, None] * (w @ psi)[None, :])

        # cell basis evaluated at the quadrature points of each of its faces
        pts = face_points[mesh.cell_faces]  # (nc, 3, nq, 2)
        origin = mesh.vertices[mesh.cells[:, 0]]
        ref = np.einsum("krd,kjqd->kjqr", mesh.inverse_jacobian, pts - origin[:, None, None, :])
        phi = self.cell_basis.evaluate(ref) / np.sqrt(2.0 * mesh.cell_area)[:, None, None, None]
        self.cell_face_values = _readonly(phi)  # (nc, 3, nq, nb)

        le = length[mesh.cell_faces]  # (nc, 3)
        wphi = phi * (le[:, :, None, None] * w[None, None, :, None])
        self.cell_face_mass = _readonly(np.einsum("kjqa,kjqb->kjab", wphi, phi))
        self.trace = _readonly(np.einsum("kjqa,qc->kjac", wphi, psi) / np.sqrt(le)[:, :, None, None])
        self.cell_face_integral = _readonly(wphi.sum(axis=2))
        self.normal_coupling = _readonly(np.einsum("kjd,kjac->kjdac", mesh.cell_normals, self.trace))

    # per-entity views used by callers that work one cell or face at a time

    def cell_mass_of(self, cell: int) -> np.ndarray:
        return self.cell_mass[cell]

    def cell_gradgrad(self, cell: int) -> np.ndarray:
        return self.gradgrad[cell]

    def cell_div_coupling(self, cell: int) -> np.ndarray:
        return self.div_coupling[cell]

    def face_mass_of(self, face: int) -> np.ndarray:
        return self.face_mass[face]

    def cell_trace_on_face(self, cell: int, face: int) -> np.ndarray:
        return self.trace[cell, self.mesh.local_face_index(cell, face)]

    def face_normal_coupling(self, cell: int, face: int) -> np.ndarray:
        return self.normal_coupling[cell, self.mesh.local_face_index(cell, face)]

    def evaluate_cell(self, cell: int, points: np.ndarray) -> np.ndarray:
        """Physical basis values at arbitrary points of ``cell``, shape (n, nb)."""
        ref = self.mesh.to_reference(cell, points)
        return self.cell_basis.evaluate(ref) / math.sqrt(2.0 * self.mesh.cell_area[cell])

    def evaluate_cell_gradient(self, cell: int, points: np.ndarray) -> np.ndarray:
        """Physical basis gradients at arbitrary points of ``cell``, shape (n, nb, 2)."""
        ref = self.mesh.to_reference(cell, points)
        grad = self.cell_basis.gradient(ref) @ self.mesh.inverse_jacobian[cell]
        return grad / math.sqrt(2.0 * self.mesh.cell_area[cell])

    def evaluate_face(self, face: int, t: np.ndarray) -> np.ndarray:
        """Physical face basis at parameters t in [0, 1] along the face."""
        return self.face_basis.evaluate(t) / math.sqrt(self.mesh.face_length[face])
