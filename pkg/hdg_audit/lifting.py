"""
Crouzeix-Raviart lift of face-constant skeleton data and the local boundary
lift G^{dK}, together with the estimates they satisfy as checkable predicates.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .fields import (
    CellField,
    HybridSpace,
    SkeletonField,
    VectorCellField,
    cell_trace_coeffs,
    validate_boundary_subset,
)
from .mesh import Mesh
from .utils import FieldMismatchError

logger = logging.getLogger(__name__)

REFERENCE_BARYCENTRIC_GRADIENTS = np.array([[-1.0, 1.0, 0.0], [-1.0, 0.0, 1.0]])


@dataclass
class CRField:
    """
    Piecewise-affine nonconforming function given by its value at every face
    midpoint. On a cell with local faces j (opposite vertex j) it reads
    w = sum_j mu_j (1 - 2 lambda_j).
    """
    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(-1)
        if self.values.shape != (self.mesh.n_faces,):
            raise FieldMismatchError(
                f"CR field needs {self.mesh.n_faces} face values, got {self.values.shape[0]}"
            )

    def local_values(self) -> np.ndarray:
        """Midpoint values on each cell's local faces, shape (nc, 3)."""
        return self.values[self.mesh.cell_faces]

    def gradients(self) -> np.ndarray:
        """Constant per-cell gradients, shape (nc, 2)."""
        return -2.0 * np.einsum("kdj,kj->kd", barycentric_gradients(self.mesh), self.local_values())

    def vertex_values(self) -> np.ndarray:
        """Per-cell values at the three vertices: sum(mu) - 2 mu_i at vertex i."""
        mu = self.local_values()
        return mu.sum(axis=1, keepdims=True) - 2.0 * mu


def barycentric_gradients(mesh: Mesh) -> np.ndarray:
    """Gradients of the barycentric coordinates, shape (nc, 2, 3)."""
    return np.einsum("krd,rj->kdj", mesh.inverse_jacobian, REFERENCE_BARYCENTRIC_GRADIENTS)


def cr_lift(mu: SkeletonField) -> CRField:
    """Lift a face-constant skeleton field to the CR function with the same face means."""
    if mu.k != 0:
        raise FieldMismatchError(f"the CR lift takes piecewise-constant skeleton data, got degree {mu.k}")
    mesh = mu.space.mesh
    return CRField(mesh, mu.coeffs[:, 0] / np.sqrt(mesh.face_length))


def cr_seminorm_H1(w: CRField) -> float:
    grad = w.gradients()
    return float(np.sqrt(np.sum(w.mesh.cell_area * np.sum(grad ** 2, axis=1))))


def cr_integral_domain(w: CRField) -> float:
    # an affine function's cell mean is its centroid value, the mean of the midpoint values
    return float(np.sum(w.mesh.cell_area / 3.0 * w.local_values().sum(axis=1)))


def cr_norm_cells(w: CRField) -> float:
    """L2 norm over the domain; the edge-midpoint rule is exact for quadratics."""
    return float(np.sqrt(np.sum(w.mesh.cell_area / 3.0 * np.sum(w.local_values() ** 2, axis=1))))


def _edge_square_integrals(w: CRField) -> np.ndarray:
    """Integral of w^2 along each local face of each cell, shape (nc, 3)."""
    mesh = w.mesh
    vertex = w.vertex_values()
    # face j joins vertices j+1 and j+2
    a = np.roll(vertex, -1, axis=1)
    b = np.roll(vertex, -2, axis=1)
    return mesh.cell_edge_lengths * (a ** 2 + a * b + b ** 2) / 3.0


def cr_norm_boundary(w: CRField, faces: Optional[Sequence[int]] = None) -> float:
    """L2 norm of w over boundary faces (all of them by default)."""
    mesh = w.mesh
    faces = mesh.boundary_faces() if faces is None else validate_boundary_subset(mesh, faces)
    squares = _edge_square_integrals(w)
    total = 0.0
    for f in faces:
        cell = mesh.face_cells[f][0]
        total += squares[cell, mesh.local_face_index(cell, f)]
    return float(np.sqrt(total))


def cr_face_integrals(w: CRField) -> np.ndarray:
    return w.mesh.face_length * w.values


def cr_boundary_integral(w: CRField, faces: Sequence[int]) -> float:
    faces = validate_boundary_subset(w.mesh, faces)
    return float(np.sum(cr_face_integrals(w)[faces]))


def cr_to_cell_field(w: CRField, space: HybridSpace) -> CellField:
    """L2 projection of w into U_h^k, exact for k >= 1."""
    if space.mesh is not w.mesh:
        raise FieldMismatchError("CR field and space live on different meshes")
    kernels = space.kernels
    xi = kernels.cell_rule.points
    lam = np.column_stack([1.0 - xi[:, 0] - xi[:, 1], xi[:, 0], xi[:, 1]])  # (nq, 3)
    values = w.local_values() @ (1.0 - 2.0 * lam).T  # (nc, nq)
    return CellField(space, np.einsum("kq,kq,kqa->ka", kernels.cell_weights, values, kernels.cell_values))


def restriction_estimate_check(mu: SkeletonField, cell: int) -> Tuple[float, float]:
    """
    Compare ||mu||^2 and ||L_CR(mu)||^2 on the boundary of one cell.

    Returns:
        (lhs, rhs); lhs <= rhs holds for every face-constant mu
    """
    w = cr_lift(mu)
    mesh = mu.space.mesh
    lhs = float(np.sum(mesh.cell_edge_lengths[cell] * w.local_values()[cell] ** 2))
    rhs = float(np.sum(_edge_square_integrals(w)[cell]))
    return lhs, rhs


def boundary_lift(space: HybridSpace, cell: int, face_data: np.ndarray) -> np.ndarray:
    """
    Boundary lift G of face data on one cell.

    Solves (G, omega)_K = <mu, omega . n>_{dK} for all omega in P^k(K)^2; the
    physical cell mass is the identity, so G is read off directly.

    Args:
        space: Hybrid space
        cell: Cell id
        face_data: Face-basis coefficients on the three local faces, shape (3, k+1)

    Returns:
        Coefficients of G, shape (2, nb)
    """
    face_data = np.asarray(face_data, dtype=float).reshape(3, space.n_face_basis)
    return np.einsum("jdac,jc->da", space.kernels.normal_coupling[cell], face_data)


def boundary_lift_field(uhat: SkeletonField, cell: int) -> np.ndarray:
    return boundary_lift(uhat.space, cell, uhat.coeffs[uhat.space.mesh.cell_faces[cell]])


def boundary_lift_all(space: HybridSpace, face_data: np.ndarray) -> np.ndarray:
    """Boundary lift on every cell at once; face_data has shape (nc, 3, k+1)."""
    return np.einsum("kjdac,kjc->kda", space.kernels.normal_coupling, face_data)


def boundary_lift_matrix(space: HybridSpace, cell: int) -> np.ndarray:
    """Matrix of mu (3*(k+1)) -> G (2*nb) on one cell."""
    coupling = space.kernels.normal_coupling[cell]  # (3, 2, nb, mf)
    return coupling.transpose(1, 2, 0, 3).reshape(2 * space.n_cell_basis, 3 * space.n_face_basis)


def lift_bound_constant(space: HybridSpace, cell: int) -> float:
    """Sharp C in ||G(mu)||^2 <= C h_K^{-1} ||mu||^2_{dK} on one cell."""
    sigma = np.linalg.norm(boundary_lift_matrix(space, cell), ord=2)
    return float(space.mesh.cell_diameter[cell] * sigma ** 2)


def gradient_identity_check(u: CellField, uhat: SkeletonField, p: VectorCellField) -> np.ndarray:
    """
    Per-cell L2 norm of grad u + p - G(u - uhat).

    Vanishes (up to round-off) when p is the local flux of (u, uhat).
    """
    if not (u.k == uhat.k == p.k) or not (u.space.mesh is uhat.space.mesh is p.space.mesh):
        raise FieldMismatchError(f"mismatched fields: u k={u.k}, uhat k={uhat.k}, p k={p.k}")
    kernels = u.space.kernels
    mismatch = cell_trace_coeffs(u) - uhat.coeffs[u.space.mesh.cell_faces]
    grad_u = np.einsum("kdab,ka->kdb", kernels.div_coupling, u.coeffs)
    residual = grad_u + p.coeffs - boundary_lift_all(u.space, mismatch)
    return np.linalg.norm(residual.reshape(residual.shape[0], -1), axis=1)
