"""
Coefficient containers for the hybrid space (u_h, uhat_h, p_h) and the norms,
jumps, averages and integrals built from them.

All fields are expanded in the physical orthonormal bases of ``polybasis``,
so L2 norms are Euclidean norms of coefficient blocks.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from .mesh import BoundaryTag, Mesh
from .polybasis import LocalKernels, quad_segment, quad_triangle
from .utils import (
    EmptyBoundarySubsetError,
    FieldMismatchError,
    InteriorFaceRequiredError,
)

logger = logging.getLogger(__name__)

ScalarFunction = Callable[[np.ndarray, np.ndarray], np.ndarray]

COUNTING_MODES = ("once", "hdg")
BOUNDARY_SUBSETS = ("all", "left", "right", "bottom", "top", "dirichlet", "neumann")


class HybridSpace:
    """The product space U_h^k x F_h^k (and V_h^k) on one mesh."""

    def __init__(self, mesh: Mesh, k: int, quad_degree: Optional[int] = None):
        self.mesh = mesh
        self.k = k
        self.kernels = LocalKernels(mesh, k, quad_degree)
        self._siblings: Dict[int, "HybridSpace"] = {k: self}

    @property
    def n_cell_basis(self) -> int:
        return self.kernels.n_cell_dofs

    @property
    def n_face_basis(self) -> int:
        return self.kernels.n_face_dofs

    @property
    def n_cell_dofs(self) -> int:
        return self.mesh.n_cells * self.n_cell_basis

    @property
    def n_face_dofs(self) -> int:
        return self.mesh.n_faces * self.n_face_basis

    def with_degree(self, k: int) -> "HybridSpace":
        """The space of degree k on the same mesh, shared between callers."""
        if k not in self._siblings:
            sibling = HybridSpace(self.mesh, k)
            sibling._siblings = self._siblings
            self._siblings[k] = sibling
        return self._siblings[k]

    def __repr__(self) -> str:
        return f"HybridSpace(k={self.k}, {self.mesh})"


def _check_shape(coeffs: np.ndarray, shape: tuple, kind: str) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape != shape:
        raise FieldMismatchError(f"{kind} coefficients have shape {coeffs.shape}, expected {shape}")
    return coeffs


@dataclass
class CellField:
    space: HybridSpace
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = _check_shape(
            self.coeffs, (self.space.mesh.n_cells, self.space.n_cell_basis), "cell field"
        )

    @property
    def k(self) -> int:
        return self.space.k

    @classmethod
    def zeros(cls, space: HybridSpace) -> "CellField":
        return cls(space, np.zeros((space.mesh.n_cells, space.n_cell_basis)))


@dataclass
class SkeletonField:
    space: HybridSpace
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = _check_shape(
            self.coeffs, (self.space.mesh.n_faces, self.space.n_face_basis), "skeleton field"
        )

    @property
    def k(self) -> int:
        return self.space.k

    @classmethod
    def zeros(cls, space: HybridSpace) -> "SkeletonField":
        return cls(space, np.zeros((space.mesh.n_faces, space.n_face_basis)))


@dataclass
class VectorCellField:
    space: HybridSpace
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = _check_shape(
            self.coeffs, (self.space.mesh.n_cells, 2, self.space.n_cell_basis), "vector cell field"
        )

    @property
    def k(self) -> int:
        return self.space.k

    def component(self, d: int) -> CellField:
        return CellField(self.space, self.coeffs[:, d, :])


Field = Union[CellField, SkeletonField, VectorCellField]


def _same_space(a: Field, b: Field) -> None:
    if a.space.mesh is not b.space.mesh or a.k != b.k:
        raise FieldMismatchError(
            f"fields live on different spaces: k={a.k} vs k={b.k}"
            + ("" if a.space.mesh is b.space.mesh else ", different meshes")
        )


def norm_L2_cells(u: Union[CellField, VectorCellField]) -> float:
    return float(np.linalg.norm(u.coeffs))


def seminorm_H1_broken(u: CellField) -> float:
    """Root-sum-square of the per-cell gradient norms."""
    energy = np.einsum("ka,kab,kb->", u.coeffs, u.space.kernels.gradgrad, u.coeffs)
    return float(np.sqrt(max(energy, 0.0)))


def trace_norm_skeleton(u: CellField) -> float:
    """L2 norm of the cell traces over every cell boundary; interior faces count from both sides."""
    energy = np.einsum("ka,kjab,kb->", u.coeffs, u.space.kernels.cell_face_mass, u.coeffs)
    return float(np.sqrt(max(energy, 0.0)))


def skeleton_weights(mesh: Mesh, counting: str) -> np.ndarray:
    if counting not in COUNTING_MODES:
        raise ValueError(f"unknown counting '{counting}'; expected one of {COUNTING_MODES}")
    weights = np.ones(mesh.n_faces)
    if counting == "hdg":
        weights[mesh.interior_faces()] = 2.0
    return weights


def norm_skeleton(uhat: SkeletonField, counting: str = "once") -> float:
    weights = skeleton_weights(uhat.space.mesh, counting)
    return float(np.sqrt(weights @ np.sum(uhat.coeffs ** 2, axis=1)))


def diff_norm_skeleton(u: CellField, uhat: SkeletonField) -> float:
    """||u - uhat|| over all cell boundaries, interior faces counted from both sides."""
    _same_space(u, uhat)
    kernels = u.space.kernels
    c = u.coeffs
    d = uhat.coeffs[u.space.mesh.cell_faces]  # (nc, 3, mf)
    energy = (
        np.einsum("ka,kjab,kb->", c, kernels.cell_face_mass, c)
        - 2.0 * np.einsum("ka,kjac,kjc->", c, kernels.trace, d)
        + np.sum(d ** 2)
    )
    return float(np.sqrt(max(energy, 0.0)))


def face_integral_of_cell(u: CellField, cell: int, local_face: int) -> float:
    return float(u.space.kernels.cell_face_integral[cell, local_face] @ u.coeffs[cell])


def jump_integral(u: CellField, face: int) -> np.ndarray:
    """Integral over an interior face of u+ n+ + u- n-, with + the lower-indexed cell."""
    mesh = u.space.mesh
    if not mesh.is_interior(face):
        raise InteriorFaceRequiredError(f"face {face} is a boundary face; jumps need an interior face")
    plus, minus = mesh.face_cells[face]
    integral_plus = face_integral_of_cell(u, plus, mesh.local_face_index(plus, face))
    integral_minus = face_integral_of_cell(u, minus, mesh.local_face_index(minus, face))
    return mesh.face_normal[face] * (integral_plus - integral_minus)


def face_average(uhat: SkeletonField) -> SkeletonField:
    """
    Piecewise-constant skeleton field holding the mean of uhat on each face.

    The degree-0 physical face basis is |e|^{-1/2}, so the mean value a is
    stored as the coefficient a |e|^{1/2}, which is uhat's own first coefficient.
    """
    space0 = uhat.space.with_degree(0)
    return SkeletonField(space0, uhat.coeffs[:, :1].copy())


def face_mean_values(uhat: SkeletonField) -> np.ndarray:
    return uhat.coeffs[:, 0] / np.sqrt(uhat.space.mesh.face_length)


def integral_domain(u: CellField) -> float:
    return float(np.einsum("ka,ka->", u.space.kernels.cell_integral, u.coeffs))


def boundary_subset(mesh: Mesh, name: str) -> np.ndarray:
    """
    Face ids of a named part of the boundary of the unit square.

    Args:
        mesh: Mesh of the unit square
        name: One of all, left, right, bottom, top, dirichlet, neumann
    """
    name = name.lower()
    if name not in BOUNDARY_SUBSETS:
        raise EmptyBoundarySubsetError(
            f"unknown boundary subset '{name}'; valid names: {', '.join(BOUNDARY_SUBSETS)}"
        )
    if name == "dirichlet":
        return mesh.boundary_faces(BoundaryTag.DIRICHLET)
    if name == "neumann":
        return mesh.boundary_faces(BoundaryTag.NEUMANN)
    faces = mesh.boundary_faces()
    if name == "all":
        return faces
    mid = mesh.face_midpoint[faces]
    axis, value = {"left": (0, 0.0), "right": (0, 1.0), "bottom": (1, 0.0), "top": (1, 1.0)}[name]
    return faces[np.abs(mid[:, axis] - value) < 1e-12]


def validate_boundary_subset(mesh: Mesh, faces: Sequence[int]) -> np.ndarray:
    faces = np.asarray(faces, dtype=np.int64).reshape(-1)
    if faces.size == 0:
        raise EmptyBoundarySubsetError("boundary subset is empty; a set of positive measure is required")
    interior = [int(f) for f in faces if mesh.is_interior(int(f))]
    if interior:
        raise EmptyBoundarySubsetError(f"faces {interior} are interior, not boundary faces")
    return faces


def boundary_integral_vector(space: HybridSpace, faces: Sequence[int], of: str) -> np.ndarray:
    """
    Linear functional x -> integral over the faces, on the dof vector [u; uhat].

    Args:
        space: Hybrid space
        faces: Boundary face ids
        of: 'u' for the cell trace, 'uhat' for the skeleton field
    """
    mesh, kernels = space.mesh, space.kernels
    faces = validate_boundary_subset(mesh, faces)
    vec = np.zeros(space.n_cell_dofs + space.n_face_dofs)
    nb, mf = space.n_cell_basis, space.n_face_basis
    for f in faces:
        if of == "uhat":
            start = space.n_cell_dofs + f * mf
            vec[start:start + mf] += kernels.face_integral[f]
        else:
            cell = mesh.face_cells[f][0]
            j = mesh.local_face_index(cell, f)
            vec[cell * nb:(cell + 1) * nb] += kernels.cell_face_integral[cell, j]
    return vec


def integral_boundary_subset(field: Union[CellField, SkeletonField], faces: Sequence[int]) -> float:
    """Integral over a union of boundary faces of uhat, or of the trace of u."""
    space = field.space
    if isinstance(field, SkeletonField):
        faces = validate_boundary_subset(space.mesh, faces)
        return float(np.sum(space.kernels.face_integral[faces] * field.coeffs[faces]))
    vec = boundary_integral_vector(space, faces, "u")
    return float(vec[:space.n_cell_dofs] @ field.coeffs.ravel())


def cell_quadrature(space: HybridSpace, quad_degree: Optional[int]):
    kernels = space.kernels
    if quad_degree is None or quad_degree == kernels.quad_degree:
        return kernels.cell_points, kernels.cell_weights, kernels.cell_values
    mesh = space.mesh
    rule = quad_triangle(quad_degree)
    origin = mesh.vertices[mesh.cells[:, 0]]
    points = origin[:, None, :] + np.einsum("kdr,qr->kqd", mesh.jacobian, rule.points)
    weights = 2.0 * mesh.cell_area[:, None] * rule.weights[None, :]
    values = kernels.cell_basis.evaluate(rule.points)[None] / np.sqrt(2.0 * mesh.cell_area)[:, None, None]
    return points, weights, values


def face_quadrature(space: HybridSpace, quad_degree: Optional[int]):
    kernels = space.kernels
    if quad_degree is None or quad_degree == kernels.quad_degree:
        return kernels.face_points, kernels.face_weights, kernels.face_values
    mesh = space.mesh
    rule = quad_segment(quad_degree)
    fv = mesh.vertices[mesh.face_vertices]
    points = fv[:, None, 0, :] + rule.points[None, :, None] * (fv[:, 1] - fv[:, 0])[:, None, :]
    weights = mesh.face_length[:, None] * rule.weights[None, :]
    values = kernels.face_basis.evaluate(rule.points)[None] / np.sqrt(mesh.face_length)[:, None, None]
    return points, weights, values


def project_cells(space: HybridSpace, func: ScalarFunction, quad_degree: Optional[int] = None) -> CellField:
    """L2 projection of func(x, y) onto U_h^k."""
    points, weights, values = cell_quadrature(space, quad_degree)
    f = np.asarray(func(points[..., 0], points[..., 1]), dtype=float) * np.ones(points.shape[:-1])
    return CellField(space, np.einsum("kq,kq,kqa->ka", weights, f, values))


def project_skeleton(
    space: HybridSpace,
    func: ScalarFunction,
    faces: Optional[Sequence[int]] = None,
    quad_degree: Optional[int] = None,
) -> SkeletonField:
    """Face-wise L2 projection of func(x, y) onto F_h^k; faces outside ``faces`` stay zero."""
    points, weights, values = face_quadrature(space, quad_degree)
    f = np.asarray(func(points[..., 0], points[..., 1]), dtype=float) * np.ones(points.shape[:-1])
    coeffs = np.einsum("fq,fq,fqa->fa", weights, f, values)
    if faces is not None:
        mask = np.zeros(space.mesh.n_faces, dtype=bool)
        mask[np.asarray(faces, dtype=np.int64)] = True
        coeffs[~mask] = 0.0
    return SkeletonField(space, coeffs)


def cell_trace_coeffs(u: CellField) -> np.ndarray:
    """Face-basis coefficients of each cell's trace, shape (nc, 3, k+1)."""
    return np.einsum("kjac,ka->kjc", u.space.kernels.trace, u.coeffs)


def trace_of(u: CellField) -> SkeletonField:
    """Projection of the trace of u onto F_h^k, averaging the two sides of interior faces."""
    mesh = u.space.mesh
    local = cell_trace_coeffs(u)
    total = np.zeros((mesh.n_faces, u.space.n_face_basis))
    count = np.zeros(mesh.n_faces)
    np.add.at(total, mesh.cell_faces.ravel(), local.reshape(-1, local.shape[-1]))
    np.add.at(count, mesh.cell_faces.ravel(), 1.0)
    return SkeletonField(u.space, total / count[:, None])


def random_cell_field(space: HybridSpace, rng: np.random.Generator) -> CellField:
    return CellField(space, rng.standard_normal((space.mesh.n_cells, space.n_cell_basis)))


def random_skeleton_field(space: HybridSpace, rng: np.random.Generator) -> SkeletonField:
    return SkeletonField(space, rng.standard_normal((space.mesh.n_faces, space.n_face_basis)))


def split_dofs(space: HybridSpace, x: np.ndarray):
    """Split a concatenated dof vector [u; uhat] into its two fields."""
    x = np.asarray(x, dtype=float)
    u = CellField(space, x[:space.n_cell_dofs].reshape(space.mesh.n_cells, -1))
    uhat = SkeletonField(space, x[space.n_cell_dofs:].reshape(space.mesh.n_faces, -1))
    return u, uhat


def join_dofs(u: CellField, uhat: SkeletonField) -> np.ndarray:
    _same_space(u, uhat)
    return np.concatenate([u.coeffs.ravel(), uhat.coeffs.ravel()])


def to_csv_rows(f: Field) -> List[List[str]]:
    """Rows of the debugging schema kind,k,block_id,c0,c1,..."""
    kind = {CellField: "cell", SkeletonField: "skeleton", VectorCellField: "vector"}[type(f)]
    blocks = f.coeffs.reshape(f.coeffs.shape[0], -1)
    return [[kind, str(f.k), str(i)] + [repr(float(c)) for c in block] for i, block in enumerate(blocks)]
