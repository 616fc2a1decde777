"""
HDG discretization of the mixed-boundary Poisson problem

    p + grad u = 0,  div p = f  in the unit square,
    u = u_D on the Dirichlet part,  p . n = -u_N on the Neumann part,

with numerical flux p_hat . n = p . n + tau (u - u_hat). Cell unknowns are
condensed onto the skeleton; Dirichlet skeleton dofs are eliminated and set
to the face-wise L2 projection of u_D.
"""
import math
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Dict, List, Optional, Union

import numpy as np
import scipy.sparse as sp

from .fields import (
    CellField,
    HybridSpace,
    SkeletonField,
    VectorCellField,
    cell_trace_coeffs,
    diff_norm_skeleton,
    norm_L2_cells,
    project_cells,
    project_skeleton,
    cell_quadrature,
    face_quadrature,
)
from .linalg import SparseSymmetric, sparse_solve, sparse_solve_spd
from .mesh import BoundaryTag, Mesh, build_structured, refine_times
from .utils import (
    FieldMismatchError,
    GaugeRequiredError,
    SingularLocalBlockError,
    UnknownProblemError,
    log_duration,
)

logger = logging.getLogger(__name__)

ScalarFunction = Callable[[np.ndarray, np.ndarray], np.ndarray]
ScalarData = Union[ScalarFunction, CellField, SkeletonField, None]

GAUGES = ("none", "skeleton_mean_zero")
ROUGH_QUAD_DEGREE = 20


@dataclass
class BVPData:
    """
    Data of the boundary value problem. Each datum is a callable f(x, y), a
    field already expanded in the hybrid space, or None for zero.
    """
    f: ScalarData = None
    u_D: ScalarData = None
    u_N: ScalarData = None
    tau: float = 1.0
    quad_degree: Optional[int] = None


@dataclass
class CondensedSystem:
    space: HybridSpace
    data: BVPData
    matrix: sp.csr_matrix
    rhs: np.ndarray
    dirichlet_dofs: np.ndarray
    free_dofs: np.ndarray
    uhat_dirichlet: np.ndarray
    cell_load: np.ndarray
    neumann_load: np.ndarray
    local_solution: np.ndarray
    local_lift: np.ndarray

    @property
    def free_matrix(self) -> sp.csr_matrix:
        return self.matrix[self.free_dofs][:, self.free_dofs]

    @property
    def free_rhs(self) -> np.ndarray:
        coupling = self.matrix[self.free_dofs][:, self.dirichlet_dofs] @ self.uhat_dirichlet[self.dirichlet_dofs]
        return self.rhs[self.free_dofs] - coupling

    @property
    def pure_neumann(self) -> bool:
        return self.dirichlet_dofs.size == 0


@dataclass
class Solution:
    p: VectorCellField
    u: CellField
    uhat: SkeletonField
    system: CondensedSystem
    diagnostics: Dict[str, float] = field(default_factory=dict)

    @property
    def space(self) -> HybridSpace:
        return self.u.space


@dataclass
class ResidualReport:
    local_flux: float
    local_balance: float
    transmission: float
    scale: float

    @property
    def max_relative(self) -> float:
        return max(self.local_flux, self.local_balance, self.transmission) / self.scale


@dataclass
class EnergyCheck:
    lhs: float
    rhs: float
    generalized_rhs: float


def _project_cell_datum(space: HybridSpace, datum: ScalarData, quad_degree: Optional[int]) -> np.ndarray:
    if datum is None:
        return np.zeros((space.mesh.n_cells, space.n_cell_basis))
    if isinstance(datum, CellField):
        if datum.space.mesh is not space.mesh or datum.k != space.k:
            raise FieldMismatchError("source field does not live on the solver space")
        return datum.coeffs
    return project_cells(space, datum, quad_degree).coeffs


def _project_face_datum(space: HybridSpace, datum: ScalarData, faces: np.ndarray, quad_degree: Optional[int]) -> np.ndarray:
    coeffs = np.zeros((space.mesh.n_faces, space.n_face_basis))
    if datum is None or faces.size == 0:
        return coeffs
    if isinstance(datum, SkeletonField):
        if datum.space.mesh is not space.mesh or datum.k != space.k:
            raise FieldMismatchError("boundary datum does not live on the solver space")
        coeffs[faces] = datum.coeffs[faces]
        return coeffs
    return project_skeleton(space, datum, faces, quad_degree).coeffs


def _local_operators(space: HybridSpace, tau: float):
    """Per-cell A (nb x nb), B (nb x 3mf) and C (3mf x 3mf) of the condensation."""
    kernels = space.kernels
    nc, nb, mf = space.mesh.n_cells, space.n_cell_basis, space.n_face_basis
    d = kernels.div_coupling  # [k, d, a, b] = (d_d phi_a, phi_b)
    e = kernels.normal_coupling  # [k, j, d, a, c]
    a = np.einsum("kdab,kdac->kbc", d, d) + tau * kernels.cell_face_mass.sum(axis=1)
    b = np.einsum("kdab,kjdac->kbjc", d, e) + tau * kernels.trace.transpose(0, 2, 1, 3)
    b = b.reshape(nc, nb, 3 * mf)
    ef = e.transpose(0, 3, 2, 1, 4).reshape(nc, nb * 2, 3 * mf)  # rows (a, d), columns (j, c)
    c = np.einsum("kri,krj->kij", ef, ef) + tau * np.eye(3 * mf)[None]
    return a, b, c


def _local_dof_index(space: HybridSpace) -> np.ndarray:
    mf = space.n_face_basis
    return (space.mesh.cell_faces[:, :, None] * mf + np.arange(mf)[None, None, :]).reshape(space.mesh.n_cells, -1)


@log_duration
def assemble_condensed(space: HybridSpace, data: BVPData) -> CondensedSystem:
    """
    Condense the local (p, u) unknowns onto the skeleton.

    Per cell, u = A^{-1}(F + B uhat) and the skeleton matrix is
    M_K = C - B' A^{-1} B; the transmission right-hand side is
    sum_K B' A^{-1} F plus the Neumann load <u_N, psi>.
    """
    if not data.tau > 0:
        raise SingularLocalBlockError(f"stabilization tau must be positive, got {data.tau}")
    mesh = space.mesh
    a, b, c = _local_operators(space, data.tau)
    try:
        np.linalg.cholesky(a)
    except np.linalg.LinAlgError as e:
        raise SingularLocalBlockError(f"local block is not positive definite: {e}") from e

    load = _project_cell_datum(space, data.f, data.quad_degree)
    dirichlet = mesh.boundary_faces(BoundaryTag.DIRICHLET)
    neumann = mesh.boundary_faces(BoundaryTag.NEUMANN)
    neumann_load = _project_face_datum(space, data.u_N, neumann, data.quad_degree)
    uhat_dirichlet = _project_face_datum(space, data.u_D, dirichlet, data.quad_degree)

    solved = np.linalg.solve(a, np.concatenate([load[:, :, None], b], axis=2))
    local_solution, local_lift = solved[:, :, 0], solved[:, :, 1:]
    local_matrix = c - np.einsum("kai,kaj->kij", b, local_lift)
    local_rhs = np.einsum("kai,ka->ki", b, local_solution)

    index = _local_dof_index(space)
    n = space.n_face_dofs
    rows = np.repeat(index, index.shape[1], axis=1).ravel()
    cols = np.tile(index, (1, index.shape[1])).ravel()
    matrix = sp.coo_matrix((local_matrix.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    matrix = 0.5 * (matrix + matrix.T)
    rhs = np.zeros(n)
    np.add.at(rhs, index.ravel(), local_rhs.ravel())
    rhs += neumann_load.ravel()

    mf = space.n_face_basis
    dirichlet_dofs = (dirichlet[:, None] * mf + np.arange(mf)).ravel()
    free_mask = np.ones(n, dtype=bool)
    free_mask[dirichlet_dofs] = False
    logger.info(
        f"Assembled condensed system k={space.k} on {mesh}: "
        f"{int(free_mask.sum())} free / {dirichlet_dofs.size} Dirichlet skeleton dofs"
    )
    return CondensedSystem(
        space=space,
        data=data,
        matrix=matrix.tocsr(),
        rhs=rhs,
        dirichlet_dofs=dirichlet_dofs,
        free_dofs=np.flatnonzero(free_mask),
        uhat_dirichlet=uhat_dirichlet.ravel(),
        cell_load=load,
        neumann_load=neumann_load,
        local_solution=local_solution,
        local_lift=local_lift,
    )


def _gauge_vector(space: HybridSpace) -> np.ndarray:
    """Coefficients of uhat -> integral of uhat over the whole boundary."""
    vec = np.zeros(space.n_face_dofs)
    faces = space.mesh.boundary_faces()
    vec[faces * space.n_face_basis] = space.kernels.face_integral[faces, 0]
    return vec


@log_duration
def solve(system: CondensedSystem, gauge: str = "none") -> Solution:
    """
    Solve the condensed system and recover (p, u) cell by cell.

    Args:
        system: Output of assemble_condensed
        gauge: 'none', or 'skeleton_mean_zero' to fix the constant of a pure
            Neumann problem by requiring the integral of uhat over the boundary to vanish
    """
    if gauge not in GAUGES:
        raise ValueError(f"unknown gauge '{gauge}'; expected one of {GAUGES}")
    space = system.space
    uhat = system.uhat_dirichlet.copy()
    diagnostics: Dict[str, float] = {}

    if system.pure_neumann:
        if gauge != "skeleton_mean_zero":
            raise GaugeRequiredError(
                "pure Neumann problem is singular; pass gauge='skeleton_mean_zero'"
            )
        g = _gauge_vector(space)
        bordered = sp.bmat([[system.matrix, sp.csr_matrix(g[:, None])], [sp.csr_matrix(g[None, :]), None]])
        report = sparse_solve(bordered, np.append(system.rhs, 0.0))
        uhat = report.x[:-1]
        multiplier = float(report.x[-1])
        diagnostics["multiplier"] = multiplier
        if abs(multiplier) > 1e-8 * max(1.0, float(np.linalg.norm(system.rhs))):
            logger.warning(f"Pure Neumann multiplier {multiplier:.3e} is not small; data may be incompatible")
    else:
        report = sparse_solve_spd(SparseSymmetric.from_matrix(system.free_matrix), system.free_rhs)
        uhat[system.free_dofs] = report.x
        diagnostics["min_pivot"] = report.min_pivot
    diagnostics["solver_residual"] = report.residual

    uhat_field = SkeletonField(space, uhat.reshape(space.mesh.n_faces, -1))
    local = uhat[_local_dof_index(space)]
    u = CellField(space, system.local_solution + np.einsum("kaj,kj->ka", system.local_lift, local))
    p = flux_from_primal(u, uhat_field)
    solution = Solution(p=p, u=u, uhat=uhat_field, system=system, diagnostics=diagnostics)
    check = residuals(solution)
    diagnostics["residual"] = check.max_relative
    logger.info(f"Solved k={space.k}, tau={system.data.tau}: relative residual {check.max_relative:.2e}")
    return solution


def solve_problem(space: HybridSpace, data: BVPData, gauge: str = "none") -> Solution:
    solution = solve(assemble_condensed(space, data), gauge)
    if data.quad_degree is not None:
        solution.diagnostics["quadrature_gap"] = data_quadrature_gap(space, data)
    return solution


def flux_from_primal(u: CellField, uhat: SkeletonField) -> VectorCellField:
    """
    Local flux p from (u, uhat): (p, q)_K = (u, div q)_K - <uhat, q . n>_{dK}.

    With the identity cell mass this is p^d = D^d u - sum_j n_d T_j uhat_j.
    """
    if u.k != uhat.k or u.space.mesh is not uhat.space.mesh:
        raise FieldMismatchError(f"u (k={u.k}) and uhat (k={uhat.k}) live on different spaces")
    kernels = u.space.kernels
    local = uhat.coeffs[u.space.mesh.cell_faces]  # (nc, 3, mf)
    coeffs = np.einsum("kdba,ka->kdb", kernels.div_coupling, u.coeffs)
    coeffs -= np.einsum("kjdac,kjc->kda", kernels.normal_coupling, local)
    return VectorCellField(u.space, coeffs)


def flux_matrix(space: HybridSpace) -> sp.csr_matrix:
    """Sparse matrix of the linear map [u; uhat] -> p (flattened as (cell, d, a))."""
    mesh = space.mesh
    kernels = space.kernels
    nc, nb, mf = mesh.n_cells, space.n_cell_basis, space.n_face_basis
    rows, cols, vals = [], [], []
    p_index = np.arange(nc * 2 * nb).reshape(nc, 2, nb)
    u_index = np.arange(nc * nb).reshape(nc, nb)
    # cell part: p[k, d, b] += D[k, d, b, a] u[k, a]
    rows.append(np.broadcast_to(p_index[:, :, :, None], (nc, 2, nb, nb)).ravel())
    cols.append(np.broadcast_to(u_index[:, None, None, :], (nc, 2, nb, nb)).ravel())
    vals.append(kernels.div_coupling.ravel())
    # skeleton part: p[k, d, a] -= E[k, j, d, a, c] uhat[f(k, j), c]
    uhat_index = space.n_cell_dofs + mesh.cell_faces[:, :, None] * mf + np.arange(mf)  # (nc, 3, mf)
    rows.append(np.broadcast_to(p_index[:, None, :, :, None], (nc, 3, 2, nb, mf)).ravel())
    cols.append(np.broadcast_to(uhat_index[:, :, None, None, :], (nc, 3, 2, nb, mf)).ravel())
    vals.append(-kernels.normal_coupling.ravel())
    n_total = space.n_cell_dofs + space.n_face_dofs
    return sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(nc * 2 * nb, n_total),
    ).tocsr()


def _normal_flux_moments(solution: Solution) -> np.ndarray:
    """<p_hat . n, psi_c> on each local face of each cell, shape (nc, 3, mf)."""
    space, tau = solution.space, solution.system.data.tau
    kernels = space.kernels
    local = solution.uhat.coeffs[space.mesh.cell_faces]
    flux = np.einsum("kjdac,kda->kjc", kernels.normal_coupling, solution.p.coeffs)
    return flux + tau * (cell_trace_coeffs(solution.u) - local)


def residuals(solution: Solution) -> ResidualReport:
    """Residuals of the local flux and balance equations and of the transmission condition."""
    space, system = solution.space, solution.system
    kernels, mesh, tau = space.kernels, space.mesh, system.data.tau
    c, p = solution.u.coeffs, solution.p.coeffs
    local = solution.uhat.coeffs[mesh.cell_faces]

    flux = p - flux_from_primal(solution.u, solution.uhat).coeffs
    # -(p, grad v) + <p . n, v> + tau <u - uhat, v> - (f, v)
    balance = (
        -np.einsum("kdba,kda->kb", kernels.div_coupling, p)
        + np.einsum("kjd,kjab,kda->kb", mesh.cell_normals, kernels.cell_face_mass, p)
        + tau * (np.einsum("kjab,ka->kb", kernels.cell_face_mass, c) - np.einsum("kjac,kjc->ka", kernels.trace, local))
        - system.cell_load
    )

    moments = _normal_flux_moments(solution)
    total = np.zeros((mesh.n_faces, space.n_face_basis))
    np.add.at(total, mesh.cell_faces.ravel(), moments.reshape(-1, space.n_face_basis))
    total += system.neumann_load
    total[mesh.boundary_faces(BoundaryTag.DIRICHLET)] = 0.0

    scale = max(
        1.0,
        float(np.linalg.norm(system.cell_load)),
        float(np.linalg.norm(system.neumann_load)),
        float(np.linalg.norm(p)),
        float(np.linalg.norm(c)),
        float(np.linalg.norm(solution.uhat.coeffs)),
    ) * max(1.0, tau)
    return ResidualReport(
        local_flux=float(np.max(np.linalg.norm(flux.reshape(mesh.n_cells, -1), axis=1))),
        local_balance=float(np.max(np.linalg.norm(balance, axis=1))),
        transmission=float(np.max(np.linalg.norm(total, axis=1))) if mesh.n_faces else 0.0,
        scale=scale,
    )


def energy_check(solution: Solution) -> EnergyCheck:
    """
    Energy identity ||p||^2 + tau ||u - uhat||^2 = (f, u) + <u_N, uhat>_N.

    generalized_rhs subtracts the Dirichlet boundary work <p_hat . n, uhat>_D,
    which makes the identity exact for nonzero u_D as well.
    """
    system = solution.system
    tau = system.data.tau
    lhs = norm_L2_cells(solution.p) ** 2 + tau * diff_norm_skeleton(solution.u, solution.uhat) ** 2
    rhs = float(np.sum(system.cell_load * solution.u.coeffs) + np.sum(system.neumann_load * solution.uhat.coeffs))

    mesh = solution.space.mesh
    moments = _normal_flux_moments(solution)
    local = solution.uhat.coeffs[mesh.cell_faces]
    work = 0.0
    for f in mesh.boundary_faces(BoundaryTag.DIRICHLET):
        cell = mesh.face_cells[f][0]
        j = mesh.local_face_index(cell, f)
        work += float(moments[cell, j] @ local[cell, j])
    return EnergyCheck(lhs=float(lhs), rhs=rhs, generalized_rhs=rhs - work)


def dirichlet_estimate_check(solution: Solution, quad_degree: int = ROUGH_QUAD_DEGREE):
    """
    (||uhat||^2 on the Dirichlet faces, ||u_D||^2 there); the first never
    exceeds the second since uhat is an L2 projection of u_D.
    """
    space, data = solution.space, solution.system.data
    faces = space.mesh.boundary_faces(BoundaryTag.DIRICHLET)
    lhs = float(np.sum(solution.uhat.coeffs[faces] ** 2))
    if data.u_D is None or faces.size == 0:
        return lhs, 0.0
    if isinstance(data.u_D, SkeletonField):
        return lhs, float(np.sum(data.u_D.coeffs[faces] ** 2))
    points, weights, _ = face_quadrature(space, quad_degree)
    values = np.asarray(data.u_D(points[faces, :, 0], points[faces, :, 1]), dtype=float)
    return lhs, float(np.sum(weights[faces] * values ** 2))


def data_quadrature_gap(space: HybridSpace, data: BVPData) -> float:
    """Change of the projected source when the data rule loses four degrees of exactness."""
    if not callable(data.f):
        return 0.0
    degree = data.quad_degree or 2 * space.k + 2
    coarse = max(degree - 4, 0)
    return float(np.max(np.abs(
        _project_cell_datum(space, data.f, degree) - _project_cell_datum(space, data.f, coarse)
    )))


def solution_errors(
    solution: Solution,
    exact_u: ScalarFunction,
    exact_grad: Callable[[np.ndarray, np.ndarray], np.ndarray],
    quad_degree: Optional[int] = None,
):
    """L2 errors ||u - u_h|| and ||p_h + grad u|| by quadrature."""
    space = solution.space
    degree = quad_degree or min(2 * space.k + 6, 40)
    points, weights, values = cell_quadrature(space, degree)
    x, y = points[..., 0], points[..., 1]
    u_h = np.einsum("kqa,ka->kq", values, solution.u.coeffs)
    p_h = np.einsum("kqa,kda->kqd", values, solution.p.coeffs)
    grad = np.asarray(exact_grad(x, y), dtype=float)  # (2, nc, nq)
    err_u = np.sum(weights * (u_h - exact_u(x, y)) ** 2)
    err_p = np.sum(weights * ((p_h[..., 0] + grad[0]) ** 2 + (p_h[..., 1] + grad[1]) ** 2))
    return float(np.sqrt(err_u)), float(np.sqrt(err_p))


def stability_energy(solution: Solution) -> float:
    tau = solution.system.data.tau
    faces = solution.space.mesh.boundary_faces(BoundaryTag.DIRICHLET)
    return (
        norm_L2_cells(solution.p) ** 2
        + tau * diff_norm_skeleton(solution.u, solution.uhat) ** 2
        + float(np.sum(solution.uhat.coeffs[faces] ** 2))
    )


@dataclass(frozen=True)
class Problem:
    name: str
    tag_rule: str
    f: ScalarFunction
    u_D: Optional[ScalarFunction] = None
    u_N: Optional[ScalarFunction] = None
    exact_u: Optional[ScalarFunction] = None
    exact_grad: Optional[Callable] = None
    gauge: str = "none"
    quad_degree: Optional[int] = None

    def data(self, tau: float = 1.0) -> BVPData:
        return BVPData(f=self.f, u_D=self.u_D, u_N=self.u_N, tau=tau, quad_degree=self.quad_degree)


def _zero(x, y):
    return np.zeros_like(x)


def _sine(x, y):
    return np.sin(np.pi * x) * np.sin(np.pi * y)


def _sine_grad(x, y):
    return np.array([np.pi * np.cos(np.pi * x) * np.sin(np.pi * y), np.pi * np.sin(np.pi * x) * np.cos(np.pi * y)])


def _affine(x, y):
    return 1.0 + 2.0 * x - 3.0 * y


def _affine_grad(x, y):
    return np.array([np.full_like(x, 2.0), np.full_like(x, -3.0)])


def _cosine(x, y):
    return np.cos(np.pi * x) * np.cos(np.pi * y)


def _cosine_grad(x, y):
    return np.array([-np.pi * np.sin(np.pi * x) * np.cos(np.pi * y), -np.pi * np.cos(np.pi * x) * np.sin(np.pi * y)])


def _disk_indicator(x, y):
    return np.where((x - 0.5) ** 2 + (y - 0.5) ** 2 < 0.3 ** 2, 1.0, 0.0)


def _bottom_sign(x, y):
    return np.where(np.abs(y) < 1e-12, np.sign(x - 0.5), 0.0)


PROBLEMS: Dict[str, Problem] = {
    "manufactured-sine": Problem(
        "manufactured-sine", "all-dirichlet",
        f=lambda x, y: 2.0 * np.pi ** 2 * _sine(x, y), u_D=_zero,
        exact_u=_sine, exact_grad=_sine_grad,
    ),
    "affine-exact": Problem(
        "affine-exact", "all-dirichlet",
        f=_zero, u_D=_affine, exact_u=_affine, exact_grad=_affine_grad,
    ),
    "rough-indicator": Problem(
        "rough-indicator", "left-dirichlet",
        f=_disk_indicator, u_D=_zero, u_N=_zero, quad_degree=ROUGH_QUAD_DEGREE,
    ),
    "rough-dirichlet": Problem(
        "rough-dirichlet", "all-dirichlet",
        f=_zero, u_D=_bottom_sign, quad_degree=ROUGH_QUAD_DEGREE,
    ),
    "pure-neumann": Problem(
        "pure-neumann", "all-neumann",
        f=lambda x, y: 2.0 * np.pi ** 2 * _cosine(x, y), u_N=_zero,
        exact_u=_cosine, exact_grad=_cosine_grad, gauge="skeleton_mean_zero",
    ),
}


def get_problem(name: str) -> Problem:
    try:
        return PROBLEMS[name.lower()]
    except KeyError:
        raise UnknownProblemError(
            f"unknown problem '{name}'; valid problems: {', '.join(PROBLEMS)}"
        ) from None


@lru_cache(maxsize=32)
def level_mesh(tag_rule: str, level: int, base_n: int = 2) -> Mesh:
    """Refinement level ``level`` of the structured base mesh, n = base_n * 2^level; memoized per level."""
    if level == 0:
        return build_structured(base_n, tag_rule)
    return refine_times(level_mesh(tag_rule, level - 1, base_n), 1)


def mesh_sequence(tag_rule: str, levels: int, base_n: int = 2) -> List[Mesh]:
    """Structured base mesh and its uniform refinements, n = base_n * 2^level."""
    return [level_mesh(tag_rule, level, base_n) for level in range(levels)]


@dataclass
class ExperimentRow:
    experiment: str
    k: int
    level: int
    h_max: float
    n_dof: int
    energy: float
    err_u: float = float("nan")
    err_p: float = float("nan")
    order_u: float = float("nan")
    order_p: float = float("nan")
    residual: float = float("nan")

    def as_row(self) -> List:
        return [
            self.experiment, self.k, self.level, self.h_max, self.n_dof, self.energy,
            self.err_u, self.err_p, self.order_u, self.order_p, self.residual,
        ]


EXPERIMENT_COLUMNS = [
    "experiment", "k", "level", "h_max", "n_dof", "energy",
    "err_u", "err_p", "order_u", "order_p", "residual",
]


def _run_level(problem: Problem, mesh: Mesh, k: int, tau: float, experiment: str, level: int) -> ExperimentRow:
    space = HybridSpace(mesh, k)
    solution = solve_problem(space, problem.data(tau), problem.gauge)
    row = ExperimentRow(
        experiment=experiment,
        k=k,
        level=level,
        h_max=mesh.h_max,
        n_dof=int(solution.system.free_dofs.size),
        energy=stability_energy(solution),
        residual=solution.diagnostics["residual"],
    )
    if problem.exact_u is not None:
        row.err_u, row.err_p = solution_errors(solution, problem.exact_u, problem.exact_grad)
    return row


def _order(coarse: float, fine: float) -> float:
    if coarse > 0 and fine > 0:
        return math.log2(coarse / fine)
    return float("nan")


def solve_experiment(problem: Problem, k: int, tau: float = 1.0, level: int = 0) -> ExperimentRow:
    mesh = level_mesh(problem.tag_rule, level)
    return _run_level(problem, mesh, k, tau, "solve", level)


@log_duration
def converge(problem: Problem, k: int, levels: int, tau: float = 1.0) -> List[ExperimentRow]:
    """Error table with observed orders log2(e_l / e_{l+1}) over a refinement sequence."""
    if problem.exact_u is None:
        raise UnknownProblemError(f"problem '{problem.name}' has no exact solution to converge to")
    rows = [
        _run_level(problem, mesh, k, tau, "converge", level)
        for level, mesh in enumerate(mesh_sequence(problem.tag_rule, levels))
    ]
    for coarse, fine in zip(rows, rows[1:]):
        fine.order_u = _order(coarse.err_u, fine.err_u)
        fine.order_p = _order(coarse.err_p, fine.err_p)
    return rows


@dataclass(frozen=True)
class StabilityPolicy:
    max_ratio: float = 2.0
    max_slope: float = 0.1


@dataclass
class StabilityResult:
    rows: List[ExperimentRow]
    ratio: float
    slope: float
    passed: bool


def loglog_slope(h: List[float], values: List[float]) -> float:
    if len(h) < 2:
        return 0.0
    return float(np.polyfit(np.log(h), np.log(values), 1)[0])


@log_duration
def stability_sweep(
    problem: Problem,
    k: int,
    levels: int,
    tau: float = 1.0,
    policy: StabilityPolicy = StabilityPolicy(),
    tau_rule: str = "constant",
) -> StabilityResult:
    """
    Energy ||p||^2 + tau ||u - uhat||^2 + ||uhat||^2_D across refinements.

    tau_rule='mesh' sets tau = h_max on every level, which leaves the regime
    where the energy is expected to stay bounded; it is recorded, not judged.
    """
    rows = []
    for level, mesh in enumerate(mesh_sequence(problem.tag_rule, levels)):
        level_tau = mesh.h_max if tau_rule == "mesh" else tau
        rows.append(_run_level(problem, mesh, k, level_tau, "stability", level))
    energies = [r.energy for r in rows]
    positive = [e for e in energies if e > 0]
    ratio = max(positive) / min(positive) if positive else 1.0
    slope = loglog_slope([r.h_max for r in rows], energies) if len(positive) == len(energies) else 0.0
    passed = ratio <= policy.max_ratio and abs(slope) <= policy.max_slope
    if not passed:
        logger.warning(f"Stability verdict failed for {problem.name}: ratio {ratio:.3f}, slope {slope:.3f}")
    return StabilityResult(rows=rows, ratio=ratio, slope=slope, passed=passed)
