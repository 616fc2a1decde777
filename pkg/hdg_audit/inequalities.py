"""
Both sides of each audited inequality as quadratic forms over a dof vector,
sharp-constant extraction and boundedness sweeps under uniform refinement.

Hybrid forms act on x = [coeffs(u); coeffs(uhat)], broken-space forms on
coeffs(u) alone, CR forms on the face-midpoint values, and single-simplex
audits on one cell at a time. The global factor h is the mesh size h_max.
"""
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from .fields import (
    CellField,
    HybridSpace,
    SkeletonField,
    boundary_integral_vector,
    boundary_subset,
    face_average,
    validate_boundary_subset,
)
from .hdg import flux_from_primal, flux_matrix, level_mesh, loglog_slope
from .lifting import barycentric_gradients, boundary_lift_matrix, cr_lift
from .linalg import DEFAULT_NULL_TOL, GenEigResult, check_against_power, gen_eig_max, rayleigh_quotient
from .utils import UnknownInequalityError, log_duration

logger = logging.getLogger(__name__)

AUDIT_COLUMNS = [
    "inequality", "k", "level", "h_max", "n_dof", "mode",
    "lambda", "sample_max", "samples", "seed", "verdict",
]
MODES = ("eigen", "sample")
SAMPLE_CHUNK = 256
DENOMINATOR_FLOOR = 1e-14
AUDIT_TAG_RULE = "all-dirichlet"


@dataclass(frozen=True)
class DofLayout:
    fields: Tuple[str, ...]
    k: int
    n_dof: int
    mesh: str


@dataclass
class QuadraticForm:
    matrix: np.ndarray
    layout: DofLayout
    name: str

    def value(self, x: np.ndarray) -> float:
        return float(x @ self.matrix @ x)


@dataclass
class LocalForm:
    """One member of a family of single-cell audits; its constant is divided by ``normalizer``."""
    a: np.ndarray
    b: np.ndarray
    normalizer: float
    label: str


@dataclass
class AuditResult:
    inequality: str
    k: int
    level: int
    h_max: float
    n_dof: int
    mode: str
    lambda_max: float
    bounded: bool
    sample_max: float
    samples: int
    seed: int
    verdict: str = ""
    witness: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def to_row(self) -> List:
        if not self.bounded:
            lam = "unbounded"
        else:
            lam = self.lambda_max
        return [
            self.inequality, self.k, self.level, self.h_max, self.n_dof, self.mode,
            lam, self.sample_max, self.samples, self.seed, self.verdict,
        ]

    def to_dict(self) -> Dict:
        data = asdict(self)
        data.pop("witness")
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "AuditResult":
        return cls(**{k: v for k, v in data.items() if k != "witness"})


class FormBuilder:
    """Sparse building blocks of the audited forms on one hybrid space."""

    def __init__(self, space: HybridSpace):
        self.space = space
        self.mesh = space.mesh
        self.kernels = space.kernels
        self.h = self.mesh.h_max
        nc, nf = self.mesh.n_cells, self.mesh.n_faces
        self.nb, self.mf = space.n_cell_basis, space.n_face_basis
        self.n_u = space.n_cell_dofs
        self.n = space.n_cell_dofs + space.n_face_dofs
        self.u_index = np.arange(self.n_u).reshape(nc, self.nb)
        self.uhat_index = self.n_u + np.arange(space.n_face_dofs).reshape(nf, self.mf)

    def layout(self, fields: Tuple[str, ...] = ("u", "uhat")) -> DofLayout:
        n = {("u", "uhat"): self.n, ("u",): self.n_u, ("cr",): self.mesh.n_faces}[fields]
        return DofLayout(fields, self.space.k, n, repr(self.mesh))

    def _coo(self, rows, cols, vals, shape=None) -> sp.csr_matrix:
        shape = shape or (self.n, self.n)
        return sp.coo_matrix(
            (np.ravel(vals), (np.ravel(rows), np.ravel(cols))), shape=shape
        ).tocsr()

    def _cell_blocks(self, blocks: np.ndarray) -> sp.csr_matrix:
        rows = np.broadcast_to(self.u_index[:, :, None], blocks.shape)
        cols = np.broadcast_to(self.u_index[:, None, :], blocks.shape)
        return self._coo(rows, cols, blocks)

    def mass_u(self) -> sp.csr_matrix:
        diag = np.zeros(self.n)
        diag[:self.n_u] = 1.0
        return sp.diags(diag).tocsr()

    def gradgrad(self) -> sp.csr_matrix:
        return self._cell_blocks(self.kernels.gradgrad)

    def _boundary_pairs(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        faces = self.mesh.boundary_faces()
        cells = np.array([self.mesh.face_cells[f][0] for f in faces], dtype=np.int64)
        local = np.array([self.mesh.local_face_index(c, f) for c, f in zip(cells, faces)], dtype=np.int64)
        return cells, local, faces

    def mismatch(self, boundary_only: bool = False) -> sp.csr_matrix:
        """||u - uhat||^2 over all cell boundaries, or over boundary faces only."""
        if boundary_only:
            cells, local, faces = self._boundary_pairs()
        else:
            nc = self.mesh.n_cells
            cells = np.repeat(np.arange(nc), 3)
            local = np.tile(np.arange(3), nc)
            faces = self.mesh.cell_faces.ravel()
        s = self.kernels.cell_face_mass[cells, local]  # (m, nb, nb)
        t = self.kernels.trace[cells, local]  # (m, nb, mf)
        ui, fi = self.u_index[cells], self.uhat_index[faces]
        t_shape = (len(cells), self.mf, self.nb)
        rows = [
            np.broadcast_to(ui[:, :, None], s.shape),
            np.broadcast_to(ui[:, :, None], t.shape),
            np.broadcast_to(fi[:, :, None], t_shape),
            fi,
        ]
        cols = [
            np.broadcast_to(ui[:, None, :], s.shape),
            np.broadcast_to(fi[:, None, :], t.shape),
            np.broadcast_to(ui[:, None, :], t_shape),
            fi,
        ]
        vals = [s, -t, -t.transpose(0, 2, 1), np.ones(fi.shape)]
        return self._coo(
            np.concatenate([np.ravel(r) for r in rows]),
            np.concatenate([np.ravel(c) for c in cols]),
            np.concatenate([np.ravel(v) for v in vals]),
        )

    def boundary_trace_u(self) -> sp.csr_matrix:
        cells, local, _ = self._boundary_pairs()
        s = self.kernels.cell_face_mass[cells, local]
        ui = self.u_index[cells]
        return self._coo(
            np.broadcast_to(ui[:, :, None], s.shape), np.broadcast_to(ui[:, None, :], s.shape), s
        )

    def boundary_uhat(self) -> sp.csr_matrix:
        fi = self.uhat_index[self.mesh.boundary_faces()].ravel()
        return self._coo(fi, fi, np.ones(fi.shape))

    def cr_gradient_operator(self) -> sp.csr_matrix:
        """Rows sqrt|K| grad L_CR(mean uhat) on each cell, shape (2 nc, n)."""
        mesh = self.mesh
        nc = mesh.n_cells
        grads = barycentric_gradients(mesh)  # (nc, 2, 3)
        scale = np.sqrt(mesh.cell_area)[:, None, None] / np.sqrt(mesh.face_length[mesh.cell_faces])[:, None, :]
        vals = -2.0 * grads * scale
        rows = np.broadcast_to((2 * np.arange(nc))[:, None, None] + np.arange(2)[None, :, None], vals.shape)
        cols = np.broadcast_to(self.uhat_index[mesh.cell_faces, 0][:, None, :], vals.shape)
        return self._coo(rows, cols, vals, shape=(2 * nc, self.n))

    def cr_mass_operator(self) -> sp.csr_matrix:
        """Rows with ||L_CR(mean uhat)||^2 as their squared norm, shape (3 nc, n)."""
        mesh = self.mesh
        nc = mesh.n_cells
        vals = np.sqrt(mesh.cell_area / 3.0)[:, None] / np.sqrt(mesh.face_length[mesh.cell_faces])
        rows = np.arange(3 * nc).reshape(nc, 3)
        cols = self.uhat_index[mesh.cell_faces, 0]
        return self._coo(rows, cols, vals, shape=(3 * nc, self.n))

    def cr_integral_vector(self) -> np.ndarray:
        mesh = self.mesh
        vec = np.zeros(self.n)
        weight = (mesh.cell_area / 3.0)[:, None] / np.sqrt(mesh.face_length[mesh.cell_faces])
        np.add.at(vec, self.uhat_index[mesh.cell_faces, 0].ravel(), weight.ravel())
        return vec

    def u_integral_vector(self) -> np.ndarray:
        vec = np.zeros(self.n)
        vec[:self.n_u] = self.kernels.cell_integral.ravel()
        return vec

    def gamma_vector(self, gamma: Sequence[int], of: str = "uhat") -> np.ndarray:
        return boundary_integral_vector(self.space, gamma, of)

    def flux_operator(self) -> sp.csr_matrix:
        return flux_matrix(self.space)

    def jump_operator(self) -> sp.csr_matrix:
        """Rows |e|^{-1} (int_e u+ - int_e u-) per interior face; their squares give the jump term."""
        mesh = self.mesh
        interior = mesh.interior_faces()
        rows, cols, vals = [], [], []
        for r, f in enumerate(interior):
            plus, minus = mesh.face_cells[f]
            for cell, sign in ((plus, 1.0), (minus, -1.0)):
                j = mesh.local_face_index(cell, f)
                rows.append(np.full(self.nb, r))
                cols.append(self.u_index[cell])
                vals.append(sign * self.kernels.cell_face_integral[cell, j] / mesh.face_length[f])
        if not rows:
            return sp.csr_matrix((0, self.n))
        return self._coo(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), shape=(len(interior), self.n))


def _gram(operator: sp.spmatrix) -> sp.csr_matrix:
    return (operator.T @ operator).tocsr()


def _dense(matrix: sp.spmatrix, rank_one: Sequence[Tuple[float, np.ndarray]] = (), keep=None) -> np.ndarray:
    dense = matrix.toarray() if sp.issparse(matrix) else np.array(matrix, dtype=float)
    for coef, vec in rank_one:
        dense += coef * np.outer(vec, vec)
    if keep is not None:
        dense = dense[np.ix_(keep, keep)]
    return 0.5 * (dense + dense.T)


class CRFormBuilder:
    """Forms over the CR face-midpoint values of a mesh."""

    def __init__(self, space: HybridSpace):
        self.mesh = space.mesh
        self.h = self.mesh.h_max
        self.n = self.mesh.n_faces

    def _coo(self, rows, cols, vals, shape) -> sp.csr_matrix:
        return sp.coo_matrix((np.ravel(vals), (np.ravel(rows), np.ravel(cols))), shape=shape).tocsr()

    def gradient_operator(self) -> sp.csr_matrix:
        mesh = self.mesh
        nc = mesh.n_cells
        vals = -2.0 * barycentric_gradients(mesh) * np.sqrt(mesh.cell_area)[:, None, None]
        rows = np.broadcast_to((2 * np.arange(nc))[:, None, None] + np.arange(2)[None, :, None], vals.shape)
        cols = np.broadcast_to(mesh.cell_faces[:, None, :], vals.shape)
        return self._coo(rows, cols, vals, (2 * nc, self.n))

    def mass_operator(self) -> sp.csr_matrix:
        mesh = self.mesh
        nc = mesh.n_cells
        vals = np.broadcast_to(np.sqrt(mesh.cell_area / 3.0)[:, None], (nc, 3))
        return self._coo(np.arange(3 * nc).reshape(nc, 3), mesh.cell_faces, vals, (3 * nc, self.n))

    def integral_vector(self) -> np.ndarray:
        vec = np.zeros(self.n)
        np.add.at(vec, self.mesh.cell_faces.ravel(), np.repeat(self.mesh.cell_area / 3.0, 3))
        return vec

    def gamma_vector(self, gamma: Sequence[int]) -> np.ndarray:
        gamma = validate_boundary_subset(self.mesh, gamma)
        vec = np.zeros(self.n)
        vec[gamma] = self.mesh.face_length[gamma]
        return vec

    def boundary_trace(self) -> sp.csr_matrix:
        """||w||^2 over the boundary faces; w is affine along each face with vertex values sum(mu) - 2 mu_i."""
        mesh = self.mesh
        edge = np.array([[1.0 / 3.0, 1.0 / 6.0], [1.0 / 6.0, 1.0 / 3.0]])
        rows, cols, vals = [], [], []
        for f in mesh.boundary_faces():
            cell = mesh.face_cells[f][0]
            j = mesh.local_face_index(cell, f)
            endpoints = np.ones((2, 3))
            endpoints[0, (j + 1) % 3] -= 2.0
            endpoints[1, (j + 2) % 3] -= 2.0
            local = mesh.face_length[f] * endpoints.T @ edge @ endpoints
            dofs = mesh.cell_faces[cell]
            rows.append(np.repeat(dofs, 3))
            cols.append(np.tile(dofs, 3))
            vals.append(local.ravel())
        return self._coo(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), (self.n, self.n))


FormPair = Tuple[QuadraticForm, QuadraticForm]
Builder = Callable[[HybridSpace, np.ndarray], object]


@dataclass(frozen=True)
class InequalityDef:
    id: str
    description: str
    build: Builder
    local: bool = False
    expect_bounded: bool = True
    bound: Optional[Callable[[int], float]] = None


def _pair(a_matrix, b_matrix, layout: DofLayout, name: str) -> FormPair:
    return QuadraticForm(a_matrix, layout, f"{name}:lhs"), QuadraticForm(b_matrix, layout, f"{name}:rhs")


def _hybrid_poincare(variant: str, with_mismatch: bool = True) -> Builder:
    def build(space: HybridSpace, gamma: np.ndarray) -> FormPair:
        fb = FormBuilder(space)
        h = fb.h
        b = h ** 2 * fb.gradgrad() + _gram(fb.cr_gradient_operator())
        if with_mismatch:
            b = b + h * fb.mismatch()
        last = {
            "mean-cr": fb.cr_integral_vector,
            "boundary": lambda: fb.gamma_vector(gamma, "uhat"),
            "mean-u": fb.u_integral_vector,
        }[variant]()
        return _pair(_dense(fb.mass_u()), _dense(b, [(1.0, last)]), fb.layout(), f"hybrid-poincare-{variant}")
    return build


def _hybrid_trace(which: str) -> Builder:
    def build(space: HybridSpace, gamma: np.ndarray) -> FormPair:
        fb = FormBuilder(space)
        h = fb.h
        a = fb.boundary_trace_u() if which == "u" else fb.boundary_uhat()
        b = h * fb.gradgrad() + fb.mismatch(boundary_only=True) + (1.0 + h) * _gram(fb.cr_gradient_operator())
        return _pair(_dense(a), _dense(b, [(1.0, fb.gamma_vector(gamma, "uhat"))]), fb.layout(), f"hybrid-trace-{which}")
    return build


def _ph_poincare(variant: str) -> Builder:
    def build(space: HybridSpace, gamma: np.ndarray) -> FormPair:
        fb = FormBuilder(space)
        h = fb.h
        b = (1.0 + h ** 2) * _gram(fb.flux_operator()) + h * fb.mismatch()
        last = {
            "mean": fb.cr_integral_vector,
            "boundary": lambda: fb.gamma_vector(gamma, "uhat"),
            "mean-u": fb.u_integral_vector,
        }[variant]()
        return _pair(_dense(fb.mass_u()), _dense(b, [(1.0, last)]), fb.layout(), f"ph-poincare-{variant}")
    return build


def _ph_trace(which: str) -> Builder:
    def build(space: HybridSpace, gamma: np.ndarray) -> FormPair:
        fb = FormBuilder(space)
        h = fb.h
        a = fb.boundary_trace_u() if which == "u" else fb.boundary_uhat()
        b = (1.0 + h) * _gram(fb.flux_operator()) + fb.mismatch()
        return _pair(_dense(a), _dense(b, [(1.0, fb.gamma_vector(gamma, "uhat"))]), fb.layout(), f"ph-trace-{which}")
    return build


def _brenner(variant: str) -> Builder:
    def build(space: HybridSpace, gamma: np.ndarray) -> FormPair:
        fb = FormBuilder(space)
        keep = np.arange(fb.n_u)
        last = fb.u_integral_vector() if variant == "mean" else fb.gamma_vector(gamma, "u")
        b = fb.gradgrad() + _gram(fb.jump_operator())
        return _pair(
            _dense(fb.mass_u(), keep=keep),
            _dense(b, [(1.0, last)], keep=keep),
            fb.layout(("u",)),
            f"brenner-{variant}",
        )
    return build


def _cr_trace(variant: str) -> Builder:
    def build(space: HybridSpace, gamma: np.ndarray) -> FormPair:
        cb = CRFormBuilder(space)
        h = cb.h
        grad = _gram(cb.gradient_operator())
        if variant == "mean":
            b = _dense((1.0 + h ** 2) * grad, [(1.0, cb.integral_vector())])
        else:
            b = _dense((1.0 + h) * grad, [(1.0, cb.gamma_vector(gamma))])
        layout = DofLayout(("cr",), 1, cb.n, repr(cb.mesh))
        return _pair(_dense(cb.boundary_trace()), b, layout, f"cr-trace-{variant}")
    return build


def _cr_poincare(variant: str) -> Builder:
    def build(space: HybridSpace, gamma: np.ndarray) -> FormPair:
        cb = CRFormBuilder(space)
        last = cb.integral_vector() if variant == "mean" else cb.gamma_vector(gamma)
        layout = DofLayout(("cr",), 1, cb.n, repr(cb.mesh))
        return _pair(
            _dense(_gram(cb.mass_operator())),
            _dense(_gram(cb.gradient_operator()), [(1.0, last)]),
            layout,
            f"cr-poincare-{variant}",
        )
    return build


def _l2_estimate(space: HybridSpace, gamma: np.ndarray) -> FormPair:
    fb = FormBuilder(space)
    h = fb.h
    b = h ** 2 * fb.gradgrad() + h * fb.mismatch() + _gram(fb.cr_mass_operator())
    return _pair(_dense(fb.mass_u()), _dense(b), fb.layout(), "l2-estimate")


def _integral_difference(space: HybridSpace, gamma: np.ndarray) -> FormPair:
    fb = FormBuilder(space)
    h = fb.h
    a = _dense(sp.csr_matrix((fb.n, fb.n)), [(1.0, fb.cr_integral_vector())])
    b = _dense(h ** 2 * fb.gradgrad() + h * fb.mismatch(), [(1.0, fb.u_integral_vector())])
    return _pair(a, b, fb.layout(), "integral-difference")


def _gradient_estimate(space: HybridSpace, gamma: np.ndarray) -> FormPair:
    fb = FormBuilder(space)
    b = _gram(fb.flux_operator()) + fb.mismatch() / fb.h
    return _pair(_dense(fb.gradgrad()), _dense(b), fb.layout(), "gradient-estimate")


def _simplex_trace(space: HybridSpace, gamma: np.ndarray) -> List[LocalForm]:
    mesh, kernels = space.mesh, space.kernels
    identity = np.eye(space.n_cell_basis)
    return [
        LocalForm(
            kernels.cell_face_mass[c, j],
            identity,
            mesh.face_length[mesh.cell_faces[c, j]] / mesh.cell_area[c],
            f"cell {c} face {j}",
        )
        for c in range(mesh.n_cells)
        for j in range(3)
    ]


def _simplex_poincare(mode: str) -> Builder:
    def build(space: HybridSpace, gamma: np.ndarray) -> List[LocalForm]:
        mesh, kernels = space.mesh, space.kernels
        nb = space.n_cell_basis
        e0 = np.zeros(nb)
        e0[0] = 1.0
        members = []
        for c in range(mesh.n_cells):
            b = kernels.gradgrad[c]
            diam2 = mesh.cell_diameter[c] ** 2
            area = mesh.cell_area[c]
            if mode == "mean":
                members.append(LocalForm(np.eye(nb) - np.outer(e0, e0), b, diam2, f"cell {c}"))
                continue
            for j in range(3):
                length = mesh.face_length[mesh.cell_faces[c, j]]
                face_mean = kernels.cell_face_integral[c, j] / length
                if mode == "face_mean":
                    op = np.eye(nb) - np.sqrt(area) * np.outer(e0, face_mean)
                    a = op.T @ op
                else:
                    diff = e0 / np.sqrt(area) - face_mean
                    a = area * np.outer(diff, diff)
                members.append(LocalForm(a, b, diam2, f"cell {c} face {j}"))
        return members
    return build


def _lift_bound(space: HybridSpace, gamma: np.ndarray) -> List[LocalForm]:
    mesh = space.mesh
    members = []
    for c in range(mesh.n_cells):
        lift = boundary_lift_matrix(space, c)
        n = lift.shape[1]
        members.append(LocalForm(lift.T @ lift, np.eye(n) / mesh.cell_diameter[c], 1.0, f"cell {c}"))
    return members


INEQUALITIES: Dict[str, InequalityDef] = {}


def _register(defn: InequalityDef) -> None:
    INEQUALITIES[defn.id] = defn


_register(InequalityDef(
    "simplex-trace", "||f||_e^2 <= ((k+1)(k+2)/2)(|e|/|K|) ||f||_K^2 on one simplex",
    _simplex_trace, local=True, bound=lambda k: (k + 1) * (k + 2) / 2.0,
))
_register(InequalityDef("simplex-poincare", "||f - f_K||_K^2 <= C diam^2 |f|_1^2", _simplex_poincare("mean"), local=True))
_register(InequalityDef("simplex-poincare-face-mean", "||f - f_e||_K^2 <= C diam^2 |f|_1^2", _simplex_poincare("face_mean"), local=True))
_register(InequalityDef("simplex-poincare-mean-diff", "|K| (f_K - f_e)^2 <= C diam^2 |f|_1^2", _simplex_poincare("mean_diff"), local=True))
_register(InequalityDef("brenner-mean", "broken Poincare with jump terms and domain integral", _brenner("mean")))
_register(InequalityDef("brenner-boundary", "broken Friedrichs with jump terms and boundary integral", _brenner("boundary")))
for _variant in ("mean-cr", "boundary", "mean-u"):
    _register(InequalityDef(f"hybrid-poincare-{_variant}", "hybrid Poincare inequality", _hybrid_poincare(_variant)))
for _variant in ("mean", "boundary"):
    _register(InequalityDef(f"cr-trace-{_variant}", "CR trace inequality", _cr_trace(_variant)))
    _register(InequalityDef(f"cr-poincare-{_variant}", "CR Poincare-Friedrichs inequality", _cr_poincare(_variant)))
for _which in ("u", "uhat"):
    _register(InequalityDef(f"hybrid-trace-{_which}", "hybrid trace inequality", _hybrid_trace(_which)))
    _register(InequalityDef(f"ph-trace-{_which}", "trace inequality with the local flux", _ph_trace(_which)))
for _variant in ("mean", "boundary", "mean-u"):
    _register(InequalityDef(f"ph-poincare-{_variant}", "Poincare inequality with the local flux", _ph_poincare(_variant)))
_register(InequalityDef("l2-estimate", "global L2 estimate through the CR lift", _l2_estimate))
_register(InequalityDef("integral-difference", "integral of the CR lift against the integral of u", _integral_difference))
_register(InequalityDef("gradient-estimate", "broken gradient against the local flux", _gradient_estimate))
_register(InequalityDef("lift-bound", "||G(mu)||_K^2 <= C h_K^{-1} ||mu||_dK^2", _lift_bound, local=True))
_register(InequalityDef(
    "negative-hybrid-poincare-no-mismatch",
    "hybrid Poincare with the mismatch term removed (must fail)",
    _hybrid_poincare("mean-cr", with_mismatch=False),
    expect_bounded=False,
))


def get_inequality(inequality_id: str) -> InequalityDef:
    try:
        return INEQUALITIES[inequality_id]
    except KeyError:
        raise UnknownInequalityError(
            f"unknown inequality '{inequality_id}'; valid ids: {', '.join(sorted(INEQUALITIES))}"
        ) from None


def build_forms(inequality_id: str, space: HybridSpace, gamma: str = "left"):
    """Forms of a registered inequality: a (lhs, rhs) pair, or a list of LocalForm."""
    defn = get_inequality(inequality_id)
    faces = boundary_subset(space.mesh, gamma)
    return defn.build(space, faces)


def sample_max(
    a: np.ndarray,
    b: np.ndarray,
    n_samples: int,
    rng: np.random.Generator,
) -> float:
    """Largest ratio x'Ax / x'Bx over standard-normal draws, skipping x'Bx < 1e-14."""
    best = float("-inf")
    remaining = n_samples
    while remaining > 0:
        chunk = min(SAMPLE_CHUNK, remaining)
        x = rng.standard_normal((chunk, a.shape[0]))
        num = np.einsum("si,ij,sj->s", x, a, x)
        den = np.einsum("si,ij,sj->s", x, b, x)
        ok = den >= DENOMINATOR_FLOOR
        if np.any(ok):
            best = max(best, float(np.max(num[ok] / den[ok])))
        remaining -= chunk
    return best if np.isfinite(best) else float("nan")


def audit(
    forms: FormPair,
    mode: str = "eigen",
    n_samples: int = 0,
    seed: int = 0,
    null_tol: float = DEFAULT_NULL_TOL,
) -> Tuple[GenEigResult, float]:
    """
    Sharp constant of x'Ax <= lambda x'Bx for one form pair.

    Returns:
        (generalized eigen result, or None in sample mode; sample max, or nan)
    """
    if mode not in MODES:
        raise ValueError(f"unknown audit mode '{mode}'; expected one of {MODES}")
    a, b = forms
    if a.layout != b.layout:
        raise ValueError(f"forms {a.name} and {b.name} use different dof layouts")
    result = None
    if mode == "eigen":
        result = gen_eig_max(a.matrix, b.matrix, null_tol)
        if result.bounded and result.lambda_max > 0:
            quotient = rayleigh_quotient(a.matrix, b.matrix, result.witness)
            if abs(quotient - result.lambda_max) > 1e-8 * result.lambda_max:
                logger.warning(f"{a.name}: witness quotient {quotient:.10e} vs lambda {result.lambda_max:.10e}")
            check_against_power(result, a.matrix, b.matrix, null_tol, a.name)
    sampled = float("nan")
    if n_samples > 0:
        sampled = sample_max(a.matrix, b.matrix, n_samples, np.random.default_rng(seed))
    return result, sampled


def audit_local(
    members: List[LocalForm],
    mode: str = "eigen",
    n_samples: int = 0,
    seed: int = 0,
    null_tol: float = DEFAULT_NULL_TOL,
) -> Tuple[float, bool, float]:
    """Largest normalized constant over a family of single-cell audits."""
    lam, bounded, sampled = 0.0, True, float("-inf")
    rng = np.random.default_rng(seed)
    for member in members:
        if mode == "eigen":
            result = gen_eig_max(member.a, member.b, null_tol)
            if not result.bounded:
                logger.warning(f"Local audit unbounded on {member.label}")
                bounded = False
                lam = float("inf")
            else:
                check_against_power(result, member.a, member.b, null_tol, member.label)
                lam = max(lam, result.lambda_max / member.normalizer)
        if n_samples > 0:
            sampled = max(sampled, sample_max(member.a, member.b, n_samples, rng) / member.normalizer)
    if mode == "sample":
        lam = float("nan")
    return lam, bounded, sampled if np.isfinite(sampled) else float("nan")


@log_duration
def audit_level(
    inequality_id: str,
    k: int,
    level: int,
    mode: str = "eigen",
    n_samples: int = 0,
    seed: int = 0,
    gamma: str = "left",
    null_tol: float = DEFAULT_NULL_TOL,
) -> AuditResult:
    """Audit one registered inequality on refinement level ``level`` (n = 2^(level+1))."""
    defn = get_inequality(inequality_id)
    mesh = level_mesh(AUDIT_TAG_RULE, level)
    space = HybridSpace(mesh, k)
    forms = build_forms(inequality_id, space, gamma)
    witness = None
    if defn.local:
        lam, bounded, sampled = audit_local(forms, mode, n_samples, seed, null_tol)
        n_dof = forms[0].a.shape[0] if forms else 0
    else:
        result, sampled = audit(forms, mode, n_samples, seed, null_tol)
        n_dof = forms[0].layout.n_dof
        if result is None:
            lam, bounded = float("nan"), True
        else:
            lam, bounded, witness = result.lambda_max, result.bounded, result.witness
            if not bounded:
                logger.warning(f"{inequality_id} level {level}: form is unbounded")
    logger.debug(f"{inequality_id} k={k} level={level}: lambda={lam}, sample max={sampled}")
    return AuditResult(
        inequality=inequality_id,
        k=k,
        level=level,
        h_max=mesh.h_max,
        n_dof=int(n_dof),
        mode=mode,
        lambda_max=float(lam),
        bounded=bool(bounded),
        sample_max=float(sampled),
        samples=int(n_samples),
        seed=int(seed),
        witness=witness,
    )


@dataclass(frozen=True)
class VerdictPolicy:
    max_ratio: float = 4.0
    max_slope: float = 0.2


@dataclass
class SweepResult:
    inequality: str
    results: List[AuditResult]
    ratio: float
    slope: float
    passed: bool
    verdict: str


def judge(inequality_id: str, results: List[AuditResult], policy: VerdictPolicy = VerdictPolicy()) -> SweepResult:
    """
    Boundedness verdict over refinement levels: every level bounded, max/min of
    the constant within the ratio threshold and the log-log slope against h
    within the slope threshold.
    """
    defn = get_inequality(inequality_id)
    results = sorted(results, key=lambda r: r.level)
    values = [r.lambda_max if r.mode == "eigen" else r.sample_max for r in results]
    all_bounded = all(r.bounded for r in results)
    ratio, slope = float("inf"), float("inf")
    if all_bounded and values and all(v > 0 and np.isfinite(v) for v in values):
        ratio = max(values) / min(values)
        slope = loglog_slope([r.h_max for r in results], values)
    passed = all_bounded and ratio <= policy.max_ratio and abs(slope) <= policy.max_slope
    if defn.expect_bounded:
        verdict = "pass" if passed else "fail"
    else:
        verdict = "unexpected-pass" if passed else "expected-fail"
    if verdict in ("fail", "unexpected-pass"):
        logger.warning(f"{inequality_id}: verdict {verdict} (ratio {ratio:.3g}, slope {slope:.3g})")
    for r in results:
        r.verdict = verdict
    return SweepResult(inequality_id, results, ratio, slope, passed, verdict)


def verdict_ok(verdict: str) -> bool:
    return verdict in ("pass", "expected-fail")


def sweep(
    inequality_id: str,
    k: int,
    levels: int,
    mode: str = "eigen",
    n_samples: int = 0,
    seed: int = 0,
    gamma: str = "left",
    policy: VerdictPolicy = VerdictPolicy(),
    null_tol: float = DEFAULT_NULL_TOL,
) -> SweepResult:
    results = [
        audit_level(inequality_id, k, level, mode, n_samples, seed, gamma, null_tol)
        for level in range(levels)
    ]
    return judge(inequality_id, results, policy)


def cr_gradient_vs_flux(u: CellField, uhat: SkeletonField) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-cell (||grad L_CR(mean uhat)||_K, ||p||_K) with p the local flux of
    (u, uhat); the first never exceeds the second.
    """
    w = cr_lift(face_average(uhat))
    lhs = np.sqrt(u.space.mesh.cell_area) * np.linalg.norm(w.gradients(), axis=1)
    p = flux_from_primal(u, uhat)
    rhs = np.linalg.norm(p.coeffs.reshape(p.coeffs.shape[0], -1), axis=1)
    return lhs, rhs
