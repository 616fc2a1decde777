"""
Simplicial meshes of the unit square: construction, uniform refinement,
topology/geometry queries, shape-regularity reports and the text format.
"""
import math
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np

from .utils import (
    MeshFormatError,
    MeshValidationError,
    DegenerateCellError,
)

logger = logging.getLogger(__name__)

FORMAT_HEADER = "hmesh 1 dim 2"
DIM = 2


class BoundaryTag(str, Enum):
    INTERIOR = "I"
    DIRICHLET = "D"
    NEUMANN = "N"


FaceKey = Tuple[int, int]
TagRule = Callable[[np.ndarray], BoundaryTag]


def _all_dirichlet(midpoint: np.ndarray) -> BoundaryTag:
    return BoundaryTag.DIRICHLET


def _left_dirichlet(midpoint: np.ndarray) -> BoundaryTag:
    return BoundaryTag.DIRICHLET if abs(midpoint[0]) < 1e-12 else BoundaryTag.NEUMANN


def _all_neumann(midpoint: np.ndarray) -> BoundaryTag:
    return BoundaryTag.NEUMANN


TAG_RULES: Dict[str, TagRule] = {
    "all-dirichlet": _all_dirichlet,
    "left-dirichlet": _left_dirichlet,
    "all-neumann": _all_neumann,
}


def get_tag_rule(name: str) -> TagRule:
    """Look up a boundary-tagging policy by name."""
    try:
        return TAG_RULES[name.lower()]
    except KeyError:
        raise MeshValidationError(
            f"unknown tag rule '{name}'; valid rules: {', '.join(TAG_RULES)}"
        ) from None


@dataclass(frozen=True)
class RegularityReport:
    kappa: float
    theta: float
    min_angle: float
    hanging_node_free: bool

    @property
    def valid(self) -> bool:
        return self.kappa > 0 and self.hanging_node_free


def _frozen(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


class Mesh:
    """
    Immutable 2D triangulation with face adjacency and cached geometry.

    Local face j of a cell is the edge opposite its local vertex j. The
    canonical normal of an interior face points from the lower-indexed
    adjacent cell to the higher-indexed one; ``cell_face_signs`` holds +1 where
    a cell's outward normal equals the canonical one.
    """

    def __init__(
        self,
        vertices: np.ndarray,
        cells: np.ndarray,
        boundary_tags: Dict[FaceKey, BoundaryTag],
    ):
        self.vertices = _frozen(np.array(vertices, dtype=float).reshape(-1, DIM))
        self.cells = _frozen(np.array(cells, dtype=np.int64).reshape(-1, 3))
        self._build_topology(boundary_tags)
        self._build_geometry()

    def _build_topology(self, boundary_tags: Dict[FaceKey, BoundaryTag]) -> None:
        face_index: Dict[FaceKey, int] = {}
        face_vertices: List[FaceKey] = []
        face_cells: List[List[int]] = []
        cell_faces = np.empty((len(self.cells), 3), dtype=np.int64)

        for c, cell in enumerate(self.cells):
            for j in range(3):
                a, b = int(cell[(j + 1) % 3]), int(cell[(j + 2) % 3])
                key = (min(a, b), max(a, b))
                f = face_index.get(key)
                if f is None:
                    f = len(face_vertices)
                    face_index[key] = f
                    face_vertices.append(key)
                    face_cells.append([])
                face_cells[f].append(c)
                cell_faces[c, j] = f

        tags = []
        for f, adjacent in enumerate(face_cells):
            key = face_vertices[f]
            if len(adjacent) > 2:
                raise MeshValidationError(f"face {key} is shared by {len(adjacent)} cells")
            if len(adjacent) == 2:
                if key in boundary_tags:
                    raise MeshValidationError(f"interior face {key} carries a boundary tag")
                tags.append(BoundaryTag.INTERIOR)
            else:
                tag = boundary_tags.get(key)
                if tag is None or tag == BoundaryTag.INTERIOR:
                    raise MeshValidationError(f"boundary face {key} has no Dirichlet/Neumann tag")
                tags.append(BoundaryTag(tag))

        unknown = set(boundary_tags) - set(face_index)
        if unknown:
            raise MeshValidationError(f"tagged faces {sorted(unknown)} are not edges of the mesh")

        self.face_vertices = _frozen(np.array(face_vertices, dtype=np.int64).reshape(-1, 2))
        self.face_cells: Tuple[Tuple[int, ...], ...] = tuple(tuple(sorted(c)) for c in face_cells)
        self.face_tags: Tuple[BoundaryTag, ...] = tuple(tags)
        self.cell_faces = _frozen(cell_faces)
        signs = np.ones((len(self.cells), 3), dtype=np.int64)
        for c in range(len(self.cells)):
            for j in range(3):
                adjacent = self.face_cells[cell_faces[c, j]]
                if len(adjacent) == 2 and adjacent[1] == c:
                    signs[c, j] = -1
        self.cell_face_signs = _frozen(signs)

    def _build_geometry(self) -> None:
        v = self.vertices[self.cells]  # (nc, 3, 2)
        jac = np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]], axis=2)  # columns are edge vectors
        det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
        area = 0.5 * np.abs(det)
        if len(area) and np.any(area <= 1e-14 * max(1.0, float(np.max(area)))):
            bad = int(np.argmin(area))
            raise DegenerateCellError(f"cell {bad} has non-positive measure {area[bad]:.3e}")

        edges = np.stack([v[:, 2] - v[:, 1], v[:, 0] - v[:, 2], v[:, 1] - v[:, 0]], axis=1)
        lengths = np.linalg.norm(edges, axis=2)  # (nc, 3), edge j opposite vertex j
        centroid = v.mean(axis=1)

        fv = self.vertices[self.face_vertices]
        face_length = np.linalg.norm(fv[:, 1] - fv[:, 0], axis=1)
        face_midpoint = fv.mean(axis=1)
        tangent = (fv[:, 1] - fv[:, 0]) / face_length[:, None]
        normal = np.stack([tangent[:, 1], -tangent[:, 0]], axis=1)
        # orient each canonical normal outward from the lower-indexed adjacent cell
        owner = np.array([adj[0] for adj in self.face_cells])
        flip = np.einsum("ij,ij->i", normal, face_midpoint - centroid[owner]) < 0
        normal[flip] *= -1.0

        self.jacobian = _frozen(jac)
        self.inverse_jacobian = _frozen(np.linalg.inv(jac))
        self.cell_area = _frozen(area)
        self.cell_diameter = _frozen(lengths.max(axis=1))
        self.cell_edge_lengths = _frozen(lengths)
        self.cell_centroid = _frozen(centroid)
        self.face_length = _frozen(face_length)
        self.face_midpoint = _frozen(face_midpoint)
        self.face_normal = _frozen(normal)
        self.cell_normals = _frozen(normal[self.cell_faces] * self.cell_face_signs[:, :, None])

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_faces(self) -> int:
        return len(self.face_vertices)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def h_max(self) -> float:
        return float(self.cell_diameter.max())

    @property
    def area(self) -> float:
        return float(self.cell_area.sum())

    def is_interior(self, face: int) -> bool:
        return self.face_tags[face] == BoundaryTag.INTERIOR

    def boundary_faces(self, tag: Optional[BoundaryTag] = None) -> np.ndarray:
        """Ids of boundary faces, optionally restricted to one tag."""
        return np.array(
            [
                f for f, t in enumerate(self.face_tags)
                if t != BoundaryTag.INTERIOR and (tag is None or t == tag)
            ],
            dtype=np.int64,
        )

    def interior_faces(self) -> np.ndarray:
        return np.array(
            [f for f, t in enumerate(self.face_tags) if t == BoundaryTag.INTERIOR],
            dtype=np.int64,
        )

    def boundary_tags(self) -> Dict[FaceKey, BoundaryTag]:
        return {
            tuple(int(i) for i in self.face_vertices[f]): self.face_tags[f]
            for f in self.boundary_faces()
        }

    def local_face_index(self, cell: int, face: int) -> int:
        hits = np.flatnonzero(self.cell_faces[cell] == face)
        if not len(hits):
            raise MeshValidationError(f"face {face} is not on the boundary of cell {cell}")
        return int(hits[0])

    def barycentric_gradients(self, cell: int) -> np.ndarray:
        """Columns are the (constant) gradients of the three barycentric coordinates."""
        ref = np.array([[-1.0, 1.0, 0.0], [-1.0, 0.0, 1.0]])
        return self.inverse_jacobian[cell].T @ ref

    def to_reference(self, cell: int, points: np.ndarray) -> np.ndarray:
        """Map physical points into reference coordinates of ``cell``."""
        origin = self.vertices[self.cells[cell, 0]]
        return (np.asarray(points) - origin) @ self.inverse_jacobian[cell].T

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Mesh):
            return NotImplemented
        return (
            np.array_equal(self.vertices, other.vertices)
            and np.array_equal(self.cells, other.cells)
            and self.boundary_tags() == other.boundary_tags()
        )

    def __repr__(self) -> str:
        return f"Mesh(vertices={self.n_vertices}, cells={self.n_cells}, faces={self.n_faces})"


def _tag_boundary(vertices: np.ndarray, cells: np.ndarray, tag_rule: TagRule) -> Dict[FaceKey, BoundaryTag]:
    count: Dict[FaceKey, int] = {}
    for cell in cells:
        for j in range(3):
            a, b = int(cell[(j + 1) % 3]), int(cell[(j + 2) % 3])
            key = (min(a, b), max(a, b))
            count[key] = count.get(key, 0) + 1
    return {
        key: tag_rule(0.5 * (vertices[key[0]] + vertices[key[1]]))
        for key, n in count.items() if n == 1
    }


def build_structured(n: int, tag_rule: str = "all-dirichlet") -> Mesh:
    """
    Split the unit square into n x n squares, each cut into two triangles
    along its anti-diagonal.

    Args:
        n: Number of squares per side (n >= 1)
        tag_rule: Boundary-tagging policy name from TAG_RULES
    """
    if n < 1:
        raise MeshValidationError(f"structured mesh needs n >= 1, got {n}")
    rule = get_tag_rule(tag_rule)
    grid = np.linspace(0.0, 1.0, n + 1)
    xs, ys = np.meshgrid(grid, grid)
    vertices = np.column_stack([xs.ravel(), ys.ravel()])
    cells = []
    for j in range(n):
        for i in range(n):
            v00 = j * (n + 1) + i
            v10, v01, v11 = v00 + 1, v00 + n + 1, v00 + n + 2
            cells.append((v00, v10, v01))
            cells.append((v11, v01, v10))
    cells = np.array(cells, dtype=np.int64)
    mesh = Mesh(vertices, cells, _tag_boundary(vertices, cells, rule))
    logger.debug(f"Built structured mesh n={n}: {mesh}")
    return mesh


def refine_uniform(mesh: Mesh) -> Mesh:
    """Split every triangle into four congruent children through its edge midpoints."""
    nv = mesh.n_vertices
    fv = mesh.vertices[mesh.face_vertices]
    vertices = np.vstack([mesh.vertices, fv.mean(axis=1)])
    cells = np.empty((4 * mesh.n_cells, 3), dtype=np.int64)
    for c, (v0, v1, v2) in enumerate(mesh.cells):
        m0, m1, m2 = nv + mesh.cell_faces[c]
        cells[4 * c:4 * c + 4] = [(v0, m2, m1), (m2, v1, m0), (m1, m0, v2), (m0, m1, m2)]

    tags: Dict[FaceKey, BoundaryTag] = {}
    for f in mesh.boundary_faces():
        a, b = (int(i) for i in mesh.face_vertices[f])
        m = nv + int(f)
        tags[(min(a, m), max(a, m))] = mesh.face_tags[f]
        tags[(min(b, m), max(b, m))] = mesh.face_tags[f]
    refined = Mesh(vertices, cells, tags)
    logger.debug(f"Refined {mesh} -> {refined}")
    return refined


def refine_times(mesh: Mesh, times: int) -> Mesh:
    for _ in range(times):
        mesh = refine_uniform(mesh)
    return mesh


def _hanging_node_free(mesh: Mesh) -> bool:
    # a vertex strictly inside a boundary edge means the edge is not conforming
    for f in mesh.boundary_faces():
        a, b = mesh.vertices[mesh.face_vertices[f]]
        ab = b - a
        rel = mesh.vertices - a
        cross = ab[0] * rel[:, 1] - ab[1] * rel[:, 0]
        t = rel @ ab / (ab @ ab)
        inside = (np.abs(cross) <= 1e-12 * (ab @ ab)) & (t > 1e-12) & (t < 1 - 1e-12)
        if np.any(inside):
            return False
    return True


def check_regularity(mesh: Mesh) -> RegularityReport:
    """Shape-regularity measures of the mesh; hanging nodes are reported, not raised."""
    h = mesh.cell_diameter
    lengths = mesh.cell_edge_lengths
    inscribed_diameter = 4.0 * mesh.cell_area / lengths.sum(axis=1)
    # law of cosines for the angle at vertex j, opposite edge j
    a = lengths
    b = np.roll(lengths, -1, axis=1)
    c = np.roll(lengths, 1, axis=1)
    cos_angle = np.clip((b ** 2 + c ** 2 - a ** 2) / (2 * b * c), -1.0, 1.0)
    return RegularityReport(
        kappa=float(np.min(mesh.cell_area / h ** DIM)),
        theta=float(np.max(h / inscribed_diameter)),
        min_angle=float(np.min(np.arccos(cos_angle))),
        hanging_node_free=_hanging_node_free(mesh),
    )


def save_mesh(mesh: Mesh) -> str:
    """Serialize a mesh to the canonical text format."""
    lines = [FORMAT_HEADER, f"vertices {mesh.n_vertices}"]
    lines += [f"{x!r} {y!r}" for x, y in mesh.vertices.tolist()]
    lines.append(f"cells {mesh.n_cells}")
    lines += [f"{i} {j} {k}" for i, j, k in mesh.cells.tolist()]
    boundary = mesh.boundary_faces()
    lines.append(f"boundary {len(boundary)}")
    for f in boundary:
        a, b = mesh.face_vertices[f]
        lines.append(f"{a} {b} {mesh.face_tags[f].value}")
    return "\n".join(lines) + "\n"


class _LineReader:
    def __init__(self, text: str):
        self.lines = [(n + 1, line.strip()) for n, line in enumerate(text.splitlines())]
        self.lines = [(n, line) for n, line in self.lines if line and not line.startswith("#")]
        self.pos = 0

    def next(self, what: str) -> Tuple[int, List[str]]:
        if self.pos >= len(self.lines):
            last = self.lines[-1][0] if self.lines else 0
            raise MeshFormatError(f"unexpected end of file while reading {what}", last + 1)
        number, line = self.lines[self.pos]
        self.pos += 1
        return number, line.split()

    def section(self, name: str) -> Tuple[int, int]:
        number, tokens = self.next(f"section '{name}'")
        if len(tokens) != 2 or tokens[0] != name:
            raise MeshFormatError(f"expected section '{name} <count>'", number)
        try:
            count = int(tokens[1])
        except ValueError:
            raise MeshFormatError(f"malformed count in section '{name}'", number) from None
        if count < 0:
            raise MeshFormatError(f"negative count in section '{name}'", number)
        return number, count


def load_mesh(text: str) -> Mesh:
    """Parse and validate the canonical mesh text format."""
    reader = _LineReader(text)
    number, tokens = reader.next("header")
    if " ".join(tokens) != FORMAT_HEADER:
        raise MeshFormatError(f"expected header '{FORMAT_HEADER}'", number)

    _, nv = reader.section("vertices")
    vertices = np.empty((nv, 2))
    for i in range(nv):
        number, tokens = reader.next("vertex")
        try:
            if len(tokens) != 2:
                raise ValueError
            vertices[i] = [float(t) for t in tokens]
        except ValueError:
            raise MeshFormatError("malformed line, expected 'x y'", number) from None

    _, nc = reader.section("cells")
    cells = np.empty((nc, 3), dtype=np.int64)
    seen_cells: Dict[Tuple[int, ...], int] = {}
    for i in range(nc):
        number, tokens = reader.next("cell")
        cells[i] = _parse_indices(tokens, 3, nv, number, "malformed line, expected 'i j k'")
        key = tuple(sorted(cells[i].tolist()))
        if len(set(key)) != 3:
            raise MeshFormatError("cell repeats a vertex", number)
        if key in seen_cells:
            raise MeshFormatError(f"duplicated cell (first listed on line {seen_cells[key]})", number)
        seen_cells[key] = number

    _, nb = reader.section("boundary")
    tags: Dict[FaceKey, BoundaryTag] = {}
    tag_lines: Dict[FaceKey, int] = {}
    for _ in range(nb):
        number, tokens = reader.next("boundary face")
        if len(tokens) != 3 or tokens[2] not in ("D", "N"):
            raise MeshFormatError("malformed line, expected 'i j D|N'", number)
        a, b = _parse_indices(tokens[:2], 2, nv, number, "malformed line, expected 'i j D|N'")
        key = (int(min(a, b)), int(max(a, b)))
        if key in tags:
            raise MeshFormatError(
                f"face {key} listed twice (first on line {tag_lines[key]})", number
            )
        tags[key] = BoundaryTag(tokens[2])
        tag_lines[key] = number

    if reader.pos < len(reader.lines):
        raise MeshFormatError("trailing content after boundary section", reader.lines[reader.pos][0])

    untagged = [key for key in _tag_boundary(vertices, cells, _all_dirichlet) if key not in tags]
    if untagged:
        raise MeshFormatError(f"untagged boundary face {untagged[0]}", reader.lines[-1][0])
    for key, line in tag_lines.items():
        if key not in _tag_boundary(vertices, cells, _all_dirichlet):
            raise MeshFormatError(f"tagged face {key} is not a boundary face", line)
    return Mesh(vertices, cells, tags)


def _parse_indices(tokens: Iterable[str], count: int, nv: int, line: int, message: str) -> np.ndarray:
    tokens = list(tokens)
    if len(tokens) != count:
        raise MeshFormatError(message, line)
    try:
        indices = np.array([int(t) for t in tokens], dtype=np.int64)
    except ValueError:
        raise MeshFormatError(message, line) from None
    bad = indices[(indices < 0) | (indices >= nv)]
    if len(bad):
        raise MeshFormatError(f"dangling vertex index {int(bad[0])} (mesh has {nv} vertices)", line)
    return indices
