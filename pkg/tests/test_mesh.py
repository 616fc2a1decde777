import os

import numpy as np
import pytest

from hdg_audit.mesh import (
    BoundaryTag,
    Mesh,
    build_structured,
    check_regularity,
    get_tag_rule,
    load_mesh,
    refine_times,
    refine_uniform,
    save_mesh,
)
from hdg_audit.utils import DegenerateCellError, MeshFormatError, MeshValidationError


def _replace_line(text: str, number: int, new: str) -> str:
    lines = text.splitlines()
    lines[number - 1] = new
    return "\n".join(lines) + "\n"


class TestStructuredMesh:
    def test_counts(self, mesh2):
        assert mesh2.n_vertices == 9
        assert mesh2.n_cells == 8
        assert mesh2.n_faces == 16
        assert len(mesh2.boundary_faces()) == 8
        assert len(mesh2.interior_faces()) == 8

    def test_geometry(self, mesh2):
        assert mesh2.area == pytest.approx(1.0)
        assert np.allclose(mesh2.cell_area, 0.125)
        assert mesh2.h_max == pytest.approx(np.sqrt(2.0) / 2.0)

    def test_rejects_nonpositive_n(self):
        with pytest.raises(MeshValidationError):
            build_structured(0)

    def test_unknown_tag_rule(self):
        with pytest.raises(MeshValidationError):
            get_tag_rule("everything-robin")

    def test_left_dirichlet_tags(self):
        mesh = build_structured(4, "left-dirichlet")
        dirichlet = mesh.boundary_faces(BoundaryTag.DIRICHLET)
        assert len(dirichlet) == 4
        assert np.allclose(mesh.face_midpoint[dirichlet, 0], 0.0)
        assert len(mesh.boundary_faces(BoundaryTag.NEUMANN)) == 12


class TestNormals:
    def test_outward(self, mesh4):
        mid = mesh4.face_midpoint[mesh4.cell_faces]  # (nc, 3, 2)
        outward = np.einsum("kjd,kjd->kj", mesh4.cell_normals, mid - mesh4.cell_centroid[:, None, :])
        assert np.all(outward > 0)

    def test_unit_length(self, mesh4):
        assert np.allclose(np.linalg.norm(mesh4.face_normal, axis=1), 1.0)

    def test_opposite_on_interior_faces(self, mesh4):
        for f in mesh4.interior_faces():
            plus, minus = mesh4.face_cells[f]
            n_plus = mesh4.cell_normals[plus, mesh4.local_face_index(plus, f)]
            n_minus = mesh4.cell_normals[minus, mesh4.local_face_index(minus, f)]
            assert np.allclose(n_plus, -n_minus)
            assert np.allclose(n_plus, mesh4.face_normal[f])

    def test_closed_boundary(self, mesh4):
        # sum of |e_j| n_j vanishes on every triangle
        lengths = mesh4.face_length[mesh4.cell_faces]
        total = np.einsum("kj,kjd->kd", lengths, mesh4.cell_normals)
        assert np.allclose(total, 0.0, atol=1e-14)

    def test_edge_lengths_match_faces(self, mesh4):
        assert np.allclose(mesh4.cell_edge_lengths, mesh4.face_length[mesh4.cell_faces])


class TestRefinement:
    def test_uniform_refinement_counts(self, mesh2):
        fine = refine_uniform(mesh2)
        assert fine.n_cells == 4 * mesh2.n_cells
        assert fine.n_vertices == mesh2.n_vertices + mesh2.n_faces
        assert fine.h_max == pytest.approx(mesh2.h_max / 2)
        assert fine.area == pytest.approx(1.0)

    def test_refinement_keeps_tags(self):
        mesh = build_structured(2, "left-dirichlet")
        fine = refine_times(mesh, 2)
        dirichlet = fine.boundary_faces(BoundaryTag.DIRICHLET)
        assert len(dirichlet) == 8
        assert np.allclose(fine.face_midpoint[dirichlet, 0], 0.0)

    def test_refinement_matches_structured(self):
        fine = refine_times(build_structured(2), 2)
        reference = build_structured(8)
        assert fine.n_cells == reference.n_cells
        assert fine.n_faces == reference.n_faces
        assert fine.h_max == pytest.approx(reference.h_max)


class TestRegularity:
    def test_structured(self, mesh4):
        report = check_regularity(mesh4)
        assert report.valid
        assert report.hanging_node_free
        assert report.min_angle == pytest.approx(np.pi / 4)
        assert report.kappa == pytest.approx(0.25)

    def test_invariant_under_refinement(self, mesh2):
        coarse = check_regularity(mesh2)
        fine = check_regularity(refine_times(mesh2, 2))
        assert fine.kappa == pytest.approx(coarse.kappa)
        assert fine.theta == pytest.approx(coarse.theta)


class TestValidation:
    def test_degenerate_cell(self):
        vertices = [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]
        tags = {(0, 1): BoundaryTag.DIRICHLET, (1, 2): BoundaryTag.DIRICHLET, (0, 2): BoundaryTag.DIRICHLET}
        with pytest.raises(DegenerateCellError):
            Mesh(vertices, [[0, 1, 2]], tags)

    def test_face_shared_by_three_cells(self):
        vertices = [[0.0, 0.0], [1.0, 0.0], [0.5, 1.0], [0.5, -1.0], [0.5, 2.0]]
        cells = [[0, 1, 2], [0, 3, 1], [0, 1, 4]]
        with pytest.raises(MeshValidationError):
            Mesh(vertices, cells, {})

    def test_untagged_boundary_face(self):
        vertices = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]
        with pytest.raises(MeshValidationError):
            Mesh(vertices, [[0, 1, 2]], {(0, 1): BoundaryTag.DIRICHLET})


class TestMeshFormat:
    def test_save_load(self):
        mesh = build_structured(3, "left-dirichlet")
        loaded = load_mesh(save_mesh(mesh))
        assert loaded == mesh

    def test_dangling_vertex_index(self):
        text = _replace_line(save_mesh(build_structured(1)), 8, "0 1 99")
        with pytest.raises(MeshFormatError) as excinfo:
            load_mesh(text)
        assert excinfo.value.line == 8
        assert "dangling" in str(excinfo.value)

    def test_duplicated_cell(self):
        text = save_mesh(build_structured(1))
        first_cell = text.splitlines()[7]
        with pytest.raises(MeshFormatError) as excinfo:
            load_mesh(_replace_line(text, 9, first_cell))
        assert excinfo.value.line == 9

    def test_malformed_vertex(self):
        text = _replace_line(save_mesh(build_structured(1)), 3, "0.0 zero")
        with pytest.raises(MeshFormatError) as excinfo:
            load_mesh(text)
        assert excinfo.value.line == 3

    def test_untagged_boundary_face(self):
        lines = save_mesh(build_structured(1)).splitlines()
        lines[9] = "boundary 3"
        with pytest.raises(MeshFormatError, match="untagged"):
            load_mesh("\n".join(lines[:-1]) + "\n")

    def test_bad_header(self):
        with pytest.raises(MeshFormatError) as excinfo:
            load_mesh("mesh 2\n")
        assert excinfo.value.line == 1

    def test_bundled_meshes(self):
        meshes_dir = os.path.join(os.path.dirname(__file__), os.pardir, "meshes")
        with open(os.path.join(meshes_dir, "unit_square_n2_left.hmesh"), encoding="utf-8") as f:
            assert load_mesh(f.read()) == build_structured(2, "left-dirichlet")
        with open(os.path.join(meshes_dir, "untagged_face.hmesh"), encoding="utf-8") as f:
            with pytest.raises(MeshFormatError, match="untagged"):
                load_mesh(f.read())
