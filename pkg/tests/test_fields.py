import numpy as np
import pytest

from hdg_audit.fields import (
    CellField,
    HybridSpace,
    SkeletonField,
    boundary_integral_vector,
    boundary_subset,
    diff_norm_skeleton,
    face_average,
    face_mean_values,
    integral_boundary_subset,
    integral_domain,
    jump_integral,
    join_dofs,
    norm_L2_cells,
    norm_skeleton,
    project_cells,
    project_skeleton,
    random_cell_field,
    random_skeleton_field,
    seminorm_H1_broken,
    split_dofs,
    to_csv_rows,
    trace_norm_skeleton,
    trace_of,
    validate_boundary_subset,
)
from hdg_audit.utils import EmptyBoundarySubsetError, FieldMismatchError, InteriorFaceRequiredError


def _one(x, y):
    return np.ones_like(x)


def _x(x, y):
    return x


def _y(x, y):
    return y


class TestNorms:
    def test_constant(self, make_space):
        space = make_space(k=1, n=4)
        u = project_cells(space, _one)
        assert norm_L2_cells(u) == pytest.approx(1.0)
        assert integral_domain(u) == pytest.approx(1.0)
        assert seminorm_H1_broken(u) == pytest.approx(0.0, abs=1e-12)

    def test_affine(self, make_space):
        space = make_space(k=1, n=4)
        u = project_cells(space, _x)
        assert seminorm_H1_broken(u) == pytest.approx(1.0)
        assert integral_domain(u) == pytest.approx(0.5)
        assert norm_L2_cells(u) == pytest.approx(np.sqrt(1.0 / 3.0))

    def test_trace_norm_counts_both_sides(self, make_space):
        space = make_space(k=0, n=2)
        u = project_cells(space, _one)
        assert trace_norm_skeleton(u) ** 2 == pytest.approx(space.mesh.cell_edge_lengths.sum())

    def test_skeleton_counting(self, make_space):
        space = make_space(k=0, n=2)
        uhat = project_skeleton(space, _one)
        mesh = space.mesh
        assert norm_skeleton(uhat, "once") ** 2 == pytest.approx(mesh.face_length.sum())
        twice = mesh.face_length.sum() + mesh.face_length[mesh.interior_faces()].sum()
        assert norm_skeleton(uhat, "hdg") ** 2 == pytest.approx(twice)
        with pytest.raises(ValueError):
            norm_skeleton(uhat, "thrice")

    def test_mismatch_vanishes_on_continuous_data(self, make_space):
        space = make_space(k=2, n=4)
        u = project_cells(space, lambda x, y: x * y + 2 * y)
        assert diff_norm_skeleton(u, trace_of(u)) ** 2 == pytest.approx(0.0, abs=1e-11)

    def test_mismatch_of_constants(self, make_space):
        space = make_space(k=1, n=2)
        u = project_cells(space, _one)
        uhat = SkeletonField.zeros(space)
        assert diff_norm_skeleton(u, uhat) ** 2 == pytest.approx(space.mesh.cell_edge_lengths.sum())


class TestJumpsAndAverages:
    def test_jump_of_continuous_function(self, make_space):
        space = make_space(k=1, n=4)
        u = project_cells(space, _x)
        for f in space.mesh.interior_faces():
            assert np.allclose(jump_integral(u, f), 0.0, atol=1e-13)

    def test_jump_of_cellwise_constant(self, make_space):
        space = make_space(k=0, n=2)
        mesh = space.mesh
        values = np.arange(mesh.n_cells, dtype=float)
        u = CellField(space, (values * np.sqrt(mesh.cell_area))[:, None])
        f = mesh.interior_faces()[0]
        plus, minus = mesh.face_cells[f]
        expected = mesh.face_length[f] * (values[plus] - values[minus]) * mesh.face_normal[f]
        assert np.allclose(jump_integral(u, f), expected)

    def test_jump_rejects_boundary_face(self, make_space):
        space = make_space(k=1, n=2)
        with pytest.raises(InteriorFaceRequiredError):
            jump_integral(CellField.zeros(space), space.mesh.boundary_faces()[0])

    def test_face_average(self, make_space):
        space = make_space(k=2, n=2)
        uhat = project_skeleton(space, _x)
        mean = face_average(uhat)
        assert mean.k == 0
        assert mean.space is space.with_degree(0)
        assert np.allclose(face_mean_values(mean), space.mesh.face_midpoint[:, 0])
        assert np.allclose(face_mean_values(uhat), space.mesh.face_midpoint[:, 0])


class TestBoundarySubsets:
    def test_named_subsets(self, mesh4):
        left = boundary_subset(mesh4, "left")
        assert len(left) == 4
        assert np.allclose(mesh4.face_midpoint[left, 0], 0.0)
        assert len(boundary_subset(mesh4, "all")) == 16
        assert len(boundary_subset(mesh4, "dirichlet")) == 16
        with pytest.raises(EmptyBoundarySubsetError):
            boundary_subset(mesh4, "middle")

    def test_empty_neumann_subset(self, mesh4):
        with pytest.raises(EmptyBoundarySubsetError):
            validate_boundary_subset(mesh4, boundary_subset(mesh4, "neumann"))

    def test_interior_face_rejected(self, mesh4):
        with pytest.raises(EmptyBoundarySubsetError):
            validate_boundary_subset(mesh4, mesh4.interior_faces()[:1])

    def test_boundary_integrals(self, make_space):
        space = make_space(k=1, n=4)
        left = boundary_subset(space.mesh, "left")
        bottom = boundary_subset(space.mesh, "bottom")
        u = project_cells(space, _y)
        uhat = project_skeleton(space, _x)
        assert integral_boundary_subset(u, left) == pytest.approx(0.5)
        assert integral_boundary_subset(uhat, bottom) == pytest.approx(0.5)
        x = join_dofs(u, uhat)
        assert boundary_integral_vector(space, left, "u") @ x == pytest.approx(0.5)
        assert boundary_integral_vector(space, bottom, "uhat") @ x == pytest.approx(0.5)


class TestContainers:
    def test_shape_checks(self, make_space):
        space = make_space(k=1, n=2)
        with pytest.raises(FieldMismatchError):
            CellField(space, np.zeros((space.mesh.n_cells, 2)))
        with pytest.raises(FieldMismatchError):
            SkeletonField(space, np.zeros(space.mesh.n_faces))

    def test_mixed_degrees_rejected(self, make_space):
        space = make_space(k=1, n=2)
        other = space.with_degree(2)
        with pytest.raises(FieldMismatchError):
            diff_norm_skeleton(CellField.zeros(space), SkeletonField.zeros(other))

    def test_split_join(self, make_space, rng):
        space = make_space(k=2, n=2)
        u, uhat = random_cell_field(space, rng), random_skeleton_field(space, rng)
        u2, uhat2 = split_dofs(space, join_dofs(u, uhat))
        assert np.array_equal(u2.coeffs, u.coeffs)
        assert np.array_equal(uhat2.coeffs, uhat.coeffs)

    def test_with_degree_is_shared(self, make_space):
        space = make_space(k=1, n=2)
        assert space.with_degree(0) is space.with_degree(0)
        assert space.with_degree(0).with_degree(1) is space

    def test_csv_rows(self, make_space):
        space = make_space(k=1, n=2)
        rows = to_csv_rows(project_cells(space, _one))
        assert len(rows) == space.mesh.n_cells
        assert rows[0][:3] == ["cell", "1", "0"]
        assert len(rows[0]) == 3 + space.n_cell_basis

    def test_space_sizes(self, mesh2):
        space = HybridSpace(mesh2, 2)
        assert space.n_cell_dofs == 8 * 6
        assert space.n_face_dofs == 16 * 3
