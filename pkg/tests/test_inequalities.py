import numpy as np
import pytest

from hdg_audit.fields import (
    CellField,
    SkeletonField,
    boundary_subset,
    cell_trace_coeffs,
    diff_norm_skeleton,
    face_average,
    face_integral_of_cell,
    integral_boundary_subset,
    integral_domain,
    join_dofs,
    jump_integral,
    norm_L2_cells,
    random_cell_field,
    random_skeleton_field,
    seminorm_H1_broken,
    trace_of,
)
from hdg_audit.hdg import flux_from_primal
from hdg_audit.inequalities import (
    INEQUALITIES,
    AuditResult,
    CRFormBuilder,
    DofLayout,
    FormBuilder,
    QuadraticForm,
    VerdictPolicy,
    audit,
    audit_level,
    build_forms,
    cr_gradient_vs_flux,
    get_inequality,
    judge,
    sample_max,
    sweep,
    verdict_ok,
)
from hdg_audit.lifting import (
    CRField,
    boundary_lift,
    cr_boundary_integral,
    cr_integral_domain,
    cr_lift,
    cr_norm_boundary,
    cr_norm_cells,
    cr_seminorm_H1,
)
from hdg_audit.linalg import GenEigResult, gen_eig_max, power_cross_check
from hdg_audit.utils import EigenCrossCheckError, UnknownInequalityError


def _quadratic(matrix, x):
    return float(x @ (matrix @ x))


def _synthetic(values, bounded=True):
    h = [0.5 / 2 ** i for i in range(len(values))]
    return [
        AuditResult("hybrid-poincare-mean-cr", 1, level, h[level], 10, "eigen", v, bounded, float("nan"), 0, 0)
        for level, v in enumerate(values)
    ]


def _hybrid_terms(space, gamma, u, uhat):
    """Scalar building blocks of the hybrid forms, computed from the fields and lifting modules."""
    mesh = space.mesh
    boundary = mesh.boundary_faces()
    traces = trace_of(u).coeffs[boundary]
    w = cr_lift(face_average(uhat))
    return {
        "h": mesh.h_max,
        "mass": norm_L2_cells(u) ** 2,
        "grad": seminorm_H1_broken(u) ** 2,
        "mismatch": diff_norm_skeleton(u, uhat) ** 2,
        "mismatch_b": float(np.sum((traces - uhat.coeffs[boundary]) ** 2)),
        "trace_u_b": float(np.sum(traces ** 2)),
        "uhat_b": float(np.sum(uhat.coeffs[boundary] ** 2)),
        "cr_grad": cr_seminorm_H1(w) ** 2,
        "cr_mass": cr_norm_cells(w) ** 2,
        "cr_int": cr_integral_domain(w),
        "u_int": integral_domain(u),
        "gamma_uhat": integral_boundary_subset(uhat, gamma),
        "gamma_u": integral_boundary_subset(u, gamma),
        "flux": norm_L2_cells(flux_from_primal(u, uhat)) ** 2,
        "jump": sum(
            float(np.sum(jump_integral(u, f) ** 2)) / mesh.face_length[f] ** 2 for f in mesh.interior_faces()
        ),
    }


def _hybrid_functional(inequality_id, t):
    h = t["h"]
    poincare_last = {"mean-cr": t["cr_int"], "mean": t["cr_int"], "boundary": t["gamma_uhat"], "mean-u": t["u_int"]}
    if inequality_id.startswith("hybrid-poincare-"):
        last = poincare_last[inequality_id[len("hybrid-poincare-"):]]
        return t["mass"], h ** 2 * t["grad"] + t["cr_grad"] + h * t["mismatch"] + last ** 2
    if inequality_id == "negative-hybrid-poincare-no-mismatch":
        return t["mass"], h ** 2 * t["grad"] + t["cr_grad"] + t["cr_int"] ** 2
    if inequality_id.startswith("hybrid-trace-"):
        a = t["trace_u_b"] if inequality_id.endswith("-u") else t["uhat_b"]
        return a, h * t["grad"] + t["mismatch_b"] + (1 + h) * t["cr_grad"] + t["gamma_uhat"] ** 2
    if inequality_id.startswith("ph-poincare-"):
        last = poincare_last[inequality_id[len("ph-poincare-"):]]
        return t["mass"], (1 + h ** 2) * t["flux"] + h * t["mismatch"] + last ** 2
    if inequality_id.startswith("ph-trace-"):
        a = t["trace_u_b"] if inequality_id.endswith("-u") else t["uhat_b"]
        return a, (1 + h) * t["flux"] + t["mismatch"] + t["gamma_uhat"] ** 2
    if inequality_id == "l2-estimate":
        return t["mass"], h ** 2 * t["grad"] + h * t["mismatch"] + t["cr_mass"]
    if inequality_id == "integral-difference":
        return t["cr_int"] ** 2, h ** 2 * t["grad"] + h * t["mismatch"] + t["u_int"] ** 2
    if inequality_id == "gradient-estimate":
        return t["grad"], t["flux"] + t["mismatch"] / h
    if inequality_id.startswith("brenner-"):
        last = t["u_int"] if inequality_id == "brenner-mean" else t["gamma_u"]
        return t["mass"], t["grad"] + t["jump"] + last ** 2
    raise KeyError(inequality_id)


def _cr_functional(inequality_id, w, gamma, h):
    grad, integral, boundary = cr_seminorm_H1(w) ** 2, cr_integral_domain(w), cr_boundary_integral(w, gamma)
    return {
        "cr-trace-mean": (cr_norm_boundary(w) ** 2, (1 + h ** 2) * grad + integral ** 2),
        "cr-trace-boundary": (cr_norm_boundary(w) ** 2, (1 + h) * grad + boundary ** 2),
        "cr-poincare-mean": (cr_norm_cells(w) ** 2, grad + integral ** 2),
        "cr-poincare-boundary": (cr_norm_cells(w) ** 2, grad + boundary ** 2),
    }[inequality_id]


def _single_cell(space, cell, x):
    coeffs = np.zeros((space.mesh.n_cells, space.n_cell_basis))
    coeffs[cell] = x
    return CellField(space, coeffs)


def _local_functional(inequality_id, space, member_index, x):
    """(lhs, rhs) of one member of a single-cell family, from the fields and lifting modules."""
    mesh = space.mesh
    if inequality_id == "lift-bound":
        cell = member_index
        lift = boundary_lift(space, cell, x)
        return float(np.sum(lift ** 2)), float(x @ x) / mesh.cell_diameter[cell]
    if inequality_id == "simplex-poincare":
        cell, face = member_index, None
    else:
        cell, face = divmod(member_index, 3)
    u = _single_cell(space, cell, x)
    mass, integral, area = norm_L2_cells(u) ** 2, integral_domain(u), mesh.cell_area[cell]
    if inequality_id == "simplex-trace":
        return float(np.sum(cell_trace_coeffs(u)[cell, face] ** 2)), mass
    grad = seminorm_H1_broken(u) ** 2
    if inequality_id == "simplex-poincare":
        return mass - integral ** 2 / area, grad
    face_mean = face_integral_of_cell(u, cell, face) / mesh.face_length[mesh.cell_faces[cell, face]]
    if inequality_id == "simplex-poincare-face-mean":
        return mass - 2 * face_mean * integral + area * face_mean ** 2, grad
    return area * (integral / area - face_mean) ** 2, grad


LOCAL_IDS = ["simplex-trace", "simplex-poincare", "simplex-poincare-face-mean", "simplex-poincare-mean-diff", "lift-bound"]
CR_IDS = ["cr-trace-mean", "cr-trace-boundary", "cr-poincare-mean", "cr-poincare-boundary"]
HYBRID_IDS = sorted(set(INEQUALITIES) - set(LOCAL_IDS) - set(CR_IDS))


class TestFormBuilder:
    @pytest.fixture
    def setup(self, make_space, rng):
        space = make_space(k=1, n=2)
        u, uhat = random_cell_field(space, rng), random_skeleton_field(space, rng)
        return FormBuilder(space), u, uhat, join_dofs(u, uhat)

    def test_cell_terms(self, setup):
        fb, u, uhat, x = setup
        assert _quadratic(fb.mass_u(), x) == pytest.approx(norm_L2_cells(u) ** 2)
        assert _quadratic(fb.gradgrad(), x) == pytest.approx(seminorm_H1_broken(u) ** 2)
        assert fb.u_integral_vector() @ x == pytest.approx(integral_domain(u))

    def test_mismatch(self, setup):
        fb, u, uhat, x = setup
        assert _quadratic(fb.mismatch(), x) == pytest.approx(diff_norm_skeleton(u, uhat) ** 2)

    def test_boundary_terms(self, setup):
        fb, u, uhat, x = setup
        faces = fb.mesh.boundary_faces()
        zero = SkeletonField.zeros(fb.space)
        u_only = join_dofs(u, zero)
        assert _quadratic(fb.boundary_trace_u(), x) == pytest.approx(_quadratic(fb.mismatch(boundary_only=True), u_only))
        assert _quadratic(fb.boundary_uhat(), x) == pytest.approx(float(np.sum(uhat.coeffs[faces] ** 2)))
        # with u = 0 the boundary mismatch is the boundary norm of uhat
        hat_only = join_dofs(CellField.zeros(fb.space), uhat)
        assert _quadratic(fb.mismatch(boundary_only=True), hat_only) == pytest.approx(_quadratic(fb.boundary_uhat(), x))

    def test_cr_terms(self, setup):
        fb, u, uhat, x = setup
        w = cr_lift(face_average(uhat))
        grad = fb.cr_gradient_operator() @ x
        mass = fb.cr_mass_operator() @ x
        assert grad @ grad == pytest.approx(cr_seminorm_H1(w) ** 2)
        assert mass @ mass == pytest.approx(cr_norm_cells(w) ** 2)
        assert fb.cr_integral_vector() @ x == pytest.approx(cr_integral_domain(w))

    def test_flux_term(self, setup):
        fb, u, uhat, x = setup
        p = fb.flux_operator() @ x
        assert p @ p == pytest.approx(norm_L2_cells(flux_from_primal(u, uhat)) ** 2)

    def test_jump_term(self, setup):
        fb, u, uhat, x = setup
        mesh = fb.mesh
        expected = sum(
            float(np.sum(jump_integral(u, f) ** 2)) / mesh.face_length[f] ** 2 for f in mesh.interior_faces()
        )
        rows = fb.jump_operator() @ x
        assert rows @ rows == pytest.approx(expected)

    def test_gamma_vector(self, setup):
        fb, u, uhat, x = setup
        left = boundary_subset(fb.mesh, "left")
        expected = float(np.sum(fb.kernels.face_integral[left] * uhat.coeffs[left]))
        assert fb.gamma_vector(left) @ x == pytest.approx(expected)

    def test_layouts(self, setup):
        fb = setup[0]
        assert fb.layout().n_dof == fb.n
        assert fb.layout(("u",)).n_dof == fb.n_u
        assert fb.layout(("cr",)).n_dof == fb.mesh.n_faces


class TestCRFormBuilder:
    def test_terms_match_lift(self, make_space, rng):
        space = make_space(k=0, n=4)
        w = cr_lift(random_skeleton_field(space, rng))
        cb = CRFormBuilder(space)
        grad = cb.gradient_operator() @ w.values
        mass = cb.mass_operator() @ w.values
        left = boundary_subset(space.mesh, "left")
        assert grad @ grad == pytest.approx(cr_seminorm_H1(w) ** 2)
        assert mass @ mass == pytest.approx(cr_norm_cells(w) ** 2)
        assert cb.integral_vector() @ w.values == pytest.approx(cr_integral_domain(w))
        assert cb.gamma_vector(left) @ w.values == pytest.approx(cr_boundary_integral(w, left))
        assert _quadratic(cb.boundary_trace(), w.values) == pytest.approx(cr_norm_boundary(w) ** 2)


class TestRegistry:
    def test_unknown_id(self):
        with pytest.raises(UnknownInequalityError):
            get_inequality("young")

    def test_only_negative_control_expects_failure(self):
        failing = [defn.id for defn in INEQUALITIES.values() if not defn.expect_bounded]
        assert failing == ["negative-hybrid-poincare-no-mismatch"]

    @pytest.mark.parametrize("inequality_id", sorted(INEQUALITIES))
    def test_forms_are_symmetric_psd(self, make_space, inequality_id):
        space = make_space(k=1, n=2)
        forms = build_forms(inequality_id, space)
        pairs = [(m.a, m.b) for m in forms] if get_inequality(inequality_id).local else [(forms[0].matrix, forms[1].matrix)]
        for a, b in pairs:
            for matrix in (a, b):
                assert np.allclose(matrix, matrix.T)
                assert np.min(np.linalg.eigvalsh(matrix)) >= -1e-9 * max(1.0, np.abs(matrix).max())


class TestFormFidelity:
    """Every registered form reproduces its functional evaluated by the fields and lifting modules."""

    @pytest.mark.parametrize("k", [1, 2])
    @pytest.mark.parametrize("inequality_id", HYBRID_IDS)
    def test_hybrid_forms(self, make_space, rng, inequality_id, k):
        space = make_space(k=k, n=2)
        gamma = boundary_subset(space.mesh, "left")
        lhs, rhs = build_forms(inequality_id, space)
        for _ in range(100):
            u, uhat = random_cell_field(space, rng), random_skeleton_field(space, rng)
            x = u.coeffs.ravel() if inequality_id.startswith("brenner-") else join_dofs(u, uhat)
            expected_a, expected_b = _hybrid_functional(inequality_id, _hybrid_terms(space, gamma, u, uhat))
            assert lhs.value(x) == pytest.approx(expected_a, rel=1e-10, abs=1e-10)
            assert rhs.value(x) == pytest.approx(expected_b, rel=1e-10, abs=1e-10)

    @pytest.mark.parametrize("inequality_id", CR_IDS)
    def test_cr_forms(self, make_space, rng, inequality_id):
        space = make_space(k=1, n=2)
        mesh = space.mesh
        gamma = boundary_subset(mesh, "left")
        lhs, rhs = build_forms(inequality_id, space)
        for _ in range(100):
            w = CRField(mesh, rng.standard_normal(mesh.n_faces))
            expected_a, expected_b = _cr_functional(inequality_id, w, gamma, mesh.h_max)
            assert lhs.value(w.values) == pytest.approx(expected_a, rel=1e-10, abs=1e-10)
            assert rhs.value(w.values) == pytest.approx(expected_b, rel=1e-10, abs=1e-10)

    @pytest.mark.parametrize("k", [1, 2])
    @pytest.mark.parametrize("inequality_id", LOCAL_IDS)
    def test_local_forms(self, make_space, rng, inequality_id, k):
        space = make_space(k=k, n=2)
        members = build_forms(inequality_id, space)
        for draw in range(100):
            index = draw % len(members)
            member = members[index]
            x = rng.standard_normal(member.a.shape[0])
            expected_a, expected_b = _local_functional(inequality_id, space, index, x)
            assert _quadratic(member.a, x) == pytest.approx(expected_a, rel=1e-10, abs=1e-10)
            assert _quadratic(member.b, x) == pytest.approx(expected_b, rel=1e-10, abs=1e-10)

    def test_every_id_is_covered(self):
        assert set(HYBRID_IDS) | set(CR_IDS) | set(LOCAL_IDS) == set(INEQUALITIES)
        assert "brenner-boundary" in HYBRID_IDS


class TestAudit:
    @pytest.mark.parametrize("level", [0, 3])
    @pytest.mark.parametrize("k", [0, 1, 2, 3])
    def test_simplex_trace_constant(self, k, level):
        result = audit_level("simplex-trace", k, level)
        bound = get_inequality("simplex-trace").bound(k)
        assert result.bounded
        assert result.lambda_max <= bound * (1 + 1e-10)
        if k == 0:
            assert result.lambda_max == pytest.approx(1.0)

    @pytest.mark.parametrize("inequality_id", [
        "simplex-poincare", "simplex-poincare-face-mean", "simplex-poincare-mean-diff",
    ])
    def test_simplex_poincare_scales_with_diameter_squared(self, make_space, inequality_id):
        coarse = max(gen_eig_max(m.a, m.b).lambda_max for m in build_forms(inequality_id, make_space(k=2, n=2)))
        fine = max(gen_eig_max(m.a, m.b).lambda_max for m in build_forms(inequality_id, make_space(k=2, n=4)))
        assert fine == pytest.approx(coarse / 4.0, rel=1e-9)
        normalized = [audit_level(inequality_id, 2, level).lambda_max for level in range(3)]
        assert normalized == pytest.approx([normalized[0]] * 3, rel=1e-9)

    def test_power_iteration_agrees_on_a_registered_form(self, make_space):
        lhs, rhs = build_forms("hybrid-poincare-mean-cr", make_space(k=1, n=2))
        result = gen_eig_max(lhs.matrix, rhs.matrix)
        power = power_cross_check(lhs.matrix, rhs.matrix, start=result.witness)
        assert power == pytest.approx(result.lambda_max, rel=1e-8)

    def test_wrong_eigenvalue_is_rejected(self, make_space, mocker):
        forms = build_forms("hybrid-poincare-mean-cr", make_space(k=1, n=2))
        true = gen_eig_max(forms[0].matrix, forms[1].matrix)
        mocker.patch(
            "hdg_audit.inequalities.gen_eig_max",
            return_value=GenEigResult(0.5 * true.lambda_max, true.witness, True, true.null_dim),
        )
        with pytest.raises(EigenCrossCheckError):
            audit(forms)

    def test_wrong_local_eigenvalue_is_rejected(self, mocker):
        real = gen_eig_max

        def halved(a, b, null_tol):
            result = real(a, b, null_tol)
            return GenEigResult(0.5 * result.lambda_max, result.witness, result.bounded, result.null_dim)

        mocker.patch("hdg_audit.inequalities.gen_eig_max", side_effect=halved)
        with pytest.raises(EigenCrossCheckError):
            audit_level("lift-bound", 1, 0)

    def test_level_sizes(self):
        result = audit_level("hybrid-poincare-mean-cr", 1, 1)
        assert result.h_max == pytest.approx(np.sqrt(2.0) / 4.0)
        assert result.n_dof == 32 * 3 + 56 * 2

    def test_sample_never_exceeds_eigen(self):
        result = audit_level("hybrid-poincare-boundary", 1, 0, mode="eigen", n_samples=500, seed=3)
        assert result.bounded
        assert 0 < result.sample_max <= result.lambda_max * (1 + 1e-9)

    def test_sample_mode_is_deterministic(self):
        first = audit_level("cr-poincare-mean", 1, 0, mode="sample", n_samples=300, seed=11)
        second = audit_level("cr-poincare-mean", 1, 0, mode="sample", n_samples=300, seed=11)
        assert first.sample_max == second.sample_max
        assert np.isnan(first.lambda_max)
        other = audit_level("cr-poincare-mean", 1, 0, mode="sample", n_samples=300, seed=12)
        assert other.sample_max != first.sample_max

    def test_sample_max_skips_null_directions(self, rng):
        a = np.eye(3)
        b = np.zeros((3, 3))
        assert np.isnan(sample_max(a, b, 100, rng))

    def test_unknown_mode(self, make_space):
        forms = build_forms("l2-estimate", make_space(k=1, n=2))
        with pytest.raises(ValueError):
            audit(forms, mode="guess")

    def test_layout_mismatch(self):
        a = QuadraticForm(np.eye(2), DofLayout(("u",), 1, 2, "m"), "a")
        b = QuadraticForm(np.eye(2), DofLayout(("cr",), 1, 2, "m"), "b")
        with pytest.raises(ValueError):
            audit((a, b))

    def test_negative_control(self):
        result = sweep("negative-hybrid-poincare-no-mismatch", 1, 2)
        assert result.verdict == "expected-fail"
        assert verdict_ok(result.verdict)
        assert not any(r.bounded for r in result.results)
        assert result.results[0].to_row()[6] == "unbounded"

    def test_result_dict(self):
        result = audit_level("lift-bound", 1, 0)
        data = result.to_dict()
        assert "witness" not in data
        restored = AuditResult.from_dict(data)
        assert restored.inequality == "lift-bound"
        assert restored.lambda_max == result.lambda_max
        assert restored.witness is None


class TestJudge:
    def test_stable_constants_pass(self):
        result = judge("hybrid-poincare-mean-cr", _synthetic([1.0, 1.1, 1.15]))
        assert result.verdict == "pass"
        assert result.ratio == pytest.approx(1.15)
        assert all(r.verdict == "pass" for r in result.results)

    def test_growing_constants_fail(self):
        result = judge("hybrid-poincare-mean-cr", _synthetic([1.0, 2.0, 4.0]))
        assert result.verdict == "fail"
        assert result.slope == pytest.approx(-1.0)
        assert not verdict_ok(result.verdict)

    def test_custom_policy(self):
        result = judge("hybrid-poincare-mean-cr", _synthetic([1.0, 2.0, 4.0]), VerdictPolicy(max_ratio=5.0, max_slope=1.5))
        assert result.verdict == "pass"

    def test_unbounded_level_fails(self):
        results = _synthetic([1.0, 1.0])
        results[1].bounded = False
        results[1].lambda_max = float("inf")
        assert judge("hybrid-poincare-mean-cr", results).verdict == "fail"

    def test_negative_control_passing_is_flagged(self):
        results = _synthetic([1.0, 1.0])
        for r in results:
            r.inequality = "negative-hybrid-poincare-no-mismatch"
        verdict = judge("negative-hybrid-poincare-no-mismatch", results).verdict
        assert verdict == "unexpected-pass"
        assert not verdict_ok(verdict)


class TestCRGradientAgainstFlux:
    @pytest.mark.parametrize("k", [1, 2])
    def test_bound_on_every_cell(self, make_space, rng, k):
        space = make_space(k=k, n=2)
        for _ in range(1000):
            u, uhat = random_cell_field(space, rng), random_skeleton_field(space, rng)
            lhs, rhs = cr_gradient_vs_flux(u, uhat)
            assert np.all(lhs <= rhs * (1 + 1e-12) + 1e-13)


@pytest.mark.integration
class TestRefinementSweeps:
    HYBRID_AND_FLUX = [
        "hybrid-poincare-mean-cr",
        "hybrid-poincare-boundary",
        "hybrid-poincare-mean-u",
        "hybrid-trace-u",
        "hybrid-trace-uhat",
        "ph-poincare-mean",
        "ph-poincare-boundary",
        "ph-poincare-mean-u",
        "ph-trace-u",
        "ph-trace-uhat",
        "brenner-mean",
        "brenner-boundary",
    ]

    @pytest.mark.parametrize("k", [1, 2])
    @pytest.mark.parametrize("inequality_id", HYBRID_AND_FLUX)
    def test_bounded_under_refinement(self, inequality_id, k):
        result = sweep(inequality_id, k, 4)
        assert result.verdict == "pass", f"ratio {result.ratio}, slope {result.slope}"
        assert all(r.bounded for r in result.results)

    @pytest.mark.parametrize("inequality_id", CR_IDS)
    def test_cr_bounded_under_refinement(self, inequality_id):
        result = sweep(inequality_id, 1, 4)
        assert result.verdict == "pass", f"ratio {result.ratio}, slope {result.slope}"
