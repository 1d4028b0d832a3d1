"""
Tests for manufactured cases and the convergence harness.
"""
import json
from unittest.mock import patch

import numpy as np
import pytest

from src.harness.cases import case_2d, case_3d, get_case, mesh_family, rigid_motion_case
from src.harness.convergence import (
    StudyError,
    StudyReport,
    compute_errors,
    fit_rate,
    run_convergence,
    solve_case,
)
from src.solver.stokes import SolverError


class TestCases:
    @pytest.mark.parametrize("factory", [case_2d, case_3d])
    def test_divergence_free(self, factory):
        assert factory().max_divergence() < 1e-12

    @pytest.mark.parametrize("factory", [case_2d, case_3d])
    def test_forcing_vanishes_at_origin(self, factory):
        """The vortex fields are odd around the origin."""
        case = factory(0.5)
        np.testing.assert_allclose(case.f(np.zeros((1, case.dim))), 0.0, atol=1e-14)

    def test_forcing_scales_with_nu(self):
        """f = -nu lap u + grad p, so the nu-dependent part is linear."""
        x = np.array([[0.1, -0.05], [0.2, 0.13]])
        f1, f2, f3 = (case_2d(nu).f(x) for nu in (1.0, 2.0, 3.0))
        np.testing.assert_allclose(f3 - f2, f2 - f1, atol=1e-12)

    def test_gradient_matches_finite_differences(self):
        case = case_3d()
        x = np.array([[0.07, -0.11, 0.19]])
        eps = 1e-6
        fd = np.column_stack([
            (case.u_exact(x + eps * e) - case.u_exact(x - eps * e))[0] / (2 * eps) for e in np.eye(3)
        ])
        np.testing.assert_allclose(case.grad_u(x)[0], fd, atol=1e-6)

    def test_rigid_motion(self):
        case = rigid_motion_case(3, pressure=2.0)
        assert case.max_divergence() < 1e-14
        x = np.random.default_rng(0).standard_normal((5, 3))
        np.testing.assert_array_equal(case.f(x), 0.0)
        np.testing.assert_array_equal(case.p_exact(x), 2.0)

    def test_get_case(self):
        assert get_case("vortex_2d", nu=0.1).nu == 0.1
        assert get_case("rigid_3d").dim == 3
        with pytest.raises(ValueError):
            get_case("poiseuille")

    def test_rigid_dimension(self):
        with pytest.raises(ValueError):
            rigid_motion_case(4)


def test_mesh_family_coarsest_first():
    meshes = mesh_family([0.05, 0.1])
    assert meshes[0].parent.h > meshes[1].parent.h
    assert meshes[0].n_boxes < meshes[1].n_boxes


class TestFitRate:
    def test_linear(self):
        assert fit_rate([(h, 3.0 * h) for h in (0.1, 0.05, 0.025)]) == pytest.approx(1.0)

    def test_quadratic(self):
        assert fit_rate([(h, 0.5 * h ** 2) for h in (0.1, 0.05)]) == pytest.approx(2.0)

    def test_too_few_points(self):
        """Zero errors are not usable points."""
        with pytest.raises(ValueError):
            fit_rate([(0.1, 1.0), (0.05, 0.0)])


class TestErrors:
    def test_rigid_motion_errors_vanish(self, jittered_dual):
        case = rigid_motion_case(2, pressure=1.0)
        sol = solve_case(jittered_dual, case)
        e_u, e_p = compute_errors(sol, case)
        assert e_u < 1e-9
        assert e_p < 1e-9

    def test_dimension_mismatch(self, coarse_dual):
        sol = solve_case(coarse_dual, case_2d())
        with pytest.raises(ValueError):
            compute_errors(sol, case_3d())

    def test_unknown_method(self, coarse_dual):
        with pytest.raises(ValueError):
            solve_case(coarse_dual, case_2d(), {"method": "uzawa"})


@pytest.fixture
def report():
    """Three levels with first-order errors, inserted out of order."""
    rep = StudyReport(case="vortex_2d", nu=1.0, solver={"method": "monolithic"})
    for h in (0.05, 0.1, 0.025):
        rep.add_level(h, 2.0 * h, 0.4 * h, int(1 / h ** 2), 1)
    return rep


class TestStudyReport:
    def test_rows_sorted(self, report):
        assert list(report.rows["h"]) == [0.1, 0.05, 0.025]
        assert not report.low_confidence

    def test_rates_and_check(self, report):
        assert report.rates["e_u_h1"] == pytest.approx(1.0)
        assert report.rates["e_p_l2"] == pytest.approx(1.0)
        assert report.check() == []

    def test_check_failures(self, report):
        """Rates outside the window and incomplete studies are reported."""
        assert len(report.check(window=(1.5, 2.5))) == 2
        report.status = "incomplete"
        assert "study incomplete" in report.check()

    def test_non_monotone(self, report):
        report.add_level(0.0125, 1.0, 0.001, 6400, 1)
        failures = report.check(window=(-10.0, 10.0))
        assert failures == ["e_u_h1 is not decreasing under refinement"]

    def test_low_confidence(self):
        rep = StudyReport(case="vortex_2d", nu=1.0)
        rep.add_level(0.1, 0.2, 0.04, 100, 1)
        assert rep.low_confidence
        assert rep.rates["e_u_h1"] is None

    def test_level_rates(self, report):
        frame = report.level_rates()
        assert np.isnan(frame["rate_e_u_h1"].iloc[0])
        np.testing.assert_allclose(frame["rate_e_u_h1"].iloc[1:], 1.0)

    def test_build_id(self, report):
        """The id depends on the configuration, not on the results."""
        other = StudyReport(case="vortex_2d", nu=1.0, solver={"method": "monolithic"})
        assert other.build_id == report.build_id
        other.nu = 0.5
        assert other.build_id != report.build_id

    def test_write(self, report, tmp_path):
        paths = report.write(tmp_path / "out", prefix="vortex")
        assert all(p.exists() for p in paths.values())
        data = json.loads(paths["json"].read_text())
        assert data["status"] == "complete"
        assert len(data["levels"]) == 3
        assert data["rates"]["e_u_h1"] == pytest.approx(1.0)
        lines = paths["dat"].read_text().splitlines()
        assert lines[0].startswith("# vortex_2d")
        assert len(lines) == 5


class TestRunConvergence:
    def test_3d_without_meshes_is_skipped(self):
        rep = run_convergence(case_3d(), levels=[0.1])
        assert rep.status == "skipped"
        assert rep.rows.empty

    def test_needs_levels(self):
        with pytest.raises(ValueError):
            run_convergence(case_2d(), levels=[])

    def test_two_levels(self):
        rep = run_convergence(case_2d(), levels=[0.1, 0.05])
        assert len(rep.rows) == 2
        assert rep.low_confidence
        errors = rep.rows["e_u_h1"].to_numpy(dtype=float)
        assert errors[1] < errors[0]

    def test_failure_keeps_partial_report(self):
        """A failing level raises with the finished levels attached."""
        calls = {"n": 0}
        real = solve_case

        def flaky(mesh, case, solver=None, stabilized=True):
            calls["n"] += 1
            if calls["n"] == 2:
                raise SolverError("diverged", history=[1.0, 10.0])
            return real(mesh, case, solver, stabilized)

        with patch("src.harness.convergence.solve_case", side_effect=flaky):
            with pytest.raises(StudyError) as excinfo:
                run_convergence(case_2d(), levels=[0.1, 0.05])
        partial = excinfo.value.report
        assert partial.status == "incomplete"
        assert len(partial.rows) == 1

    def test_given_meshes(self, coarse_dual, fine_dual):
        rep = run_convergence(case_2d(), meshes=[coarse_dual, fine_dual], cfg={"progress": False})
        assert list(rep.rows["n_boxes"]) == [coarse_dual.n_boxes, fine_dual.n_boxes]


@pytest.mark.slow
def test_first_order_convergence():
    """Four levels of the vortex flow give first-order velocity and pressure errors."""
    rep = run_convergence(case_2d(), levels=[0.025, 0.0125, 0.00625, 0.003125])
    assert rep.check() == []


@pytest.mark.slow
def test_boundary_box_pressure_converges():
    """The pressure error on boxes touching the wall shrinks under refinement."""
    case = case_2d()
    errors = []
    for mesh in mesh_family([0.025, 0.0125, 0.00625]):
        sol = solve_case(mesh, case, {"method": "monolithic"})
        exact = case.p_exact(mesh.generators)
        exact -= np.dot(mesh.volumes, exact) / mesh.volumes.sum()
        layer = mesh.touches_boundary
        errors.append(np.max(np.abs(sol.pressure_vector[layer] - exact[layer])))
    assert errors[1] < errors[0] and errors[2] < errors[1]
    assert errors[2] < 0.5 * errors[0]
