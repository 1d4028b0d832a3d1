"""
Tests for the generalized eigenvalue studies.
"""
from dataclasses import replace

import numpy as np
import pytest
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from src.assembly.operators import assemble_A
from src.fields.norms import NodalField, star_seminorm
from src.harness.cases import mesh_family
from src.mesh.io import read_mesh, write_mesh
from src.spectral.studies import (
    EigStudyRow,
    SpectralError,
    coercivity_study,
    consistency_study,
    fitted_slope,
    infsup_study,
    mass_matrix,
    min_generalized_eig,
    norm_constant_study,
    pressure_star_matrix,
    star_block_matrix,
    star_norm_matrix,
    study_frame,
)


def _path_laplacian(n):
    main = np.full(n, 2.0)
    main[[0, -1]] = 1.0
    return sp.diags([main, -np.ones(n - 1), -np.ones(n - 1)], [0, -1, 1], format="csr")


@pytest.fixture
def spd_pencil():
    """Random SPD pair of moderate size."""
    rng = np.random.default_rng(7)
    X = rng.standard_normal((40, 40))
    S = X @ X.T + 40.0 * np.eye(40)
    M = np.diag(rng.uniform(0.5, 2.0, 40))
    return S, M


class TestMinGeneralizedEig:
    def test_identical_pencil(self, spd_pencil):
        S, _ = spd_pencil
        assert min_generalized_eig(S, S) == pytest.approx(1.0, rel=1e-10)

    def test_diagonal(self):
        assert min_generalized_eig(np.diag([1.0, 2.0, 3.0]), np.eye(3)) == pytest.approx(1.0)

    def test_dense_and_shift_invert_agree(self, spd_pencil):
        """The sparse shift-invert path reproduces the dense minimum."""
        S, M = spd_pencil
        dense = min_generalized_eig(S, M)
        sparse = min_generalized_eig(sp.csr_matrix(S), sp.csr_matrix(M), dense_limit=0)
        assert sparse == pytest.approx(dense, rel=1e-6)

    def test_deflated_laplacian(self):
        """Deflating constants gives the first nonzero eigenvalue of the path graph."""
        n = 30
        L = _path_laplacian(n)
        expected = 2.0 - 2.0 * np.cos(np.pi / n)
        dense = min_generalized_eig(L, sp.identity(n, format="csr"), deflate=np.ones(n))
        sparse = min_generalized_eig(L, sp.identity(n, format="csr"), deflate=np.ones(n), dense_limit=0)
        assert dense == pytest.approx(expected, rel=1e-10)
        assert sparse == pytest.approx(expected, rel=1e-6)

    def test_operator_path(self):
        """Operators without an inverse go through LOBPCG, with constraints."""
        n = 60
        diag = np.arange(1.0, n + 1.0)
        S = spla.LinearOperator((n, n), matvec=lambda x: diag * np.ravel(x), dtype=float)
        M = sp.identity(n, format="csr")
        assert min_generalized_eig(S, M) == pytest.approx(1.0, rel=1e-6)
        e0 = np.zeros(n)
        e0[0] = 1.0
        assert min_generalized_eig(S, M, deflate=e0) == pytest.approx(2.0, rel=1e-6)

    def test_negative_mass(self):
        with pytest.raises(SpectralError):
            min_generalized_eig(np.eye(3), np.diag([-1.0, 1.0, 1.0]))

    def test_singular_mass(self):
        """A semidefinite mass on the search space is reported, not returned."""
        with pytest.raises(SpectralError):
            min_generalized_eig(np.eye(3), np.diag([0.0, 1.0, 1.0]))

    def test_asymmetric(self):
        with pytest.raises(SpectralError):
            min_generalized_eig(np.array([[1.0, 1.0], [0.0, 1.0]]), np.eye(2))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            min_generalized_eig(np.eye(3), np.eye(2))


class TestNormMatrices:
    def test_viscous_block_is_star_matrix(self, jittered_dual):
        """Before elimination, A is nu times the componentwise *-norm matrix."""
        A = assemble_A(jittered_dual, 0.3)
        Q = star_block_matrix(jittered_dual)
        assert abs(A - 0.3 * Q).max() < 1e-12

    def test_star_quadratic_form(self, jittered_dual):
        rng = np.random.default_rng(5)
        q = NodalField(rng.standard_normal(jittered_dual.parent.n_vertices), jittered_dual)
        Q = star_norm_matrix(jittered_dual)
        assert q.values @ (Q @ q.values) == pytest.approx(star_seminorm(q) ** 2, rel=1e-12)

    def test_pressure_matrices(self, coarse_dual):
        """The box mass is diagonal in the volumes; the pressure *-matrix kills constants."""
        np.testing.assert_array_equal(mass_matrix(coarse_dual).diagonal(), coarse_dual.volumes)
        Qp = pressure_star_matrix(coarse_dual)
        assert np.max(np.abs(Qp @ np.ones(coarse_dual.n_boxes))) < 1e-12
        assert abs(Qp - Qp.T).max() < 1e-14


class TestStudies:
    def test_coercivity_positive_and_nu_invariant(self, coarse_dual):
        """nu * min q'Cq / q'Qq does not depend on the viscosity."""
        unit = coercivity_study([coarse_dual], nu=1.0)[0]
        thin = coercivity_study([coarse_dual], nu=0.01)[0]
        assert unit.value > 0
        assert thin.scaled_value == pytest.approx(unit.scaled_value, rel=1e-8)
        assert unit.n_dofs == coarse_dual.n_boxes

    def test_infsup_nu_invariant(self, coarse_dual):
        unit = infsup_study([coarse_dual], nu=1.0)[0]
        thick = infsup_study([coarse_dual], nu=10.0)[0]
        assert unit.value > 0
        assert thick.scaled_value == pytest.approx(unit.scaled_value, rel=1e-8)

    def test_stabilization_raises_infsup(self, coarse_dual):
        """C is positive semidefinite, so it can only raise the minimum."""
        stabilized = infsup_study([coarse_dual])[0].value
        plain = infsup_study([coarse_dual], stabilized=False)[0].value
        assert plain <= stabilized * (1 + 1e-10)

    def test_rates_between_levels(self, coarse_dual, fine_dual):
        rows = coercivity_study([coarse_dual, fine_dual])
        assert rows[0].rate is None
        assert rows[1].rate is not None
        assert rows[1].value < rows[0].value

    def test_norm_constants(self, coarse_dual):
        """On boundary-free P1 fields the *-norm is exactly the H1 seminorm."""
        row = norm_constant_study([coarse_dual])[0]
        assert row.star_h1 == pytest.approx(1.0, rel=1e-8)
        assert row.h1_star == pytest.approx(1.0, rel=1e-8)
        assert row.lumped_l2_star > 0
        assert row.l2_star > 0
        assert row.star_inverse > 0
        assert row.h_m <= row.h

    def test_consistency_rows(self, coarse_dual):
        row = consistency_study([coarse_dual], samples=3)[0]
        assert row.samples == 3
        assert np.isfinite(row.stabilization_ratio) and row.stabilization_ratio >= 0
        assert np.isfinite(row.gradient_ratio) and row.gradient_ratio >= 0

    def test_consistency_needs_pieces(self, coarse_dual):
        """Duals without box geometry are refused."""
        bare = replace(coarse_dual, pieces=None, piece_vertex=None, piece_cell=None, piece_measure=None)
        with pytest.raises(SpectralError):
            consistency_study([bare], samples=1)

    def test_consistency_on_imported_mesh(self, coarse_dual, tmp_path):
        """Meshes read back with their cells carry box geometry again."""
        mesh = read_mesh(write_mesh(coarse_dual, tmp_path / "mesh.rcbm"))
        imported = consistency_study([mesh], samples=2, seed=4)[0]
        built = consistency_study([coarse_dual], samples=2, seed=4)[0]
        assert imported.stabilization_ratio == pytest.approx(built.stabilization_ratio, rel=1e-8)
        assert imported.gradient_ratio == pytest.approx(built.gradient_ratio, rel=1e-8)


def test_study_frame_and_slope():
    rows = [EigStudyRow(h=0.1, value=2.0e-3), EigStudyRow(h=0.05, value=2.5e-4)]
    frame = study_frame(rows)
    assert list(frame.columns) == ["h", "value", "rate", "n_dofs", "nu"]
    assert fitted_slope(rows) == pytest.approx(3.0)


LEVELS = [0.05, 0.025, 0.0125, 0.00625, 0.003125]


@pytest.fixture(scope="module")
def spectral_family():
    return mesh_family(LEVELS)


@pytest.mark.slow
def test_coercivity_decay(spectral_family):
    """Coercivity decays at least like h^3 and no faster than the h^4 of smooth modes."""
    rows = coercivity_study(spectral_family)
    values = [row.value for row in rows]
    assert all(b < a for a, b in zip(values, values[1:]))
    assert 2.6 <= fitted_slope(rows) <= 4.2
    # the reference value on the coarse grid, to within an order of magnitude
    at_025 = rows[LEVELS.index(0.025)].value
    assert 9.6e-8 <= at_025 <= 9.6e-6


@pytest.mark.slow
def test_infsup_bounded_below(spectral_family):
    rows = infsup_study(spectral_family)
    values = [row.value for row in rows]
    assert all(0.05 <= v <= 0.5 for v in values)
    assert min(values) >= 0.5 * values[0]


@pytest.mark.slow
def test_norm_constants_stable(spectral_family):
    """All five equivalence constants stay within 20% across four levels."""
    rows = norm_constant_study(spectral_family[:4])
    for name in ("lumped_l2_star", "star_h1", "h1_star", "l2_star", "star_inverse"):
        values = np.array([getattr(row, name) for row in rows])
        assert np.all(values > 0), name
        assert (values.max() - values.min()) / values.max() < 0.2, name
