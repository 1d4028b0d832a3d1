"""
Tests for primal triangulations and their circumcentric duals.
"""
import numpy as np
import pytest

from src.mesh.core import (
    MeshError,
    build_dual,
    circumcenter,
    count_delaunay_violations,
    make_trimesh,
    quality_report,
    triangulate_square,
)

SQUARE = ((-0.25, 0.25), (-0.25, 0.25))


def test_circumcenter_right_triangle():
    """Circumcenter of a right triangle is the hypotenuse midpoint."""
    np.testing.assert_allclose(circumcenter([(0, 0), (1, 0), (0, 1)]), [0.5, 0.5])


def test_circumcenter_random_triangle():
    """Circumcenter is equidistant from all vertices."""
    rng = np.random.default_rng(7)
    pts = rng.random((3, 2))
    c = circumcenter(pts)
    dist = np.linalg.norm(pts - c, axis=1)
    assert np.max(np.abs(dist - dist[0])) < 1e-12


def test_circumcenter_degenerate():
    """Collinear points have no circumcenter."""
    with pytest.raises(MeshError):
        circumcenter([(0, 0), (1, 1), (2, 2)])


def test_make_trimesh_rejects_bad_cells():
    """Dangling vertex indices and flat cells are rejected."""
    vertices = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(MeshError):
        make_trimesh(vertices, np.array([[0, 1, 5]]))
    with pytest.raises(MeshError):
        make_trimesh(np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]), np.array([[0, 1, 2]]))


def test_make_trimesh_orients_cells():
    """Clockwise cells are flipped to positive orientation."""
    mesh = make_trimesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[0, 2, 1]]))
    assert mesh.cell_measures[0] == pytest.approx(0.5)
    assert mesh.boundary.all()


class TestTriangulateSquare:
    def test_structured(self):
        """Structured pattern covers the square, respects h and is Delaunay."""
        mesh = triangulate_square(SQUARE, 0.1)
        assert mesh.h <= 0.1 + 1e-12
        assert mesh.cell_measures.sum() == pytest.approx(0.25, rel=1e-12)
        assert np.all(mesh.cell_measures > 0)
        assert count_delaunay_violations(mesh) == 0

    def test_boundary_flags(self):
        """Exactly the vertices on the four sides are flagged."""
        mesh = triangulate_square(SQUARE, 0.1)
        on_side = np.any(np.isclose(np.abs(mesh.vertices), 0.25), axis=1)
        np.testing.assert_array_equal(mesh.boundary, on_side)

    def test_jitter_is_seeded(self):
        """Equal seeds give equal meshes, different seeds different ones."""
        a = triangulate_square(SQUARE, 0.1, jitter=0.3, seed=1)
        b = triangulate_square(SQUARE, 0.1, jitter=0.3, seed=1)
        c = triangulate_square(SQUARE, 0.1, jitter=0.3, seed=2)
        np.testing.assert_array_equal(a.vertices, b.vertices)
        assert not np.allclose(a.vertices, c.vertices)

    def test_jitter_keeps_boundary(self):
        """Boundary vertices stay on the boundary under jitter."""
        mesh = triangulate_square(SQUARE, 0.1, jitter=0.5, seed=4)
        bnd = mesh.vertices[mesh.boundary]
        assert np.all(np.isclose(np.abs(bnd), 0.25).any(axis=1))
        assert count_delaunay_violations(mesh) == 0

    def test_jitter_radius(self):
        """Interior vertices move by at most jitter * min(hx, hy) / 4."""
        still = triangulate_square(SQUARE, 0.1)
        moved = triangulate_square(SQUARE, 0.1, jitter=0.6, seed=5)
        assert still.n_vertices == moved.n_vertices
        rows = np.unique(still.vertices[:, 1])
        hx = 0.5 / 5
        hy = float(np.diff(rows).min())
        shift = np.linalg.norm(moved.vertices - still.vertices, axis=1)
        assert shift.max() <= 0.6 * min(hx, hy) / 4 + 1e-12
        assert shift.max() > 0.0
        assert np.all(shift[still.boundary] == 0.0)

    @pytest.mark.parametrize("kwargs", [
        {"target_h": 0.0},
        {"target_h": 0.1, "jitter": 1.0},
        {"target_h": 0.1, "jitter": -0.1},
    ])
    def test_invalid_parameters(self, kwargs):
        """Nonpositive h and jitter outside [0, 1) are rejected."""
        with pytest.raises(ValueError):
            triangulate_square(SQUARE, **kwargs)


class TestBuildDual:
    def test_volume_partition(self, coarse_dual):
        """Boxes plus the boundary remainder cover the domain."""
        total = coarse_dual.volumes.sum() + coarse_dual.boundary_remainder
        assert total == pytest.approx(0.25, rel=1e-12)
        assert np.all(coarse_dual.volumes > 0)

    def test_boxes_are_interior_vertices(self, coarse_dual):
        """One box per interior vertex."""
        primal = coarse_dual.parent
        np.testing.assert_array_equal(coarse_dual.box_vertex, np.flatnonzero(~primal.boundary))

    def test_orthogonality(self, jittered_dual):
        """Face normals are parallel to the generator segments."""
        verts = jittered_dual.parent.vertices
        gap = verts[jittered_dual.face_vertex[:, 1]] - verts[jittered_dual.face_vertex[:, 0]]
        align = np.einsum("kd,kd->k", gap, jittered_dual.normal) / jittered_dual.d_ij
        assert np.max(np.abs(align - 1.0)) < 1e-10

    def test_weights_are_half(self, jittered_dual):
        """Voronoi faces bisect the generator segment."""
        np.testing.assert_allclose(jittered_dual.weight, 0.5, atol=1e-10)

    def test_diamond_identity(self, jittered_dual):
        """|D_ij| = |F_ij| d_ij / dim."""
        np.testing.assert_allclose(jittered_dual.diamond, jittered_dual.area * jittered_dual.d_ij / 2, rtol=1e-12)

    def test_closed_boxes(self, jittered_dual):
        """Sum of |F| n over the faces of every box vanishes."""
        flux = jittered_dual.incidence @ (jittered_dual.area[:, None] * jittered_dual.normal)
        assert np.max(np.abs(flux)) < 1e-12

    def test_box_faces_unique(self, coarse_dual):
        """Box-box faces appear once and boundary faces point at boundary vertices."""
        inner = coarse_dual.face_box[coarse_dual.inner_faces]
        keys = np.sort(inner, axis=1)
        assert len(np.unique(keys, axis=0)) == len(keys)
        bnd_targets = coarse_dual.face_vertex[coarse_dual.boundary_faces, 1]
        assert coarse_dual.parent.boundary[bnd_targets].all()

    def test_face_view(self, coarse_dual):
        """BoxFace records mirror the flat arrays."""
        k = int(np.flatnonzero(coarse_dual.boundary_faces)[0])
        face = coarse_dual.face(k)
        assert face.on_boundary
        assert face.area == coarse_dual.area[k]
        assert face.diamond_measure == pytest.approx(face.area * face.d_ij / 2)

    def test_rejects_non_delaunay(self):
        """The long diagonal of a flat quadrilateral violates the in-circle test."""
        vertices = np.array([[0.0, 0.0], [1.0, -0.3], [2.0, 0.0], [1.0, 0.3]])
        primal = make_trimesh(vertices, np.array([[0, 1, 2], [0, 2, 3]]))
        assert count_delaunay_violations(primal) > 0
        with pytest.raises(MeshError):
            build_dual(primal)

    def test_pieces_cover_cells(self, jittered_dual):
        """Circumcentric pieces of each cell add up to the cell measure."""
        np.testing.assert_allclose(jittered_dual.cell_pieces.sum(axis=1),
                                   jittered_dual.parent.cell_measures, rtol=1e-10)


class TestOctahedron:
    def test_unit_cube_box(self, octahedron_dual):
        """The dual of the origin is the unit cube."""
        assert octahedron_dual.n_boxes == 1
        assert octahedron_dual.volumes[0] == pytest.approx(1.0)
        assert octahedron_dual.n_faces == 6

    def test_face_geometry(self, octahedron_dual):
        """Six unit faces at unit distance with weight one half."""
        np.testing.assert_allclose(octahedron_dual.area, 1.0)
        np.testing.assert_allclose(octahedron_dual.d_ij, 1.0)
        np.testing.assert_allclose(octahedron_dual.weight, 0.5)
        np.testing.assert_allclose(octahedron_dual.diamond, 1.0 / 3.0)
        assert octahedron_dual.boundary_faces.all()
        assert octahedron_dual.touches_boundary[0]


class TestQualityReport:
    def test_structured_mesh(self, coarse_dual):
        """Structured mesh is valid with delta close to one."""
        report = quality_report(coarse_dual)
        assert report.valid
        assert 0.5 < report.delta <= 1.0
        assert report.delaunay_violations == 0
        assert report.h == pytest.approx(coarse_dual.parent.h)
        assert report.max_faces >= 4

    def test_thresholds_flag_faces(self, coarse_dual):
        """Faces outside a ratio window are flagged and invalidate the mesh."""
        report = quality_report(coarse_dual, thresholds={"d_ratio": (10.0, 20.0)})
        assert not report.valid
        assert len(report.flagged_faces) == coarse_dual.n_faces

    def test_to_dict(self, coarse_dual):
        """Dictionary form carries scalar summaries only."""
        data = quality_report(coarse_dual).to_dict()
        assert data["n_boxes"] == coarse_dual.n_boxes
        assert data["d_ratio_min"] <= data["d_ratio_max"]
        assert data["flagged_faces"] == 0

    def test_no_interior_vertex(self):
        """A mesh without interior vertices has no boxes and is reported invalid."""
        primal = make_trimesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[0, 1, 2]]))
        dual = build_dual(primal)
        assert dual.n_boxes == 0
        assert dual.n_faces == 0
        report = quality_report(dual)
        assert report.n_boxes == 0
        assert not report.valid
        assert report.to_dict()["max_faces"] == 0
