"""
Primal Delaunay meshes and their circumcentric (Voronoi) box duals.

The primal mesh is a conforming simplicial mesh (triangles in 2D, tetrahedra
when imported in 3D). The dual assigns one box to every interior vertex; the
box boundary is the skeleton connecting the circumcenters of the cells around
the vertex, so every box face is orthogonal to the edge joining the two
generators.
"""
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from itertools import combinations
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.spatial import Delaunay

__all__ = [
    "MeshError",
    "TriMesh",
    "BoxFace",
    "BoxMesh",
    "MeshQualityReport",
    "make_trimesh",
    "triangulate_square",
    "circumcenter",
    "count_delaunay_violations",
    "build_dual",
    "quality_report",
]

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-10


class MeshError(Exception):
    """Raised when a primal mesh or its dual cannot be built or fails validation."""
    pass


def simplex_measures(points: np.ndarray) -> np.ndarray:
    """Signed measures of stacked simplices given as an (m, d+1, d) array."""
    edges = points[:, 1:, :] - points[:, :1, :]
    return np.linalg.det(edges) / math.factorial(points.shape[2])


def _circumcenters(points: np.ndarray) -> np.ndarray:
    edges = points[:, 1:, :] - points[:, :1, :]
    rhs = 0.5 * np.einsum("mkd,mkd->mk", edges, edges)
    offset = np.linalg.solve(edges, rhs[..., None])[..., 0]
    return points[:, 0, :] + offset


def _triangle_circumcenters_3d(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    u = b - a
    v = c - a
    w = np.cross(u, v)
    uu = np.einsum("md,md->m", u, u)
    vv = np.einsum("md,md->m", v, v)
    ww = np.einsum("md,md->m", w, w)
    num = np.cross(uu[:, None] * v - vv[:, None] * u, w)
    return a + num / (2.0 * ww[:, None])


@dataclass(frozen=True, eq=False)
class TriMesh:
    """
    Conforming simplicial mesh of a polyhedral domain.

    Parameters
    ----------
    vertices : np.ndarray
        (n, d) vertex coordinates
    cells : np.ndarray
        (m, d+1) vertex indices, positively oriented
    boundary : np.ndarray
        (n,) True for vertices on the domain boundary
    lower, upper : np.ndarray, optional
        Corners of the axis-aligned domain, when known
    """
    vertices: np.ndarray
    cells: np.ndarray
    boundary: np.ndarray
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    def __post_init__(self):
        for arr in (self.vertices, self.cells, self.boundary):
            arr.setflags(write=False)

    @property
    def dim(self) -> int:
        return int(self.vertices.shape[1])

    @property
    def n_vertices(self) -> int:
        return int(self.vertices.shape[0])

    @property
    def n_cells(self) -> int:
        return int(self.cells.shape[0])

    @property
    def interior(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary)

    @cached_property
    def cell_points(self) -> np.ndarray:
        return self.vertices[self.cells]

    @cached_property
    def cell_measures(self) -> np.ndarray:
        return simplex_measures(self.cell_points)

    @cached_property
    def cell_diameters(self) -> np.ndarray:
        pts = self.cell_points
        diam = np.zeros(self.n_cells)
        for r, s in combinations(range(self.dim + 1), 2):
            diam = np.maximum(diam, np.linalg.norm(pts[:, r] - pts[:, s], axis=1))
        return diam

    @cached_property
    def circumcenters(self) -> np.ndarray:
        return _circumcenters(self.cell_points)

    @cached_property
    def cell_gradients(self) -> np.ndarray:
        """(m, d+1, d) gradients of the barycentric hat functions on each cell."""
        pts = self.cell_points
        edges = pts[:, 1:, :] - pts[:, :1, :]
        inv = np.linalg.inv(edges)
        grads = np.empty_like(pts)
        grads[:, 1:, :] = np.transpose(inv, (0, 2, 1))
        grads[:, 0, :] = -grads[:, 1:, :].sum(axis=1)
        return grads

    @property
    def h(self) -> float:
        return float(self.cell_diameters.max()) if self.n_cells else 0.0

    @property
    def domain_measure(self) -> Optional[float]:
        if self.lower is None or self.upper is None:
            return None
        return float(np.prod(self.upper - self.lower))


def make_trimesh(vertices: np.ndarray, cells: np.ndarray,
                 boundary: Optional[np.ndarray] = None,
                 lower: Optional[np.ndarray] = None,
                 upper: Optional[np.ndarray] = None,
                 tol: float = DEFAULT_TOL) -> TriMesh:
    """
    Validate and orient a simplicial mesh.

    When ``boundary`` is omitted it is taken from the vertices of the facets
    that belong to a single cell.

    Raises
    ------
    MeshError
        On dangling vertex indices or cells of (near) zero measure
    """
    vertices = np.array(vertices, dtype=float)
    cells = np.array(cells, dtype=np.int64)
    if vertices.ndim != 2 or vertices.shape[1] not in (2, 3):
        raise MeshError(f"Vertices must be an (n, 2) or (n, 3) array, got shape {vertices.shape}")
    dim = vertices.shape[1]
    if cells.size == 0:
        cells = cells.reshape(0, dim + 1)
    if cells.ndim != 2 or cells.shape[1] != dim + 1:
        raise MeshError(f"Cells must have {dim + 1} vertices each, got shape {cells.shape}")
    if cells.size and (cells.min() < 0 or cells.max() >= len(vertices)):
        raise MeshError(f"Cells reference vertices outside [0, {len(vertices)})")

    measures = simplex_measures(vertices[cells]) if len(cells) else np.zeros(0)
    scale = np.ptp(vertices, axis=0).max() if len(vertices) else 1.0
    flat = np.flatnonzero(np.abs(measures) <= tol * scale ** dim)
    if flat.size:
        raise MeshError(f"Degenerate cells with zero measure: {flat[:10].tolist()}")
    flip = measures < 0
    if flip.any():
        cells[flip, 0], cells[flip, 1] = cells[flip, 1].copy(), cells[flip, 0].copy()

    if boundary is None:
        boundary = np.zeros(len(vertices), dtype=bool)
        if len(cells):
            boundary[np.unique(_facet_pairs(cells)[4])] = True
    else:
        boundary = np.array(boundary, dtype=bool)
        if boundary.shape != (len(vertices),):
            raise MeshError("Boundary flags must have one entry per vertex")

    return TriMesh(
        vertices=vertices,
        cells=cells,
        boundary=boundary,
        lower=None if lower is None else np.asarray(lower, dtype=float),
        upper=None if upper is None else np.asarray(upper, dtype=float),
    )


def _facet_pairs(cells: np.ndarray) -> Tuple[np.ndarray, ...]:
    """Match cells across shared facets; also returns the unmatched facets."""
    m, k = cells.shape
    facets = np.concatenate([np.sort(np.delete(cells, r, axis=1), axis=1) for r in range(k)])
    opposite = np.concatenate([cells[:, r] for r in range(k)])
    owner = np.tile(np.arange(m), k)
    order = np.lexsort(facets.T[::-1])
    facets, opposite, owner = facets[order], opposite[order], owner[order]
    same = np.all(facets[1:] == facets[:-1], axis=1)
    first = np.flatnonzero(same)
    paired = np.zeros(len(facets), dtype=bool)
    paired[first] = True
    paired[first + 1] = True
    return owner[first], opposite[first], owner[first + 1], opposite[first + 1], facets[~paired]


def count_delaunay_violations(mesh: TriMesh, tol: float = DEFAULT_TOL) -> int:
    """
    Count shared facets whose opposite vertex lies strictly inside the
    circumsphere of the neighbouring cell.

    Checking every interior facet locally is equivalent to the global
    empty-circumsphere property on a conforming mesh of a convex domain.
    """
    if mesh.n_cells == 0:
        return 0
    c0, v0, c1, v1, _ = _facet_pairs(mesh.cells)
    centers = mesh.circumcenters
    radius = np.linalg.norm(centers - mesh.vertices[mesh.cells[:, 0]], axis=1)
    inside0 = np.linalg.norm(mesh.vertices[v1] - centers[c0], axis=1) < radius[c0] * (1.0 - tol)
    inside1 = np.linalg.norm(mesh.vertices[v0] - centers[c1], axis=1) < radius[c1] * (1.0 - tol)
    return int(np.count_nonzero(inside0 | inside1))


def circumcenter(simplex: Sequence[Sequence[float]], tol: float = DEFAULT_TOL) -> np.ndarray:
    """
    Circumcenter of a nondegenerate simplex.

    Parameters
    ----------
    simplex : array-like
        d+1 points in d dimensions
    tol : float
        Relative measure below which the simplex counts as degenerate

    Returns
    -------
    np.ndarray
        The point equidistant from all vertices

    Raises
    ------
    MeshError
        If the simplex is degenerate

    Examples
    --------
    >>> circumcenter([(0, 0), (1, 0), (0, 1)])
    array([0.5, 0.5])
    """
    pts = np.asarray(simplex, dtype=float)
    if pts.ndim != 2 or pts.shape[0] != pts.shape[1] + 1:
        raise ValueError(f"Expected d+1 points in d dimensions, got shape {pts.shape}")
    d = pts.shape[1]
    scale = np.max(np.linalg.norm(pts - pts[0], axis=1))
    measure = simplex_measures(pts[None])[0]
    if scale == 0.0 or abs(measure) * math.factorial(d) <= tol * scale ** d:
        raise MeshError(f"Degenerate simplex (measure {measure:.3e}): {pts.tolist()}")
    return _circumcenters(pts[None])[0]


def triangulate_square(domain: Sequence[Tuple[float, float]], target_h: float,
                       jitter: float = 0.0, seed: int = 0,
                       tol: float = DEFAULT_TOL) -> TriMesh:
    """
    Delaunay triangulation of a rectangle from a staggered row pattern.

    Rows are spaced about ``target_h * sqrt(3)/2`` apart and every other row
    is shifted by half a spacing, so interior triangles are close to
    equilateral. With ``jitter > 0`` interior vertices are displaced inside a
    disc of radius ``jitter * min(hx, hy) / 4`` and the points are
    re-triangulated.

    Parameters
    ----------
    domain : sequence of (lo, hi) pairs
        The rectangle [x0, x1] x [y0, y1]
    target_h : float
        Upper bound for the triangle diameters
    jitter : float, default 0.0
        Relative perturbation of interior vertices, in [0, 1)
    seed : int, default 0
        Seed of the perturbation

    Returns
    -------
    TriMesh
        Positively oriented Delaunay triangulation with boundary flags

    Raises
    ------
    ValueError
        On invalid parameters
    MeshError
        If the Delaunay construction fails or the result is not Delaunay
    """
    (a, b), (c, d) = domain
    if target_h <= 0:
        raise ValueError("target_h must be positive")
    if not 0.0 <= jitter < 1.0:
        raise ValueError("jitter must lie in [0, 1)")
    if b <= a or d <= c:
        raise ValueError(f"Empty domain {domain}")

    nx = max(1, int(math.ceil((b - a) / target_h - tol)))
    ny = max(1, int(math.ceil((d - c) / (target_h * math.sqrt(3.0) / 2.0) - tol)))
    hx, hy = (b - a) / nx, (d - c) / ny

    rows = []
    for k in range(ny + 1):
        y = c + (d - c) * k / ny if k < ny else d
        if k % 2 == 0:
            xs = a + (b - a) * np.arange(nx + 1) / nx
            xs[-1] = b
        else:
            xs = np.concatenate(([a], a + (np.arange(nx) + 0.5) * hx, [b]))
        rows.append(np.column_stack([xs, np.full_like(xs, y)]))
    points = np.vstack(rows)

    boundary = (
        (points[:, 0] == a) | (points[:, 0] == b)
        | (points[:, 1] == c) | (points[:, 1] == d)
    )

    if jitter > 0.0:
        rng = np.random.default_rng(seed)
        radius = jitter * 0.25 * min(hx, hy) * np.sqrt(rng.uniform(0.0, 1.0, len(points)))
        angle = rng.uniform(0.0, 2.0 * np.pi, len(points))
        shift = np.column_stack([radius * np.cos(angle), radius * np.sin(angle)])
        points[~boundary] += shift[~boundary]

    try:
        tri = Delaunay(points)
    except Exception as e:
        raise MeshError(f"Delaunay construction failure: {e}")
    if len(tri.coplanar):
        raise MeshError(f"Delaunay construction failure: {len(tri.coplanar)} points left out")

    cells = tri.simplices.astype(np.int64)
    measures = simplex_measures(points[cells])
    keep = np.abs(measures) > tol * hx * hy
    if not keep.all():
        logger.debug(f"Dropped {np.count_nonzero(~keep)} flat hull simplices")
        cells = cells[keep]
    if np.unique(cells).size != len(points):
        raise MeshError("Delaunay construction failure: not every vertex belongs to a triangle")

    mesh = make_trimesh(points, cells, boundary=boundary,
                        lower=np.array([a, c]), upper=np.array([b, d]), tol=tol)
    area = float(mesh.cell_measures.sum())
    if abs(area - mesh.domain_measure) > tol * mesh.domain_measure:
        raise MeshError(f"Delaunay construction failure: triangles cover {area}, domain is {mesh.domain_measure}")
    violations = count_delaunay_violations(mesh, tol)
    if violations:
        raise MeshError(f"Delaunay construction failure: {violations} facets violate the in-circle test")

    logger.info(f"Triangulated [{a}, {b}]x[{c}, {d}]: {mesh.n_vertices} vertices, "
                f"{mesh.n_cells} triangles, h={mesh.h:.4g}")
    return mesh


@dataclass(frozen=True)
class BoxFace:
    """One dual face F_ij seen from box i."""
    i: int
    j: int
    vertex_i: int
    vertex_j: int
    area: float
    d_ij: float
    n_ij: np.ndarray
    w_ij: float
    diamond_measure: float

    @property
    def on_boundary(self) -> bool:
        return self.j < 0


@dataclass(frozen=True, eq=False)
class BoxMesh:
    """
    Circumcentric dual of a :class:`TriMesh`.

    Faces are stored as flat arrays. ``face_box[k] = (i, j)`` holds the box
    indices of the two sides; ``j = -1`` marks a face between box ``i`` and a
    boundary vertex (``face_vertex[k, 1]``). Box-box faces appear exactly once.

    ``pieces`` is a signed subdivision of every circumcentric vertex cell
    (boxes and boundary remainder cells) into simplices with the vertex as
    apex, used for box integrals and the lumping diagnostics.
    """
    parent: TriMesh
    box_vertex: np.ndarray
    vertex_box: np.ndarray
    volumes: np.ndarray
    face_box: np.ndarray
    face_vertex: np.ndarray
    area: np.ndarray
    d_ij: np.ndarray
    normal: np.ndarray
    weight: np.ndarray
    diamond: np.ndarray
    face_h: np.ndarray
    pieces: Optional[np.ndarray] = None
    piece_vertex: Optional[np.ndarray] = None
    piece_cell: Optional[np.ndarray] = None
    piece_measure: Optional[np.ndarray] = None
    boundary_remainder: float = 0.0
    meta: Dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.parent.dim

    @property
    def n_boxes(self) -> int:
        return int(len(self.box_vertex))

    @property
    def n_faces(self) -> int:
        return int(len(self.area))

    @property
    def generators(self) -> np.ndarray:
        return self.parent.vertices[self.box_vertex]

    @property
    def boundary_faces(self) -> np.ndarray:
        return self.face_box[:, 1] < 0

    @property
    def inner_faces(self) -> np.ndarray:
        return self.face_box[:, 1] >= 0

    @property
    def has_pieces(self) -> bool:
        return self.pieces is not None

    @property
    def piece_box(self) -> np.ndarray:
        """Box owning each piece, -1 for pieces of boundary remainder cells."""
        return self.vertex_box[self.piece_vertex]

    @cached_property
    def cell_pieces(self) -> np.ndarray:
        """(m, d+1) signed measure of the part of each cell closest to each of its vertices."""
        if not self.has_pieces:
            raise MeshError("Mesh carries no circumcentric pieces (imported without geometry)")
        cells = self.parent.cells
        local = np.argmax(cells[self.piece_cell] == self.piece_vertex[:, None], axis=1)
        out = np.zeros(cells.shape)
        np.add.at(out, (self.piece_cell, local), self.piece_measure)
        return out

    @cached_property
    def incidence(self) -> sp.csr_matrix:
        """Signed box-face incidence: +1 on the side the normal points away from."""
        inner = self.inner_faces
        faces = np.arange(self.n_faces)
        rows = np.concatenate([self.face_box[:, 0], self.face_box[inner, 1]])
        cols = np.concatenate([faces, faces[inner]])
        vals = np.concatenate([np.ones(self.n_faces), -np.ones(np.count_nonzero(inner))])
        return sp.coo_matrix((vals, (rows, cols)), shape=(self.n_boxes, self.n_faces)).tocsr()

    @cached_property
    def adjacency(self) -> List[np.ndarray]:
        """Face ids incident to each box (the set G_i)."""
        inc = self.incidence
        return [inc.indices[inc.indptr[i]:inc.indptr[i + 1]].copy() for i in range(self.n_boxes)]

    @property
    def max_faces(self) -> int:
        """N_B, the largest number of faces of a box."""
        return int(np.diff(self.incidence.indptr).max()) if self.n_boxes else 0

    @cached_property
    def touches_boundary(self) -> np.ndarray:
        """True for boxes with at least one face towards a boundary vertex."""
        mask = np.zeros(self.n_boxes, dtype=bool)
        mask[self.face_box[self.boundary_faces, 0]] = True
        return mask

    @cached_property
    def box_gradient_ls(self) -> sp.csr_matrix:
        """
        Weighted least-squares gradients at boxes touching the boundary.

        Row ``i * dim + l`` holds the weights of the l-th derivative at box i,
        fitted to the generator differences towards its neighbouring boxes
        with weights ``1 / |x_j - x_i|^2``. The second ring joins the fit when
        the first one does not span the space. The fit maps constants to zero
        and reproduces linear fields. Rows of the other boxes are empty.
        """
        dim, nb = self.dim, self.n_boxes
        g = self.generators
        inner = self.inner_faces
        bi, bj = self.face_box[inner, 0], self.face_box[inner, 1]
        ones = np.ones(2 * len(bi))
        ring1 = sp.coo_matrix((ones, (np.concatenate([bi, bj]), np.concatenate([bj, bi]))),
                              shape=(nb, nb)).tocsr()
        ring2 = (ring1 + ring1 @ ring1).tocsr()

        rows, cols, vals = [], [], []
        unfitted = 0
        for i in np.flatnonzero(self.touches_boundary):
            for ring in (ring1, ring2):
                nbrs = ring.indices[ring.indptr[i]:ring.indptr[i + 1]]
                nbrs = nbrs[nbrs != i]
                if len(nbrs) < dim:
                    continue
                dx = g[nbrs] - g[i]
                wdx = dx / np.einsum("kd,kd->k", dx, dx)[:, None]
                normal_eq = wdx.T @ dx
                if np.linalg.cond(normal_eq) > 1e8:
                    continue
                coef = np.linalg.solve(normal_eq, wdx.T)
                for l in range(dim):
                    rows.append(np.full(len(nbrs) + 1, i * dim + l))
                    cols.append(np.append(nbrs, i))
                    vals.append(np.append(coef[l], -coef[l].sum()))
                break
            else:
                unfitted += 1
        if unfitted:
            logger.warning(f"No least-squares gradient for {unfitted} boundary boxes; "
                           f"their boundary pressure is extended by a constant")
        if not rows:
            return sp.csr_matrix((nb * dim, nb))
        return sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(nb * dim, nb),
        ).tocsr()

    @cached_property
    def boundary_extrapolation(self) -> sp.csr_matrix:
        """
        Box values to pressure at the boundary end of every face (n_faces, n_boxes).

        Row k of a face towards a boundary vertex gives
        ``p_i + grad_i p . (x_k - x_i)`` with the least-squares gradient of
        box i; rows of box-box faces are empty.
        """
        dim, nb = self.dim, self.n_boxes
        bnd = np.flatnonzero(self.boundary_faces)
        if bnd.size == 0:
            return sp.csr_matrix((self.n_faces, nb))
        bi = self.face_box[bnd, 0]
        dx = self.parent.vertices[self.face_vertex[bnd, 1]] - self.generators[bi]
        grad = self.box_gradient_ls
        ext = sp.coo_matrix((np.ones(len(bnd)), (np.arange(len(bnd)), bi)), shape=(len(bnd), nb)).tocsr()
        for l in range(dim):
            ext = ext + sp.diags(dx[:, l]) @ grad[bi * dim + l]
        pick = sp.coo_matrix((np.ones(len(bnd)), (bnd, np.arange(len(bnd)))), shape=(self.n_faces, len(bnd)))
        return (pick.tocsr() @ ext).tocsr()

    @cached_property
    def centroids(self) -> np.ndarray:
        """Box centroids, for diagnostics only; generators carry the geometry."""
        if self.pieces is None:
            return self.generators.copy()
        weighted = self.piece_measure[:, None] * self.pieces.mean(axis=1)
        own = self.piece_box >= 0
        out = np.zeros((self.n_boxes, self.dim))
        for k in range(self.dim):
            out[:, k] = np.bincount(self.piece_box[own], weights=weighted[own, k], minlength=self.n_boxes)
        return out / self.volumes[:, None]

    def face(self, k: int) -> BoxFace:
        i, j = self.face_box[k]
        vi, vj = self.face_vertex[k]
        return BoxFace(
            i=int(i), j=int(j), vertex_i=int(vi), vertex_j=int(vj),
            area=float(self.area[k]), d_ij=float(self.d_ij[k]),
            n_ij=self.normal[k].copy(), w_ij=float(self.weight[k]),
            diamond_measure=float(self.diamond[k]),
        )

    @property
    def faces(self) -> List[BoxFace]:
        return [self.face(k) for k in range(self.n_faces)]

    def validate(self, tol: float = DEFAULT_TOL) -> None:
        """
        Assert the dual invariants.

        Raises
        ------
        MeshError
            On the first violated invariant
        """
        nb = self.n_boxes
        if self.face_box.size and (self.face_box[:, 0].min() < 0 or self.face_box.max() >= nb):
            raise MeshError("Faces reference boxes that do not exist")
        if np.any(self.volumes <= 0):
            raise MeshError(f"Boxes with nonpositive volume: {np.flatnonzero(self.volumes <= 0)[:10].tolist()}")
        bad = np.flatnonzero(self.area <= 0)
        if bad.size:
            raise MeshError(f"Faces with nonpositive area: {bad[:10].tolist()}")
        if np.any(self.d_ij <= 0):
            raise MeshError("Faces with nonpositive generator distance")
        if np.any((self.weight <= 0) | (self.weight >= 1)):
            raise MeshError("Face weights must lie in (0, 1)")
        gap = self.parent.vertices[self.face_vertex[:, 1]] - self.parent.vertices[self.face_vertex[:, 0]]
        align = np.einsum("kd,kd->k", gap, self.normal) / self.d_ij
        if np.any(np.abs(align - 1.0) > tol * 100):
            raise MeshError("Face normals are not parallel to the generator segments")
        if np.any(np.abs(self.diamond - self.area * self.d_ij / self.dim) > tol * np.abs(self.diamond)):
            raise MeshError("Diamond measures do not satisfy |D| = |F| d / dim")
        inner = self.face_box[self.inner_faces]
        keys = np.sort(inner, axis=1)
        if len(np.unique(keys, axis=0)) != len(keys):
            raise MeshError("Box-box faces must appear exactly once")


def build_dual(primal: TriMesh, tol: float = DEFAULT_TOL) -> BoxMesh:
    """
    Build the circumcentric dual of a Delaunay mesh.

    One box per interior vertex. Every primal edge with at least one interior
    endpoint yields a face, oriented from the interior (lower index) end. Face
    areas are accumulated as signed contributions of the cells around the
    edge, so obtuse cells are allowed while the total stays positive.

    Raises
    ------
    MeshError
        If the mesh is not Delaunay, a circumcenter leaves the domain or a
        face has zero area
    """
    dim = primal.dim
    verts = primal.vertices
    cells = primal.cells
    if primal.n_cells == 0:
        raise MeshError("Primal mesh has no cells")

    violations = count_delaunay_violations(primal, tol)
    if violations:
        raise MeshError(f"Primal mesh is not Delaunay: {violations} facets violate the in-circle test")

    centers = primal.circumcenters
    lower = primal.lower if primal.lower is not None else verts.min(axis=0)
    upper = primal.upper if primal.upper is not None else verts.max(axis=0)
    slack = tol * np.max(upper - lower)
    outside = np.flatnonzero(np.any((centers < lower - slack) | (centers > upper + slack), axis=1))
    if outside.size:
        raise MeshError(f"Circumcenters outside the domain for cells {outside[:10].tolist()}")

    local_edges = list(combinations(range(dim + 1), 2))
    rec_cell, rec_lo, rec_hi, rec_area, rec_w = [], [], [], [], []
    piece_pts, piece_vertex, piece_cell, piece_measure = [], [], [], []
    cell_ids = np.arange(primal.n_cells)
    for r, s in local_edges:
        va, vb = cells[:, r], cells[:, s]
        lo, hi = np.minimum(va, vb), np.maximum(va, vb)
        p_lo, p_hi = verts[lo], verts[hi]
        mid = 0.5 * (p_lo + p_hi)
        gap = p_hi - p_lo
        dist = np.linalg.norm(gap, axis=1)
        n = gap / dist[:, None]
        others = [t for t in range(dim + 1) if t not in (r, s)]
        if dim == 2:
            toward = verts[cells[:, others[0]]] - mid
            toward -= np.einsum("md,md->m", toward, n)[:, None] * n
            toward /= np.linalg.norm(toward, axis=1)[:, None]
            contrib = np.einsum("md,md->m", centers - mid, toward)
            for end in (va, vb):
                piece_pts.append(np.stack([verts[end], mid, centers], axis=1))
                piece_vertex.append(end)
                piece_cell.append(cell_ids)
                piece_measure.append(0.25 * dist * contrib)
        else:
            pt, pq = verts[cells[:, others[0]]], verts[cells[:, others[1]]]
            f1 = _triangle_circumcenters_3d(p_lo, p_hi, pt)
            f2 = _triangle_circumcenters_3d(p_lo, p_hi, pq)
            sigma = np.sign(np.einsum("md,md->m", np.cross(pt - mid, pq - mid), n))
            tri1 = 0.5 * sigma * np.einsum("md,md->m", np.cross(f1 - mid, centers - mid), n)
            tri2 = 0.5 * sigma * np.einsum("md,md->m", np.cross(centers - mid, f2 - mid), n)
            contrib = tri1 + tri2
            for end in (va, vb):
                for fc, tri in ((f1, tri1), (f2, tri2)):
                    piece_pts.append(np.stack([verts[end], mid, fc, centers], axis=1))
                    piece_vertex.append(end)
                    piece_cell.append(cell_ids)
                    piece_measure.append(dist * tri / 6.0)
        rec_cell.append(cell_ids)
        rec_lo.append(lo)
        rec_hi.append(hi)
        rec_area.append(contrib)
        rec_w.append(np.einsum("md,md->m", p_hi - centers, n) / dist)

    rec_cell = np.concatenate(rec_cell)
    rec_lo = np.concatenate(rec_lo)
    rec_hi = np.concatenate(rec_hi)
    keys, inverse = np.unique(np.column_stack([rec_lo, rec_hi]), axis=0, return_inverse=True)
    inverse = inverse.ravel()
    n_edges = len(keys)
    edge_area = np.bincount(inverse, weights=np.concatenate(rec_area), minlength=n_edges)
    edge_w = np.bincount(inverse, weights=np.concatenate(rec_w), minlength=n_edges)
    edge_w /= np.bincount(inverse, minlength=n_edges)
    edge_h = np.zeros(n_edges)
    np.maximum.at(edge_h, inverse, primal.cell_diameters[rec_cell])

    pieces = np.concatenate(piece_pts)
    piece_vertex = np.concatenate(piece_vertex)
    piece_cell = np.concatenate(piece_cell)
    piece_measure = np.concatenate(piece_measure)
    total = float(primal.cell_measures.sum())
    if abs(piece_measure.sum() - total) > tol * total * 10:
        raise MeshError(f"Circumcentric pieces cover {piece_measure.sum()}, cells cover {total}")
    if primal.domain_measure is not None and abs(total - primal.domain_measure) > tol * total * 10:
        raise MeshError(f"Cells cover {total}, domain measure is {primal.domain_measure}")

    bnd = primal.boundary
    keep = ~(bnd[keys[:, 0]] & bnd[keys[:, 1]])
    keys, edge_area, edge_w, edge_h = keys[keep], edge_area[keep], edge_w[keep], edge_h[keep]
    kept_ids = np.flatnonzero(keep)

    gap_len = np.linalg.norm(verts[keys[:, 1]] - verts[keys[:, 0]], axis=1)
    small = edge_area <= tol * gap_len ** (dim - 1)
    if small.any():
        offenders = np.isin(inverse, kept_ids[small])
        bad_cells = np.unique(rec_cell[offenders])
        raise MeshError(f"Zero-area dual faces {keys[small][:5].tolist()} around cells {bad_cells[:10].tolist()}")

    # interior endpoint first
    swap = bnd[keys[:, 0]]
    vi = np.where(swap, keys[:, 1], keys[:, 0])
    vj = np.where(swap, keys[:, 0], keys[:, 1])
    edge_w = np.where(swap, 1.0 - edge_w, edge_w)

    interior = primal.interior
    vertex_box = -np.ones(primal.n_vertices, dtype=np.int64)
    vertex_box[interior] = np.arange(len(interior))
    face_box = np.column_stack([vertex_box[vi], vertex_box[vj]])

    gap = verts[vj] - verts[vi]
    d_ij = np.linalg.norm(gap, axis=1)
    normal = gap / d_ij[:, None]
    diamond = edge_area * d_ij / dim

    half = 0.5 * diamond
    volumes = np.bincount(face_box[:, 0], weights=half, minlength=len(interior))
    inner = face_box[:, 1] >= 0
    volumes += np.bincount(face_box[inner, 1], weights=half[inner], minlength=len(interior))

    own = ~bnd[piece_vertex]
    from_pieces = np.bincount(vertex_box[piece_vertex[own]], weights=piece_measure[own], minlength=len(interior))
    if np.any(np.abs(from_pieces - volumes) > tol * 100 * np.maximum(volumes, tol)):
        raise MeshError("Box volumes from pyramids and from circumcentric pieces disagree")

    mesh = BoxMesh(
        parent=primal,
        box_vertex=interior.copy(),
        vertex_box=vertex_box,
        volumes=volumes,
        face_box=face_box,
        face_vertex=np.column_stack([vi, vj]),
        area=edge_area,
        d_ij=d_ij,
        normal=normal,
        weight=edge_w,
        diamond=diamond,
        face_h=edge_h,
        pieces=pieces,
        piece_vertex=piece_vertex,
        piece_cell=piece_cell,
        piece_measure=piece_measure,
        boundary_remainder=total - float(volumes.sum()),
    )
    if mesh.n_boxes:
        mesh.validate(tol)
    logger.info(f"Built dual: {mesh.n_boxes} boxes, {mesh.n_faces} faces "
                f"({np.count_nonzero(mesh.boundary_faces)} towards the boundary)")
    return mesh


@dataclass
class MeshQualityReport:
    """Mesh regularity indicators: h, h_m, delta and the per-face ratios."""
    h: float
    h_m: float
    delta: float
    d_ratio: np.ndarray
    area_ratio: np.ndarray
    volume_ratio: float
    n_boxes: int
    max_faces: int
    delaunay_violations: int
    flagged_faces: List[int] = field(default_factory=list)
    valid: bool = True

    def to_dict(self) -> Dict:
        def extremes(values: np.ndarray) -> Tuple[float, float]:
            return (float(values.min()), float(values.max())) if values.size else (0.0, 0.0)

        return {
            "h": self.h,
            "h_m": self.h_m,
            "delta": self.delta,
            "d_ratio_min": extremes(self.d_ratio)[0],
            "d_ratio_max": extremes(self.d_ratio)[1],
            "area_ratio_min": extremes(self.area_ratio)[0],
            "area_ratio_max": extremes(self.area_ratio)[1],
            "volume_ratio": self.volume_ratio,
            "n_boxes": self.n_boxes,
            "max_faces": self.max_faces,
            "delaunay_violations": self.delaunay_violations,
            "flagged_faces": len(self.flagged_faces),
            "valid": self.valid,
        }


def quality_report(mesh: BoxMesh,
                   thresholds: Optional[Dict[str, Tuple[float, float]]] = None,
                   tol: float = DEFAULT_TOL) -> MeshQualityReport:
    """
    Summarize the regularity of a dual mesh.

    Parameters
    ----------
    mesh : BoxMesh
        The dual to inspect
    thresholds : dict, optional
        ``{"d_ratio": (lo, hi), "area_ratio": (lo, hi)}``; faces with a ratio
        outside its window are flagged

    Returns
    -------
    MeshQualityReport
        Diagnostics; ``valid`` is False when the mesh has no boxes or when
        faces are flagged
    """
    primal = mesh.parent
    diam = primal.cell_diameters
    h = float(diam.max())
    h_m = float(diam.min())
    d_ratio = mesh.d_ij / mesh.face_h
    area_ratio = mesh.area / mesh.face_h ** (mesh.dim - 1)
    volume_ratio = float(mesh.volumes.min() / mesh.volumes.max()) if mesh.n_boxes else 0.0

    flagged = np.zeros(mesh.n_faces, dtype=bool)
    for key, values in (("d_ratio", d_ratio), ("area_ratio", area_ratio)):
        if thresholds and key in thresholds:
            lo, hi = thresholds[key]
            flagged |= (values < lo) | (values > hi)

    report = MeshQualityReport(
        h=h,
        h_m=h_m,
        delta=h_m / h,
        d_ratio=d_ratio,
        area_ratio=area_ratio,
        volume_ratio=volume_ratio,
        n_boxes=mesh.n_boxes,
        max_faces=mesh.max_faces,
        delaunay_violations=count_delaunay_violations(primal, tol),
        flagged_faces=np.flatnonzero(flagged).tolist(),
        valid=mesh.n_boxes > 0 and not flagged.any(),
    )
    if not report.valid:
        logger.warning(f"Mesh quality check failed: {report.n_boxes} boxes, "
                       f"{len(report.flagged_faces)} flagged faces")
    return report
