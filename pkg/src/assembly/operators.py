"""
Sparse operators of the Rhie-Chow stabilized Box Method.

Degrees of freedom
------------------
Velocity: component ``l`` at primal vertex ``v`` is DOF ``l * N + v`` with
``N`` the number of vertices. Pressure: one DOF per box (interior vertex).

Boundary closure
----------------
A box touching the boundary has faces towards boundary vertices, which carry
no pressure DOF. The momentum gradient extrapolates the pressure there
linearly from the box with its least-squares gradient, so a linear pressure
gets the same box gradient as its nodal interpolant on every box. The
stabilization is built from the closed gradient (``p_k := p_i``), which keeps
C symmetric positive semidefinite with constants as its kernel. Boundary
faces carry the Dirichlet velocity ``w u_i + (1 - w) g_k`` in the divergence,
so the divergence equals minus the transposed closed gradient except on rows
of boxes touching the boundary.

The monolithic system is::

    [ A   Bt ] [u]   [F]
    [ B   C  ] [p] = [G]

with ``C = R(D^-1) - Bc^T D^-1 Bc`` symmetric positive semidefinite, ``Bc``
the closed gradient.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from src.fields.norms import BoxField, NodalField, integrate_over_boxes
from src.mesh.core import BoxMesh

__all__ = [
    "AssemblyError",
    "SaddleSystem",
    "CLOSURES",
    "assemble_A",
    "assemble_Bt",
    "assemble_B",
    "diag_D",
    "assemble_R",
    "assemble_C",
    "assemble_rhs",
    "apply_dirichlet",
    "gauss_green_gradient",
    "build_system",
    "velocity_dof",
]

logger = logging.getLogger(__name__)


class AssemblyError(Exception):
    """Raised when operators cannot be assembled from the given mesh or data."""
    pass


def velocity_dof(mesh: BoxMesh, component: int, vertex) -> np.ndarray:
    return component * mesh.parent.n_vertices + np.asarray(vertex)


def _check_faces(mesh: BoxMesh) -> None:
    bad = np.flatnonzero(mesh.d_ij <= 0)
    if bad.size:
        raise AssemblyError(f"Nonpositive generator distance on faces {bad[:10].tolist()}")
    n = mesh.parent.n_vertices
    if mesh.face_vertex.size and (mesh.face_vertex.min() < 0 or mesh.face_vertex.max() >= n):
        raise AssemblyError("Faces reference vertices that do not exist")
    if mesh.face_box.size and (mesh.face_box[:, 0].min() < 0 or mesh.face_box.max() >= mesh.n_boxes):
        raise AssemblyError("Faces reference boxes that do not exist")


def _laplacian(rows: np.ndarray, cols: np.ndarray, coef: np.ndarray, size: int) -> sp.csr_matrix:
    """Graph Laplacian sum over pairs (r, c) with weight coef."""
    i = np.concatenate([rows, cols, rows, cols])
    j = np.concatenate([rows, cols, cols, rows])
    v = np.concatenate([coef, coef, -coef, -coef])
    return sp.coo_matrix((v, (i, j)), shape=(size, size)).tocsr()


def assemble_A(mesh: BoxMesh, nu: float) -> sp.csr_matrix:
    """
    Viscous block: per component, the face finite-difference Laplacian.

    Row i holds ``sum_j nu |F_ij| / d_ij`` on the diagonal and
    ``-nu |F_ij| / d_ij`` towards every neighbour, boundary vertices included.
    The d components are independent copies.

    Parameters
    ----------
    mesh : BoxMesh
        Dual mesh
    nu : float
        Viscosity, positive

    Returns
    -------
    sp.csr_matrix
        (d N, d N) symmetric positive semidefinite matrix

    Raises
    ------
    AssemblyError
        On nonpositive viscosity or generator distances
    """
    if nu <= 0:
        raise AssemblyError(f"Viscosity must be positive, got {nu}")
    _check_faces(mesh)
    n = mesh.parent.n_vertices
    scalar = _laplacian(mesh.face_vertex[:, 0], mesh.face_vertex[:, 1],
                        nu * mesh.area / mesh.d_ij, n)
    return sp.block_diag([scalar] * mesh.dim, format="csr")


CLOSURES = ("linear", "closed")


def assemble_Bt(mesh: BoxMesh, closure: str = "linear") -> sp.csr_matrix:
    """
    Discrete pressure gradient (d N, n_boxes).

    Row (l, v_i) collects ``|F_ij| n_ij,l (w_ij p_i + (1 - w_ij) p_j)`` over
    the faces of box i. Towards a boundary vertex k the missing ``p_k`` is

    * ``"linear"``: extrapolated from box i with its least-squares gradient,
      ``p_i + grad_i p . (x_k - x_i)``, exact for linear pressures;
    * ``"closed"``: ``p_i``, so the row only sees box-box jumps.

    Both annihilate constants. Rows of boundary vertices are empty.

    Raises
    ------
    AssemblyError
        On an unknown closure
    """
    if closure not in CLOSURES:
        raise AssemblyError(f"Unknown boundary closure '{closure}', expected one of {CLOSURES}")
    _check_faces(mesh)
    n = mesh.parent.n_vertices
    inner = mesh.inner_faces
    bnd = mesh.boundary_faces
    bi = mesh.face_box[:, 0]
    bj = mesh.face_box[:, 1]
    vi = mesh.face_vertex[:, 0]
    vj = mesh.face_vertex[:, 1]
    w = mesh.weight
    linear = closure == "linear"
    rows, cols, vals = [], [], []
    for l in range(mesh.dim):
        flux = mesh.area * mesh.normal[:, l]
        # box i side
        rows += [l * n + vi, l * n + vi[inner]]
        cols += [bi, bj[inner]]
        vals += [np.where(inner | linear, flux * w, flux), flux[inner] * (1.0 - w[inner])]
        # box j side sees -n and the same face value
        rows += [l * n + vj[inner], l * n + vj[inner]]
        cols += [bi[inner], bj[inner]]
        vals += [-flux[inner] * w[inner], -flux[inner] * (1.0 - w[inner])]
    Bt = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(mesh.dim * n, mesh.n_boxes),
    ).tocsr()
    if linear and bnd.any():
        faces = np.flatnonzero(bnd)
        ext = mesh.boundary_extrapolation[faces]
        for l in range(mesh.dim):
            coef = mesh.area[faces] * mesh.normal[faces, l] * (1.0 - w[faces])
            scatter = sp.coo_matrix((coef, (l * n + vi[faces], np.arange(len(faces)))),
                                    shape=(mesh.dim * n, len(faces)))
            Bt = Bt + scatter.tocsr() @ ext
    return Bt.tocsr()


def assemble_B(mesh: BoxMesh) -> sp.csr_matrix:
    """
    Discrete divergence (n_boxes, d N).

    Row i collects ``|F_ij| (w_ij u_i + (1 - w_ij) u_j) . n_ij`` over the faces
    of box i; towards a boundary vertex ``u_j`` is that vertex's (Dirichlet)
    DOF, moved to the right-hand side by :func:`apply_dirichlet`.
    """
    _check_faces(mesh)
    n = mesh.parent.n_vertices
    inner = mesh.inner_faces
    bi = mesh.face_box[:, 0]
    bj = mesh.face_box[:, 1]
    vi = mesh.face_vertex[:, 0]
    vj = mesh.face_vertex[:, 1]
    w = mesh.weight
    rows, cols, vals = [], [], []
    for l in range(mesh.dim):
        flux = mesh.area * mesh.normal[:, l]
        rows += [bi, bi]
        cols += [l * n + vi, l * n + vj]
        vals += [flux * w, flux * (1.0 - w)]
        rows += [bj[inner], bj[inner]]
        cols += [l * n + vi[inner], l * n + vj[inner]]
        vals += [-flux[inner] * w[inner], -flux[inner] * (1.0 - w[inner])]
    return sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(mesh.n_boxes, mesh.dim * n),
    ).tocsr()


def diag_D(A: sp.spmatrix, mesh: BoxMesh) -> List[BoxField]:
    """
    Diagonal of the momentum operator at box rows, one BoxField per component.

    Raises
    ------
    AssemblyError
        If a diagonal entry is not strictly positive
    """
    diag = A.diagonal()
    n = mesh.parent.n_vertices
    out = []
    for l in range(mesh.dim):
        values = diag[l * n + mesh.box_vertex]
        bad = np.flatnonzero(values <= 0)
        if bad.size:
            raise AssemblyError(f"Nonpositive momentum diagonal at boxes {bad[:10].tolist()}")
        out.append(BoxField(values, mesh))
    return out


def assemble_R(mesh: BoxMesh, kappa: BoxField) -> sp.csr_matrix:
    """
    Scalar Laplacian on boxes with per-box diffusivity.

    Face coefficient ``|F_ij| (w_ij |B_i| k_i + (1 - w_ij) |B_j| k_j) / d_ij``
    on box-box faces only, so constants are in the kernel.
    """
    _check_faces(mesh)
    inner = mesh.inner_faces
    bi, bj = mesh.face_box[inner, 0], mesh.face_box[inner, 1]
    w = mesh.weight[inner]
    k = np.asarray(kappa.values, dtype=float)
    vol = mesh.volumes
    coef = mesh.area[inner] * (w * vol[bi] * k[bi] + (1.0 - w) * vol[bj] * k[bj]) / mesh.d_ij[inner]
    return _laplacian(bi, bj, coef, mesh.n_boxes)


def _velocity_scaling(mesh: BoxMesh, D: Sequence[BoxField]) -> np.ndarray:
    n = mesh.parent.n_vertices
    out = np.zeros(mesh.dim * n)
    for l, field_ in enumerate(D):
        values = np.asarray(field_.values, dtype=float)
        if np.any(values <= 0):
            raise AssemblyError("D must be strictly positive")
        out[l * n + mesh.box_vertex] = 1.0 / values
    return out


def assemble_C(mesh: BoxMesh, Bt: sp.spmatrix, D: Sequence[BoxField]) -> sp.csr_matrix:
    """
    Rhie-Chow stabilization ``C = R(D^-1) - Bt^T D^-1 Bt``.

    The first term is the compact Laplacian with diffusivity D^-1, the second
    the wide stencil built from the Gauss-Green box gradients. Both annihilate
    constants; their difference is symmetric positive semidefinite.

    Raises
    ------
    AssemblyError
        If D has a zero or negative entry
    """
    if len(D) != mesh.dim:
        raise AssemblyError(f"Expected {mesh.dim} diagonal components, got {len(D)}")
    dinv = _velocity_scaling(mesh, D)
    R = assemble_R(mesh, BoxField(1.0 / np.asarray(D[0].values, dtype=float), mesh))
    wide = (Bt.T @ sp.diags(dinv) @ Bt).tocsr()
    C = (R - wide).tocsr()
    C = 0.5 * (C + C.T)
    C.eliminate_zeros()
    return C.tocsr()


def assemble_rhs(mesh: BoxMesh, f: Callable[[np.ndarray], np.ndarray], n_points: int = 4) -> np.ndarray:
    """
    Momentum load vector: entry (l, v_i) is the integral of f_l over box i.

    Boxes are split into generator fans and integrated with a collapsed Gauss
    rule of ``n_points`` per direction (degree ``2 n_points - 1``).
    """
    n = mesh.parent.n_vertices
    box_integrals = integrate_over_boxes(f, mesh, n=n_points)
    if box_integrals.ndim == 1:
        box_integrals = box_integrals[:, None]
    if box_integrals.shape[1] != mesh.dim:
        raise AssemblyError(f"Forcing must have {mesh.dim} components, got {box_integrals.shape[1]}")
    F = np.zeros(mesh.dim * n)
    for l in range(mesh.dim):
        F[l * n + mesh.box_vertex] = box_integrals[:, l]
    return F


def gauss_green_gradient(mesh: BoxMesh, q: NodalField) -> np.ndarray:
    """
    Box gradients ``|B_i|^-1 sum_j |F_ij| n_ij (w_ij q_i + (1 - w_ij) q_j)``.

    Uses the nodal values on both sides of every face, boundary vertices
    included. Returns an (n_boxes, d) array.
    """
    vals = q.values
    face_val = mesh.weight * vals[mesh.face_vertex[:, 0]] + (1.0 - mesh.weight) * vals[mesh.face_vertex[:, 1]]
    flux = (mesh.area * face_val)[:, None] * mesh.normal
    inc = mesh.incidence
    return (inc @ flux) / mesh.volumes[:, None]


@dataclass
class SaddleSystem:
    """
    Blocks and right-hand sides of the discrete Stokes problem.

    ``eliminated`` flags the Dirichlet velocity DOFs once
    :func:`apply_dirichlet` has run; their rows of A are identity rows and
    ``F`` holds the boundary values there.
    """
    mesh: BoxMesh
    nu: float
    A: sp.csr_matrix
    Bt: sp.csr_matrix
    B: sp.csr_matrix
    C: sp.csr_matrix
    F: np.ndarray
    G: np.ndarray
    D: List[BoxField]
    eliminated: Optional[np.ndarray] = None
    stabilized: bool = True
    meta: Dict = field(default_factory=dict)

    def __post_init__(self):
        n_u, n_p = self.A.shape[0], self.C.shape[0]
        shapes = {
            "A": (self.A.shape, (n_u, n_u)),
            "Bt": (self.Bt.shape, (n_u, n_p)),
            "B": (self.B.shape, (n_p, n_u)),
            "F": (self.F.shape, (n_u,)),
            "G": (self.G.shape, (n_p,)),
        }
        for name, (got, want) in shapes.items():
            if got != want:
                raise AssemblyError(f"Block {name} has shape {got}, expected {want}")

    @property
    def dim(self) -> int:
        return self.mesh.dim

    @property
    def n_u(self) -> int:
        return int(self.A.shape[0])

    @property
    def n_p(self) -> int:
        return int(self.C.shape[0])

    @property
    def K(self) -> sp.csr_matrix:
        return sp.bmat([[self.A, self.Bt], [self.B, self.C]], format="csr")

    @property
    def rhs(self) -> np.ndarray:
        return np.concatenate([self.F, self.G])

    def velocity_dof_map(self) -> np.ndarray:
        """(n_u, 2) array of (component, vertex) per velocity DOF."""
        n = self.mesh.parent.n_vertices
        dofs = np.arange(self.n_u)
        return np.column_stack([dofs // n, dofs % n])

    def pressure_dof_map(self) -> np.ndarray:
        """Primal vertex of every pressure DOF."""
        return self.mesh.box_vertex.copy()


def apply_dirichlet(system: SaddleSystem, g: Callable[[np.ndarray], np.ndarray]) -> SaddleSystem:
    """
    Eliminate the boundary velocity DOFs with data ``g_h = I_h g``.

    Boundary rows of A become identity rows and the eliminated columns of A
    and B move to the right-hand sides, so A stays symmetric.
    """
    mesh = system.mesh
    n = mesh.parent.n_vertices
    bnd_vertices = np.flatnonzero(mesh.parent.boundary)
    values = np.asarray(g(mesh.parent.vertices[bnd_vertices]), dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape != (len(bnd_vertices), mesh.dim):
        raise AssemblyError(f"Boundary data must have {mesh.dim} components")

    mask = np.zeros(system.n_u, dtype=bool)
    gvec = np.zeros(system.n_u)
    for l in range(mesh.dim):
        dofs = l * n + bnd_vertices
        mask[dofs] = True
        gvec[dofs] = values[:, l]

    keep = sp.diags((~mask).astype(float))
    A = (keep @ system.A @ keep + sp.diags(mask.astype(float))).tocsr()
    F = system.F - system.A @ gvec
    F[mask] = gvec[mask]
    G = system.G - system.B @ gvec
    B = (system.B @ keep).tocsr()
    Bt = (keep @ system.Bt).tocsr()
    logger.debug(f"Eliminated {np.count_nonzero(mask)} Dirichlet velocity DOFs")
    return SaddleSystem(
        mesh=mesh, nu=system.nu, A=A, Bt=Bt, B=B, C=system.C, F=F, G=G, D=system.D,
        eliminated=mask, stabilized=system.stabilized, meta=dict(system.meta),
    )


def build_system(mesh: BoxMesh, nu: float,
                 f: Callable[[np.ndarray], np.ndarray],
                 g: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                 stabilized: bool = True, n_points: int = 4,
                 closure: str = "linear") -> SaddleSystem:
    """
    Assemble every block and, when ``g`` is given, eliminate the boundary data.

    ``stabilized=False`` keeps C = 0, the unstabilized collocated scheme that
    admits spurious pressure modes. ``closure`` selects the boundary closure of
    the momentum gradient; C always uses the closed one.
    """
    A = assemble_A(mesh, nu)
    Bt = assemble_Bt(mesh, closure=closure)
    B = assemble_B(mesh)
    D = diag_D(A, mesh)
    if stabilized:
        C = assemble_C(mesh, assemble_Bt(mesh, closure="closed"), D)
    else:
        C = sp.csr_matrix((mesh.n_boxes, mesh.n_boxes))
    F = assemble_rhs(mesh, f, n_points=n_points)
    system = SaddleSystem(
        mesh=mesh, nu=nu, A=A, Bt=Bt, B=B, C=C, F=F, G=np.zeros(mesh.n_boxes), D=D,
        stabilized=stabilized, meta={"closure": closure},
    )
    logger.info(f"Assembled saddle system: {system.n_u} velocity and {system.n_p} pressure DOFs"
                f"{'' if stabilized else ' (unstabilized)'}")
    if g is not None:
        system = apply_dirichlet(system, g)
    return system
