"""
Generalized eigenvalue studies of the stabilized Box Method.

The two headline quantities are the coercivity constant of the Rhie-Chow
matrix against the *-norm, ``min q'Cq / q'Qq``, and the generalized inf-sup
constant ``min q'(S_box + C)q / q'Vq`` of the pressure Schur complement
against the box mass matrix. Both pencils annihilate constants, so minima are
taken on the complement of the constant vector. The studies use the closed
boundary closure of the pressure gradient, the one C is built from.
"""
import logging
import warnings
from dataclasses import asdict, dataclass
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from tqdm import tqdm

from src.assembly.operators import (assemble_A, assemble_Bt, assemble_C, assemble_R,
                                    build_system, diag_D, gauss_green_gradient)
from src.fields.norms import BoxField, NodalField, h1_seminorm, p1_mass, p1_stiffness, star_seminorm
from src.harness.convergence import fit_rate
from src.mesh.core import BoxMesh

__all__ = [
    "SpectralError",
    "EigStudyRow",
    "NormConstantRow",
    "ConsistencyRow",
    "star_norm_matrix",
    "star_block_matrix",
    "pressure_star_matrix",
    "mass_matrix",
    "min_generalized_eig",
    "coercivity_study",
    "infsup_study",
    "norm_constant_study",
    "consistency_study",
    "study_frame",
    "fitted_slope",
]

logger = logging.getLogger(__name__)

DENSE_LIMIT = 2000
ASYMMETRY_TOL = 1e-10

Matrix = Union[np.ndarray, sp.spmatrix, spla.LinearOperator]


class SpectralError(Exception):
    """Raised for non-SPD mass matrices, asymmetric pencils or stalled eigensolves."""
    pass


@dataclass
class EigStudyRow:
    """One refinement level of an eigenvalue study."""
    h: float
    value: float
    rate: Optional[float] = None
    n_dofs: int = 0
    nu: float = 1.0

    @property
    def scaled_value(self) -> float:
        """``nu * value``; independent of the viscosity for both studies."""
        return self.nu * self.value

    def to_dict(self):
        return asdict(self)


@dataclass
class NormConstantRow:
    """Sharp constants of the *-norm equivalences on fields vanishing on the boundary."""
    h: float
    h_m: float
    lumped_l2_star: float
    star_h1: float
    h1_star: float
    l2_star: float
    star_inverse: float
    n_dofs: int = 0

    def to_dict(self):
        return asdict(self)


@dataclass
class ConsistencyRow:
    """Worst observed defect ratios of the Gauss-Green box gradient."""
    h: float
    stabilization_ratio: float
    gradient_ratio: float
    samples: int = 0

    def to_dict(self):
        return asdict(self)


def star_norm_matrix(mesh: BoxMesh) -> sp.csr_matrix:
    """
    Nodal matrix Q with ``q'Qq = |q|_*^2`` over every dual face.

    Boundary vertices are included, so ``nu * blockdiag(Q, ..., Q)`` is the
    viscous block before boundary elimination.
    """
    n = mesh.parent.n_vertices
    vi, vj = mesh.face_vertex[:, 0], mesh.face_vertex[:, 1]
    coef = mesh.area / mesh.d_ij
    rows = np.concatenate([vi, vj, vi, vj])
    cols = np.concatenate([vi, vj, vj, vi])
    vals = np.concatenate([coef, coef, -coef, -coef])
    return sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()


def star_block_matrix(mesh: BoxMesh) -> sp.csr_matrix:
    return sp.block_diag([star_norm_matrix(mesh)] * mesh.dim, format="csr")


def pressure_star_matrix(mesh: BoxMesh) -> sp.csr_matrix:
    """
    *-norm on box pressures: box-box faces only, ``|F_ij| / d_ij`` weights.

    Faces towards boundary vertices carry no jump, matching the closed
    gradient inside C.
    """
    return assemble_R(mesh, BoxField(1.0 / mesh.volumes, mesh))


def mass_matrix(mesh: BoxMesh) -> sp.dia_matrix:
    """Box mass matrix, ``V_ii = |B_i|``."""
    return sp.diags(mesh.volumes)


def _symmetrized(S: Matrix) -> Matrix:
    if isinstance(S, spla.LinearOperator):
        return S
    if sp.issparse(S):
        S = S.tocsr()
        scale = abs(S).max() if S.nnz else 0.0
        skew = abs(S - S.T).max() if S.nnz else 0.0
    else:
        S = np.asarray(S, dtype=float)
        scale = np.abs(S).max() if S.size else 0.0
        skew = np.abs(S - S.T).max() if S.size else 0.0
    if skew > ASYMMETRY_TOL * max(scale, 1.0):
        raise SpectralError(f"Matrix is not symmetric (max |S - S'| = {skew:.3e})")
    return 0.5 * (S + S.T)


def _dense(M: Matrix) -> np.ndarray:
    return M.toarray() if sp.issparse(M) else np.asarray(M, dtype=float)


def _deflation_direction(M: Matrix, c: np.ndarray) -> np.ndarray:
    """M c, or c itself when M annihilates c."""
    w = np.asarray(M @ c).ravel()
    if np.linalg.norm(w) <= 1e-12 * np.linalg.norm(c) * max(1.0, _diagonal_scale(M)):
        return c
    return w


def _diagonal_scale(M: Matrix) -> float:
    diag = M.diagonal() if sp.issparse(M) else np.diag(np.asarray(M))
    return float(np.abs(diag).max()) if len(diag) else 0.0


def _check_mass(M: Matrix) -> None:
    diag = M.diagonal() if sp.issparse(M) else np.diag(np.asarray(M))
    if np.any(diag < 0) or not np.any(diag > 0):
        raise SpectralError("Mass matrix is not positive (semi)definite")


def min_generalized_eig(S: Matrix, M: Matrix, tol: float = 1e-8,
                        deflate: Optional[np.ndarray] = None,
                        dense_limit: int = DENSE_LIMIT,
                        inverse: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                        maxiter: int = 2000) -> float:
    """
    Smallest generalized eigenvalue ``min q'Sq / q'Mq``.

    Parameters
    ----------
    S : ndarray, sparse matrix or LinearOperator
        Symmetric; explicit matrices are symmetrized after an asymmetry check
    M : ndarray or sparse matrix
        Positive definite on the deflated space
    tol : float, default 1e-8
        Relative accuracy of the eigenvalue
    deflate : ndarray, optional
        Vector removed from the search space: the minimum is taken on the
        M-orthogonal complement (the plain complement when M annihilates it)
    dense_limit : int, default 2000
        Sizes up to this use a dense solve
    inverse : callable, optional
        Applies the inverse of S on the deflated space; enables shift-invert
        for operator-valued S

    Raises
    ------
    SpectralError
        If M is not positive definite, S is not symmetric or the iterative
        solve does not converge
    """
    n = S.shape[0]
    if S.shape != (n, n) or M.shape != (n, n):
        raise ValueError(f"Pencil shapes {S.shape} and {M.shape} do not match")
    _check_mass(M)
    S = _symmetrized(S)
    w = None if deflate is None else _deflation_direction(M, np.asarray(deflate, dtype=float))
    is_operator = isinstance(S, spla.LinearOperator)

    if n <= dense_limit and not is_operator:
        Sd, Md = _dense(S), _dense(M)
        if w is not None:
            Z = la.null_space(w[None, :])
            Sd, Md = Z.T @ Sd @ Z, Z.T @ Md @ Z
        try:
            value = la.eigh(Sd, Md, subset_by_index=[0, 0], eigvals_only=True)[0]
        except la.LinAlgError as e:
            raise SpectralError(f"Mass matrix is not positive definite on the search space: {e}")
        return float(value)

    if inverse is None and not is_operator:
        inverse = _bordered_inverse(sp.csc_matrix(S), w)
    if inverse is not None:
        return _shift_invert(S, M, inverse, tol, maxiter)
    c = None if deflate is None else np.asarray(deflate, dtype=float)
    return _lobpcg(S, M, c, tol, maxiter)


def _bordered_inverse(S: sp.csc_matrix, w: Optional[np.ndarray]) -> Callable[[np.ndarray], np.ndarray]:
    n = S.shape[0]
    if w is None:
        K = S
    else:
        col = sp.csc_matrix(w[:, None])
        K = sp.bmat([[S, col], [col.T, None]], format="csc")
    try:
        lu = spla.splu(K)
    except RuntimeError as e:
        raise SpectralError(f"Cannot factorize the pencil matrix: {e}")
    if w is None:
        return lu.solve
    return lambda b: lu.solve(np.append(b, 0.0))[:n]


def _shift_invert(S: Matrix, M: Matrix, inverse: Callable, tol: float, maxiter: int) -> float:
    n = S.shape[0]
    op = spla.LinearOperator((n, n), matvec=inverse, dtype=float)
    S_op = spla.aslinearoperator(S)
    try:
        values = spla.eigsh(S_op, k=1, M=M, sigma=0.0, which="LM", OPinv=op, tol=tol,
                            maxiter=maxiter, return_eigenvectors=False)
    except (spla.ArpackNoConvergence, spla.ArpackError) as e:
        raise SpectralError(f"Shift-invert eigensolve did not converge: {e}")
    return float(np.min(values))


def _lobpcg(S: Matrix, M: Matrix, c: Optional[np.ndarray], tol: float, maxiter: int) -> float:
    n = S.shape[0]
    X = np.random.default_rng(0).standard_normal((n, 1))
    Y = None
    if c is not None:
        # constraints are M-orthogonal, so M must not annihilate c
        if np.allclose(np.asarray(M @ c).ravel(), 0.0):
            raise SpectralError("Operator path needs a mass matrix that is definite on the deflated vector")
        Y = c[:, None]
    res_tol = np.sqrt(tol)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        values, vectors = spla.lobpcg(S, X, B=M, Y=Y, tol=tol, maxiter=maxiter, largest=False)
    x = vectors[:, 0]
    lam = float(values[0])
    Mx = np.asarray(M @ x).ravel()
    residual = np.linalg.norm(np.asarray(S @ x).ravel() - lam * Mx) / max(np.linalg.norm(Mx) * abs(lam), 1e-300)
    if not np.isfinite(lam) or residual > 10 * res_tol:
        raise SpectralError(f"LOBPCG stagnated (relative residual {residual:.3e})")
    return lam


def _with_rates(rows: List[EigStudyRow]) -> List[EigStudyRow]:
    for prev, row in zip(rows[:-1], rows[1:]):
        if prev.value > 0 and row.value > 0 and prev.h != row.h:
            row.rate = float(np.log(prev.value / row.value) / np.log(prev.h / row.h))
    return rows


def _levels(meshes: Sequence[BoxMesh], desc: str, progress: bool):
    return tqdm(meshes, desc=desc, disable=not progress, leave=False)


def coercivity_study(meshes: Sequence[BoxMesh], nu: float = 1.0, tol: float = 1e-8,
                     dense_limit: int = DENSE_LIMIT, progress: bool = False) -> List[EigStudyRow]:
    """
    Minimum Rayleigh quotient of the Rhie-Chow matrix C against the pressure
    *-norm matrix, one row per mesh.

    On symmetric lattices smooth modes give
    ``q'Cq ~ h^4 / (8 nu) int |D^2 q|^2``, so the fitted slope lies between 3
    and 4 and drifts towards 4 under refinement.
    """
    rows = []
    for mesh in _levels(meshes, "coercivity", progress):
        A = assemble_A(mesh, nu)
        C = assemble_C(mesh, assemble_Bt(mesh, closure="closed"), diag_D(A, mesh))
        Q = pressure_star_matrix(mesh)
        value = min_generalized_eig(C, Q, tol=tol, deflate=np.ones(mesh.n_boxes), dense_limit=dense_limit)
        rows.append(EigStudyRow(h=mesh.parent.h, value=value, n_dofs=mesh.n_boxes, nu=nu))
        logger.info(f"Coercivity h={mesh.parent.h:.5f}: {value:.4e} ({mesh.n_boxes} boxes)")
    return _with_rates(rows)


def _zero_field(points: np.ndarray) -> np.ndarray:
    return np.zeros_like(points)


def _schur_inverse(A: sp.spmatrix, Bt: sp.spmatrix, C: sp.spmatrix, volumes: np.ndarray):
    """Solves ``(Bt' A^-1 Bt + C) x = b`` on mean-zero pressures through the bordered saddle matrix."""
    n_u, n_p = Bt.shape
    col = sp.csc_matrix(volumes[:, None])
    K = sp.bmat([[A, Bt, None], [-Bt.T, C, col], [None, col.T, None]], format="csc")
    try:
        lu = spla.splu(K)
    except RuntimeError as e:
        raise SpectralError(f"Saddle matrix is singular: {e}")

    def solve(b: np.ndarray) -> np.ndarray:
        rhs = np.concatenate([np.zeros(n_u), b, [0.0]])
        return lu.solve(rhs)[n_u:n_u + n_p]

    return solve


def infsup_study(meshes: Sequence[BoxMesh], nu: float = 1.0, stabilized: bool = True,
                 tol: float = 1e-8, dense_limit: int = DENSE_LIMIT,
                 progress: bool = False) -> List[EigStudyRow]:
    """
    Minimum generalized eigenvalue of ``S_box + C`` against the box mass
    matrix on mean-zero pressures, ``S_box = Bt' A^-1 Bt`` with the Dirichlet
    velocity rows eliminated. The value is the square of the discrete inf-sup
    constant; ``stabilized=False`` drops C.
    """
    rows = []
    for mesh in _levels(meshes, "inf-sup", progress):
        system = build_system(mesh, nu, _zero_field, _zero_field, stabilized=stabilized, closure="closed")
        A = system.A.tocsc()
        Bt = system.Bt.tocsc()
        C = system.C
        V = mass_matrix(mesh)
        ones = np.ones(mesh.n_boxes)
        try:
            lu = spla.splu(A)
        except RuntimeError as e:
            raise SpectralError(f"Momentum block is singular at h={mesh.parent.h:.5f}: {e}")
        if mesh.n_boxes <= dense_limit:
            S = Bt.T @ lu.solve(Bt.toarray()) + C.toarray()
            value = min_generalized_eig(S, V, tol=tol, deflate=ones, dense_limit=dense_limit)
        else:
            S = spla.LinearOperator(
                (mesh.n_boxes, mesh.n_boxes),
                matvec=lambda x, lu=lu, Bt=Bt, C=C: Bt.T @ lu.solve(Bt @ x) + C @ x,
                dtype=float,
            )
            value = min_generalized_eig(S, V, tol=tol, deflate=ones, dense_limit=dense_limit,
                                        inverse=_schur_inverse(A, Bt, C, mesh.volumes))
        rows.append(EigStudyRow(h=mesh.parent.h, value=value, n_dofs=mesh.n_boxes, nu=nu))
        logger.info(f"Inf-sup h={mesh.parent.h:.5f}: {value:.4e}{'' if stabilized else ' (unstabilized)'}")
    return _with_rates(rows)


def norm_constant_study(meshes: Sequence[BoxMesh], dense_limit: int = DENSE_LIMIT,
                        progress: bool = False) -> List[NormConstantRow]:
    """
    Sharp constants of the five *-norm inequalities on P1 fields vanishing on
    the boundary:

    - ``||Pi q|| <= c |q|_*``
    - ``|q|_* <= c |q|_H1`` and ``|q|_H1 <= c |q|_*``
    - ``||q|| <= c |q|_*``
    - ``|q|_* <= c h_m^-1 ||Pi q||``
    """
    rows = []
    for mesh in _levels(meshes, "norm constants", progress):
        idx = mesh.box_vertex
        star = star_norm_matrix(mesh)[idx][:, idx]
        stiff = p1_stiffness(mesh.parent)[idx][:, idx]
        mass = p1_mass(mesh.parent)[idx][:, idx]
        lumped = mass_matrix(mesh)

        def sup(num, den):
            return float(np.sqrt(1.0 / min_generalized_eig(den, num, dense_limit=dense_limit)))

        h_m = float(mesh.parent.cell_diameters.min())
        row = NormConstantRow(
            h=mesh.parent.h,
            h_m=h_m,
            lumped_l2_star=sup(lumped, star),
            star_h1=sup(star, stiff),
            h1_star=sup(stiff, star),
            l2_star=sup(mass, star),
            star_inverse=h_m * sup(star, lumped),
            n_dofs=mesh.n_boxes,
        )
        rows.append(row)
        logger.info(f"Norm constants h={row.h:.5f}: inverse {row.star_inverse:.3f}, "
                    f"lumped {row.lumped_l2_star:.3f}")
    return rows


def _exact_box_gradients(mesh: BoxMesh, p: NodalField) -> np.ndarray:
    """``int_{B_i} grad p`` for P1 p, summed over the circumcentric pieces."""
    primal = mesh.parent
    grads = np.einsum("mk,mkd->md", p.values[primal.cells], primal.cell_gradients)
    own = mesh.piece_box >= 0
    boxes = mesh.piece_box[own]
    weighted = mesh.piece_measure[own, None] * grads[mesh.piece_cell[own]]
    return np.column_stack([
        np.bincount(boxes, weights=weighted[:, k], minlength=mesh.n_boxes) for k in range(mesh.dim)
    ])


def consistency_study(meshes: Sequence[BoxMesh], nu: float = 1.0, samples: int = 20,
                      seed: int = 0, progress: bool = False) -> List[ConsistencyRow]:
    """
    Defect of the Gauss-Green box gradient, measured through random P1 pairs.

    ``stabilization_ratio`` is the largest ``|(s - s~)(p, Pi q)| / (|p|_H1 |q|_*)``
    where s uses exact box integrals of grad p and s~ the Gauss-Green
    gradient inside the wide stencil; ``gradient_ratio`` is the same for the
    pressure-gradient form, ``|sum_i v_i . (E_i - G_i)| / (|v|_* |p|_H1)``.

    Raises
    ------
    SpectralError
        If a mesh carries no circumcentric pieces (imported meshes)
    """
    rng = np.random.default_rng(seed)
    rows = []
    for mesh in _levels(meshes, "consistency", progress):
        if not mesh.has_pieces:
            raise SpectralError("Consistency study needs box geometry; rebuild the dual from the primal mesh")
        n = mesh.parent.n_vertices
        Bt = assemble_Bt(mesh, closure="closed")
        dinv = 1.0 / diag_D(assemble_A(mesh, nu), mesh)[0].values
        worst_s = worst_b = 0.0
        for _ in range(samples):
            p = NodalField(rng.standard_normal(n), mesh)
            q = NodalField(rng.standard_normal(n), mesh)
            v = [NodalField(rng.standard_normal(n), mesh) for _ in range(mesh.dim)]
            defect = _exact_box_gradients(mesh, p) - gauss_green_gradient(mesh, p) * mesh.volumes[:, None]
            grad_q = (Bt @ q.values[mesh.box_vertex]).reshape(mesh.dim, n)[:, mesh.box_vertex].T
            p_norm = h1_seminorm(p)
            s_defect = abs(float(np.sum(dinv[:, None] * grad_q * defect)))
            worst_s = max(worst_s, s_defect / (p_norm * star_seminorm(q)))
            v_box = np.column_stack([c.values[mesh.box_vertex] for c in v])
            v_star = float(np.sqrt(sum(star_seminorm(c) ** 2 for c in v)))
            worst_b = max(worst_b, abs(float(np.sum(v_box * defect))) / (p_norm * v_star))
        rows.append(ConsistencyRow(h=mesh.parent.h, stabilization_ratio=worst_s,
                                   gradient_ratio=worst_b, samples=samples))
        logger.info(f"Consistency h={mesh.parent.h:.5f}: stabilization {worst_s:.3e}, gradient {worst_b:.3e}")
    return rows


def study_frame(rows: Sequence) -> pd.DataFrame:
    """Tabulate study rows (h first, one column per field)."""
    return pd.DataFrame([row.to_dict() for row in rows])


def fitted_slope(rows: Sequence, column: str = "value") -> float:
    """Least-squares slope of log(column) against log(h)."""
    frame = study_frame(rows)
    return fit_rate(list(zip(frame["h"], frame[column])))
