"""
Piecewise-linear nodal fields, piecewise-constant box fields and the discrete
norms of the Box Method.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Union

import numpy as np
import pandas as pd
import scipy.sparse as sp

from src.fields.quadrature import integrate_simplices
from src.mesh.core import BoxMesh, TriMesh

__all__ = [
    "NodalField",
    "BoxField",
    "VectorField",
    "lump",
    "extend_pressure",
    "star_seminorm",
    "tri_star_seminorm",
    "h1_seminorm",
    "l2_norm",
    "l2_norm_box",
    "box_triple_norm",
    "interpolate",
    "lumping_defect",
    "lumping_error",
    "integrate_over_boxes",
    "field_frame",
    "p1_stiffness",
    "p1_mass",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class NodalField:
    """Scalar P1 field given by its values at every primal vertex."""
    values: np.ndarray
    mesh: BoxMesh

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (self.mesh.parent.n_vertices,):
            raise ValueError(f"Nodal field needs {self.mesh.parent.n_vertices} values, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("Nodal field has non-finite values")
        object.__setattr__(self, "values", values)

    def __add__(self, other: "NodalField") -> "NodalField":
        return NodalField(self.values + other.values, self.mesh)

    def __sub__(self, other: "NodalField") -> "NodalField":
        return NodalField(self.values - other.values, self.mesh)

    def scaled(self, factor: float) -> "NodalField":
        return NodalField(factor * self.values, self.mesh)


@dataclass(frozen=True, eq=False)
class BoxField:
    """Piecewise-constant field, one value per box."""
    values: np.ndarray
    mesh: BoxMesh

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (self.mesh.n_boxes,):
            raise ValueError(f"Box field needs {self.mesh.n_boxes} values, got shape {values.shape}")
        object.__setattr__(self, "values", values)


VectorField = List[NodalField]
_Fields = Union[NodalField, Sequence[NodalField]]


def _components(v: _Fields) -> List[NodalField]:
    return [v] if isinstance(v, NodalField) else list(v)


def lump(f: NodalField) -> BoxField:
    """Lumping map: the box value is the nodal value at the generator."""
    return BoxField(f.values[f.mesh.box_vertex], f.mesh)


def extend_pressure(mesh: BoxMesh, box_values: np.ndarray) -> NodalField:
    """
    Nodal pressure from box values.

    Boundary vertices carry no box; they take the face-area weighted mean of
    the linear extrapolations from the boxes facing them, the same values the
    pressure gradient sees on its boundary faces.
    """
    box_values = np.asarray(box_values, dtype=float)
    n = mesh.parent.n_vertices
    values = np.zeros(n)
    values[mesh.box_vertex] = box_values
    bnd = mesh.boundary_faces
    target = mesh.face_vertex[bnd, 1]
    weight = mesh.area[bnd]
    face_values = (mesh.boundary_extrapolation @ box_values)[bnd] if bnd.any() else np.zeros(0)
    total = np.bincount(target, weights=weight, minlength=n)
    summed = np.bincount(target, weights=weight * face_values, minlength=n)
    facing = total > 0
    values[facing] = summed[facing] / total[facing]
    lonely = mesh.parent.boundary & ~facing
    if lonely.any() and len(box_values):
        values[lonely] = box_values.mean()
    return NodalField(values, mesh)


def _jumps(q: NodalField) -> np.ndarray:
    fv = q.mesh.face_vertex
    return q.values[fv[:, 1]] - q.values[fv[:, 0]]


def star_seminorm(q: NodalField) -> float:
    """
    |q|_*: face normal derivatives weighted by d_ij over every dual face.

    For P1 fields the normal derivative on F_ij is the difference quotient
    (q_j - q_i) / d_ij.
    """
    m = q.mesh
    return float(np.sqrt(np.sum(m.area / m.d_ij * _jumps(q) ** 2)))


def tri_star_seminorm(q: NodalField) -> float:
    """|q|_{triangle,*}: the *-seminorm with the extra weight h_T^3 per face."""
    m = q.mesh
    return float(np.sqrt(np.sum(m.face_h ** 3 * m.area / m.d_ij * _jumps(q) ** 2)))


def _cell_gradients(v: NodalField) -> np.ndarray:
    primal = v.mesh.parent
    return np.einsum("mk,mkd->md", v.values[primal.cells], primal.cell_gradients)


def h1_seminorm(v: _Fields) -> float:
    """Exact H1 seminorm of a scalar or vector P1 field."""
    total = 0.0
    for comp in _components(v):
        grad = _cell_gradients(comp)
        total += float(np.sum(comp.mesh.parent.cell_measures * np.einsum("md,md->m", grad, grad)))
    return float(np.sqrt(total))


def l2_norm(v: _Fields) -> float:
    """Exact L2 norm of a scalar or vector P1 field."""
    total = 0.0
    for comp in _components(v):
        primal = comp.mesh.parent
        d = primal.dim
        vals = comp.values[primal.cells]
        local = (np.sum(vals ** 2, axis=1) + np.sum(vals, axis=1) ** 2) / ((d + 1) * (d + 2))
        total += float(np.sum(primal.cell_measures * local))
    return float(np.sqrt(total))


def l2_norm_box(w: BoxField) -> float:
    return float(np.sqrt(np.sum(w.mesh.volumes * w.values ** 2)))


def box_triple_norm(v: Sequence[NodalField], q: NodalField) -> float:
    """|||v, q|||_box = (|v|_H1^2 + ||Pi q||_L2^2 + |q|_{triangle,*}^2)^(1/2)."""
    return float(np.sqrt(
        h1_seminorm(v) ** 2 + l2_norm_box(lump(q)) ** 2 + tri_star_seminorm(q) ** 2
    ))


def interpolate(fn: Callable[[np.ndarray], np.ndarray], mesh: BoxMesh) -> Union[NodalField, VectorField]:
    """
    Lagrange P1 interpolant of an analytic function.

    ``fn`` maps an (N, d) array of points to (N,) values, or to (N, k) for a
    vector function, in which case a list of k nodal fields is returned.
    """
    values = np.asarray(fn(mesh.parent.vertices), dtype=float)
    if values.ndim == 0:
        values = np.full(mesh.parent.n_vertices, float(values))
    if values.ndim == 1:
        return NodalField(values, mesh)
    return [NodalField(values[:, k], mesh) for k in range(values.shape[1])]


def lumping_defect(q: NodalField) -> np.ndarray:
    """
    Per-cell integral of q - Pi q.

    Pi q takes the vertex value on the circumcentric part of the cell closest
    to each vertex. The defect vanishes when every such part has measure
    |T| / (d + 1), as on equilateral cells.
    """
    primal = q.mesh.parent
    vals = q.values[primal.cells]
    exact = primal.cell_measures * vals.mean(axis=1)
    lumped = np.sum(q.mesh.cell_pieces * vals, axis=1)
    return exact - lumped


def lumping_error(q: NodalField) -> np.ndarray:
    """Per-cell ||q - Pi q||_L2, integrated exactly over the circumcentric pieces."""
    mesh = q.mesh
    primal = mesh.parent
    d = primal.dim
    cells = primal.cells[mesh.piece_cell]
    base = primal.vertices[cells[:, 0]]
    grad = _cell_gradients(q)[mesh.piece_cell]
    at_base = q.values[cells[:, 0]]
    corner_vals = at_base[:, None] + np.einsum("mkd,md->mk", mesh.pieces - base[:, None, :], grad)
    err = corner_vals - q.values[mesh.piece_vertex][:, None]
    local = (np.sum(err ** 2, axis=1) + np.sum(err, axis=1) ** 2) / ((d + 1) * (d + 2))
    per_cell = np.bincount(mesh.piece_cell, weights=mesh.piece_measure * local, minlength=primal.n_cells)
    return np.sqrt(np.maximum(per_cell, 0.0))


def integrate_over_boxes(fn: Callable[[np.ndarray], np.ndarray], mesh: BoxMesh, n: int = 4) -> np.ndarray:
    """
    Integrals of ``fn`` over every box, (n_boxes,) or (n_boxes, k).

    Uses the circumcentric pieces when the mesh has them; imported meshes
    without geometry fall back to |B_i| fn(p_i).
    """
    if not mesh.has_pieces:
        logger.warning("Mesh has no box geometry; box integrals use the generator value")
        vals = np.asarray(fn(mesh.generators), dtype=float)
        return mesh.volumes.reshape((-1,) + (1,) * (vals.ndim - 1)) * vals
    own = mesh.piece_box >= 0
    per_piece = integrate_simplices(fn, mesh.pieces[own], mesh.piece_measure[own], n=n)
    boxes = mesh.piece_box[own]
    if per_piece.ndim == 1:
        return np.bincount(boxes, weights=per_piece, minlength=mesh.n_boxes)
    return np.column_stack([
        np.bincount(boxes, weights=per_piece[:, k], minlength=mesh.n_boxes)
        for k in range(per_piece.shape[1])
    ])


def field_frame(fields: Dict[str, NodalField]) -> pd.DataFrame:
    """Tabulate nodal fields against vertex coordinates, ready for CSV export."""
    if not fields:
        raise ValueError("No fields to tabulate")
    mesh = next(iter(fields.values())).mesh
    coords = mesh.parent.vertices
    frame = pd.DataFrame({"vertex": np.arange(mesh.parent.n_vertices)})
    for k, axis in enumerate("xyz"[:mesh.dim]):
        frame[axis] = coords[:, k]
    frame["boundary"] = mesh.parent.boundary.astype(int)
    for name, field_ in fields.items():
        frame[name] = field_.values
    return frame


def _cell_pairs(primal: TriMesh, local: np.ndarray) -> sp.csr_matrix:
    k = primal.dim + 1
    rows = np.repeat(primal.cells, k, axis=1).ravel()
    cols = np.tile(primal.cells, (1, k)).ravel()
    n = primal.n_vertices
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def p1_stiffness(primal: TriMesh) -> sp.csr_matrix:
    """Scalar P1 stiffness matrix on the primal mesh, all vertices."""
    grads = primal.cell_gradients
    local = primal.cell_measures[:, None, None] * np.einsum("mad,mbd->mab", grads, grads)
    return _cell_pairs(primal, local)


def p1_mass(primal: TriMesh) -> sp.csr_matrix:
    """Consistent P1 mass matrix on the primal mesh."""
    d = primal.dim
    ref = (np.ones((d + 1, d + 1)) + np.eye(d + 1)) / ((d + 1) * (d + 2))
    local = primal.cell_measures[:, None, None] * ref[None, :, :]
    return _cell_pairs(primal, local)
