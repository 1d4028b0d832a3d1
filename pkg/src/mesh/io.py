"""
Reader and writer for the plain-text ``RCBM-MESH v1`` format.

Layout::

    RCBM-MESH v1
    DIM <d>
    VERTICES <n>
    <index> <x> <y> [<z>] <boundary 0|1>
    CELLS <m>
    <index> <v0> ... <vd>
    BOXES <nb>
    <index> <vertex> <gx> <gy> [<gz>] <volume>
    FACES <nf>
    <i> <j> <vertex_i> <vertex_j> <area> <d_ij> <w_ij> <n_x> <n_y> [<n_z>] <diamond>
    END

``j = -1`` marks a face towards a boundary vertex. Floats are written with 17
significant digits so a write/read cycle is bit-stable. Reading re-validates
every dual invariant, which makes this the import path for duals built by
external tools (3D in particular).
"""
import logging
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from src.mesh.core import (
    DEFAULT_TOL,
    BoxMesh,
    MeshError,
    TriMesh,
    build_dual,
    make_trimesh,
)

__all__ = ["MeshFormatError", "write_mesh", "read_mesh", "HEADER"]

logger = logging.getLogger(__name__)

HEADER = "RCBM-MESH v1"
_FLOAT = "%.17g"


class MeshFormatError(MeshError):
    """Raised for malformed or inconsistent mesh files."""
    pass


def _fmt(values) -> str:
    return " ".join(_FLOAT % v for v in values)


def write_mesh(mesh: BoxMesh, path: Union[str, Path]) -> Path:
    """Write a dual mesh and its primal parent to ``path``."""
    path = Path(path)
    primal = mesh.parent
    lines: List[str] = [HEADER, f"DIM {mesh.dim}", f"VERTICES {primal.n_vertices}"]
    for k, (x, flag) in enumerate(zip(primal.vertices, primal.boundary)):
        lines.append(f"{k} {_fmt(x)} {int(flag)}")
    lines.append(f"CELLS {primal.n_cells}")
    for k, cell in enumerate(primal.cells):
        lines.append(f"{k} " + " ".join(str(int(v)) for v in cell))
    lines.append(f"BOXES {mesh.n_boxes}")
    for k, v in enumerate(mesh.box_vertex):
        lines.append(f"{k} {int(v)} {_fmt(primal.vertices[v])} {_FLOAT % mesh.volumes[k]}")
    lines.append(f"FACES {mesh.n_faces}")
    for k in range(mesh.n_faces):
        i, j = mesh.face_box[k]
        vi, vj = mesh.face_vertex[k]
        lines.append(
            f"{int(i)} {int(j)} {int(vi)} {int(vj)} "
            f"{_fmt((mesh.area[k], mesh.d_ij[k], mesh.weight[k]))} "
            f"{_fmt(mesh.normal[k])} {_FLOAT % mesh.diamond[k]}"
        )
    lines.append("END")
    path.write_text("\n".join(lines) + "\n")
    logger.info(f"Wrote mesh with {mesh.n_boxes} boxes to {path}")
    return path


def _section(lines: List[str], pos: int, name: str, width: int) -> Tuple[np.ndarray, int]:
    if pos >= len(lines):
        raise MeshFormatError(f"Missing section {name}")
    parts = lines[pos].split()
    if len(parts) != 2 or parts[0] != name:
        raise MeshFormatError(f"Expected '{name} <count>' at line {pos + 1}, got '{lines[pos]}'")
    try:
        count = int(parts[1])
    except ValueError:
        raise MeshFormatError(f"Bad count in section {name}: {parts[1]}")
    rows = lines[pos + 1:pos + 1 + count]
    if len(rows) != count:
        raise MeshFormatError(f"Section {name} is truncated: expected {count} rows")
    try:
        table = np.array([[float(x) for x in row.split()] for row in rows], dtype=float)
    except ValueError as e:
        raise MeshFormatError(f"Non-numeric entry in section {name}: {e}")
    if count == 0:
        table = table.reshape(0, width)
    if table.shape[1] != width:
        raise MeshFormatError(f"Section {name} rows must have {width} columns, got {table.shape[1]}")
    if np.any(table[:, 0] != np.arange(count)) and name != "FACES":
        raise MeshFormatError(f"Section {name} indices must run 0..{count - 1}")
    return table, pos + 1 + count


def _face_diameters(primal: TriMesh, face_vertex: np.ndarray) -> np.ndarray:
    dim = primal.dim
    edges, diam = [], []
    for r in range(dim + 1):
        for s in range(r + 1, dim + 1):
            a, b = primal.cells[:, r], primal.cells[:, s]
            edges.append(np.column_stack([np.minimum(a, b), np.maximum(a, b)]))
            diam.append(primal.cell_diameters)
    keys, inverse = np.unique(np.concatenate(edges), axis=0, return_inverse=True)
    edge_h = np.zeros(len(keys))
    np.maximum.at(edge_h, inverse.ravel(), np.concatenate(diam))
    wanted = np.sort(face_vertex, axis=1)
    code = keys[:, 0] * primal.n_vertices + keys[:, 1]
    target = wanted[:, 0] * primal.n_vertices + wanted[:, 1]
    loc = np.searchsorted(code, target)
    loc = np.clip(loc, 0, len(code) - 1)
    if np.any(code[loc] != target):
        raise MeshFormatError("Faces reference vertex pairs that are not primal edges")
    return edge_h[loc]


def _with_pieces(mesh: BoxMesh, path: Path, tol: float) -> BoxMesh:
    """Attach the circumcentric pieces of the cells when the file holds that dual."""
    try:
        rebuilt = build_dual(mesh.parent, tol)
    except MeshError as e:
        logger.warning(f"{path}: cannot rebuild box geometry from the cells ({e}); "
                       f"box integrals fall back to one point per box")
        return mesh
    same = (
        rebuilt.n_faces == mesh.n_faces
        and np.array_equal(rebuilt.box_vertex, mesh.box_vertex)
        and np.all(np.abs(rebuilt.volumes - mesh.volumes) <= 1e3 * tol * mesh.volumes)
    )
    if not same:
        logger.warning(f"{path}: boxes are not the circumcentric dual of the cells; "
                       f"box integrals fall back to one point per box")
        return mesh
    return replace(
        mesh,
        pieces=rebuilt.pieces,
        piece_vertex=rebuilt.piece_vertex,
        piece_cell=rebuilt.piece_cell,
        piece_measure=rebuilt.piece_measure,
        boundary_remainder=rebuilt.boundary_remainder,
    )


def read_mesh(path: Union[str, Path], tol: float = DEFAULT_TOL) -> BoxMesh:
    """
    Read and validate a mesh file.

    When the file has cells and its boxes are their circumcentric dual, the
    box geometry used for quadrature is rebuilt from the cells.

    Raises
    ------
    MeshFormatError
        On a bad header, malformed section or failed invariant
    """
    path = Path(path)
    lines = [ln.strip() for ln in path.read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines or lines[0] != HEADER:
        raise MeshFormatError(f"{path} does not start with '{HEADER}'")
    try:
        dim = int(lines[1].split()[1]) if lines[1].startswith("DIM") else -1
    except (IndexError, ValueError):
        dim = -1
    if dim not in (2, 3):
        raise MeshFormatError(f"{path}: expected 'DIM 2' or 'DIM 3' on line 2")

    vtab, pos = _section(lines, 2, "VERTICES", dim + 2)
    ctab, pos = _section(lines, pos, "CELLS", dim + 2)
    btab, pos = _section(lines, pos, "BOXES", dim + 3)
    ftab, pos = _section(lines, pos, "FACES", dim + 8)
    if pos >= len(lines) or lines[pos] != "END":
        raise MeshFormatError(f"{path}: missing END marker")

    try:
        primal = make_trimesh(
            vtab[:, 1:1 + dim],
            ctab[:, 1:].astype(np.int64),
            boundary=vtab[:, 1 + dim] > 0.5,
            tol=tol,
        )
    except MeshError as e:
        raise MeshFormatError(f"{path}: invalid primal mesh: {e}")

    box_vertex = btab[:, 1].astype(np.int64)
    if np.any(primal.boundary[box_vertex]) or len(box_vertex) != len(primal.interior) \
            or np.any(np.sort(box_vertex) != primal.interior):
        raise MeshFormatError(f"{path}: boxes must be exactly the interior vertices")
    if np.any(np.abs(btab[:, 2:2 + dim] - primal.vertices[box_vertex]) > tol * (1.0 + np.abs(primal.vertices[box_vertex]))):
        raise MeshFormatError(f"{path}: box generators do not match their vertices")
    vertex_box = -np.ones(primal.n_vertices, dtype=np.int64)
    vertex_box[box_vertex] = np.arange(len(box_vertex))

    face_box = ftab[:, 0:2].astype(np.int64)
    face_vertex = ftab[:, 2:4].astype(np.int64)
    if face_vertex.size and (face_vertex.min() < 0 or face_vertex.max() >= primal.n_vertices):
        raise MeshFormatError(f"{path}: faces reference unknown vertices")
    expected = np.column_stack([vertex_box[face_vertex[:, 0]], vertex_box[face_vertex[:, 1]]])
    if np.any(expected != face_box):
        raise MeshFormatError(f"{path}: face box indices do not match their vertices")

    if primal.n_cells:
        face_h = _face_diameters(primal, face_vertex)
    else:
        logger.warning(f"{path} has no cells; using generator distances as element diameters")
        face_h = ftab[:, 5].copy()

    mesh = BoxMesh(
        parent=primal,
        box_vertex=box_vertex,
        vertex_box=vertex_box,
        volumes=btab[:, 2 + dim].copy(),
        face_box=face_box,
        face_vertex=face_vertex,
        area=ftab[:, 4].copy(),
        d_ij=ftab[:, 5].copy(),
        normal=ftab[:, 7:7 + dim].copy(),
        weight=ftab[:, 6].copy(),
        diamond=ftab[:, 7 + dim].copy(),
        face_h=face_h,
        meta={"source": str(path)},
    )
    try:
        mesh.validate(tol)
    except MeshError as e:
        raise MeshFormatError(f"{path}: {e}")

    half = 0.5 * mesh.diamond
    pyramids = np.bincount(face_box[:, 0], weights=half, minlength=mesh.n_boxes)
    inner = mesh.inner_faces
    pyramids += np.bincount(face_box[inner, 1], weights=half[inner], minlength=mesh.n_boxes)
    if np.any(np.abs(pyramids - mesh.volumes) > 1e3 * tol * mesh.volumes):
        raise MeshFormatError(f"{path}: box volumes disagree with the face pyramids")

    if primal.n_cells:
        mesh = _with_pieces(mesh, path, tol)

    logger.info(f"Read {dim}D mesh with {mesh.n_boxes} boxes and {mesh.n_faces} faces from {path}")
    return mesh
