"""
Matrix Market and CSV export of assembled systems.
"""
import logging
from pathlib import Path
from typing import Dict, Union

import numpy as np
import pandas as pd
import scipy.io
import scipy.sparse as sp

from src.assembly.operators import SaddleSystem

__all__ = ["export_matrix", "export_dof_map", "export_system"]

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def export_matrix(matrix: sp.spmatrix, path: PathLike, comment: str = "") -> Path:
    """Write a sparse matrix in Matrix Market coordinate format (1-based indices)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    scipy.io.mmwrite(str(path), sp.coo_matrix(matrix), comment=comment, field="real", precision=17)
    # mmwrite appends .mtx when the suffix is missing
    written = path if path.suffix == ".mtx" else path.with_name(path.name + ".mtx")
    logger.info(f"Wrote {matrix.shape[0]}x{matrix.shape[1]} matrix ({matrix.nnz} nonzeros) to {written}")
    return written


def export_dof_map(system: SaddleSystem, path: PathLike) -> pd.DataFrame:
    """
    Write the row layout of the monolithic matrix as CSV.

    Columns: ``row, kind, component, vertex, box, x, y[, z], eliminated``;
    ``kind`` is ``u`` or ``p`` and unused indices are -1.
    """
    mesh = system.mesh
    coords = mesh.parent.vertices
    vmap = system.velocity_dof_map()
    eliminated = system.eliminated if system.eliminated is not None else np.zeros(system.n_u, dtype=bool)
    velocity = {
        "row": np.arange(system.n_u),
        "kind": "u",
        "component": vmap[:, 0],
        "vertex": vmap[:, 1],
        "box": -1,
    }
    pressure = {
        "row": system.n_u + np.arange(system.n_p),
        "kind": "p",
        "component": -1,
        "vertex": system.pressure_dof_map(),
        "box": np.arange(system.n_p),
    }
    frames = []
    for cols, flags in ((velocity, eliminated), (pressure, np.zeros(system.n_p, dtype=bool))):
        frame = pd.DataFrame(cols)
        for k, axis in enumerate("xyz"[:mesh.dim]):
            frame[axis] = coords[frame["vertex"].to_numpy(), k]
        frame["eliminated"] = np.asarray(flags, dtype=int)
        frames.append(frame)
    table = pd.concat(frames, ignore_index=True)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(path, index=False)
    logger.info(f"Wrote DOF map with {len(table)} rows to {path}")
    return table


def export_system(system: SaddleSystem, output_dir: PathLike, prefix: str = "stokes") -> Dict[str, Path]:
    """Write every block, the monolithic matrix, the right-hand side and the DOF map."""
    output_dir = Path(output_dir)
    written = {}
    blocks = {"A": system.A, "Bt": system.Bt, "B": system.B, "C": system.C, "K": system.K}
    for name, block in blocks.items():
        written[name] = export_matrix(block, output_dir / f"{prefix}_{name}.mtx",
                                      comment=f"{name} block, nu={system.nu}")
    rhs_path = output_dir / f"{prefix}_rhs.csv"
    pd.DataFrame({"row": np.arange(system.n_u + system.n_p), "value": system.rhs}).to_csv(rhs_path, index=False)
    written["rhs"] = rhs_path
    written["dofs"] = output_dir / f"{prefix}_dofs.csv"
    export_dof_map(system, written["dofs"])
    return written
