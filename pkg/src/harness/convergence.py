"""
Manufactured-solution convergence studies.

Each level runs mesh -> assemble -> solve -> errors; the report fits
least-squares rates on the log-log values and persists CSV, JSON and
gnuplot-ready data.
"""
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from src.assembly.operators import build_system
from src.fields.quadrature import rule_for_degree
from src.harness.cases import ManufacturedCase, mesh_family
from src.mesh.core import BoxMesh
from src.solver.stokes import SimpleConfig, SolverError, StokesSolution, simple_iterate, solve_monolithic

__all__ = [
    "StudyError",
    "StudyReport",
    "compute_errors",
    "fit_rate",
    "run_convergence",
    "solve_case",
]

logger = logging.getLogger(__name__)

ERROR_COLUMNS = ("e_u_h1", "e_p_l2")
MIN_CONFIDENT_POINTS = 3
QUADRATURE_DEGREE = 8


class StudyError(Exception):
    """Raised when a refinement level fails; ``report`` holds the levels done so far."""

    def __init__(self, message: str, report: Optional["StudyReport"] = None):
        super().__init__(message)
        self.report = report


def fit_rate(points: Sequence[Tuple[float, float]]) -> float:
    """
    Least-squares slope of log(error) against log(h).

    Raises
    ------
    ValueError
        With fewer than two usable (positive) points
    """
    data = np.array([(h, e) for h, e in points if h > 0 and e > 0], dtype=float)
    if len(data) < 2:
        raise ValueError(f"Need at least two positive points to fit a rate, got {len(data)}")
    slope, _ = np.polyfit(np.log(data[:, 0]), np.log(data[:, 1]), 1)
    return float(slope)


def compute_errors(sol: StokesSolution, case: ManufacturedCase,
                   degree: int = QUADRATURE_DEGREE) -> Tuple[float, float]:
    """
    ``(|u_h - u|_H1, ||p_h - p||_L2)`` by cellwise quadrature.

    The discrete pressure is the nodal extension of the box values; both
    pressures are shifted to zero mean over the mesh before comparing.
    """
    primal = sol.mesh.parent
    if primal.dim != case.dim:
        raise ValueError(f"Case is {case.dim}D but the mesh is {primal.dim}D")
    bary, weights = rule_for_degree(primal.dim, degree)
    pts = np.einsum("qk,mkd->mqd", bary, primal.cell_points)
    m, nq, d = pts.shape
    flat = pts.reshape(-1, d)
    wq = primal.cell_measures[:, None] * weights[None, :]

    grad_exact = case.grad_u(flat).reshape(m, nq, d, d)
    grad_h = np.stack([
        np.einsum("mk,mkd->md", comp.values[primal.cells], primal.cell_gradients) for comp in sol.u
    ], axis=1)
    diff = grad_h[:, None, :, :] - grad_exact
    e_u = float(np.sqrt(np.sum(wq * np.einsum("mqlk,mqlk->mq", diff, diff))))

    p_h = np.einsum("qk,mk->mq", bary, sol.p.values[primal.cells])
    p_ex = case.p_exact(flat).reshape(m, nq)
    volume = float(wq.sum())
    p_h = p_h - np.sum(wq * p_h) / volume
    p_ex = p_ex - np.sum(wq * p_ex) / volume
    e_p = float(np.sqrt(np.sum(wq * (p_h - p_ex) ** 2)))
    return e_u, e_p


def solve_case(mesh: BoxMesh, case: ManufacturedCase, solver: Optional[Dict] = None,
               stabilized: bool = True) -> StokesSolution:
    """Assemble the case on one mesh and solve it with the configured method."""
    solver = dict(solver or {})
    method = solver.pop("method", "monolithic")
    system = build_system(mesh, case.nu, case.f, case.g, stabilized=stabilized)
    if method == "monolithic":
        return solve_monolithic(system, tol=solver.get("tol", 1e-10))
    if method == "simple":
        return simple_iterate(system, SimpleConfig.from_dict(solver))
    raise ValueError(f"Unknown solver method '{method}'")


@dataclass
class StudyReport:
    """Per-level errors of a convergence study with fitted rates."""
    case: str
    nu: float
    rows: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(
        columns=["h", *ERROR_COLUMNS, "n_boxes", "iterations"]))
    solver: Dict = field(default_factory=dict)
    status: str = "complete"
    meta: Dict = field(default_factory=dict)

    @property
    def low_confidence(self) -> bool:
        return len(self.rows) < MIN_CONFIDENT_POINTS

    @property
    def incomplete(self) -> bool:
        return self.status != "complete"

    @property
    def rates(self) -> Dict[str, Optional[float]]:
        out = {}
        for col in ERROR_COLUMNS:
            try:
                out[col] = fit_rate(list(zip(self.rows["h"], self.rows[col])))
            except ValueError:
                out[col] = None
        return out

    @property
    def build_id(self) -> str:
        payload = json.dumps({"case": self.case, "nu": self.nu, "solver": self.solver,
                              "meta": self.meta}, sort_keys=True, default=str)
        return hashlib.sha1(payload.encode()).hexdigest()[:12]

    def add_level(self, h: float, e_u: float, e_p: float, n_boxes: int, iterations: int) -> None:
        row = pd.DataFrame([{"h": h, "e_u_h1": e_u, "e_p_l2": e_p,
                             "n_boxes": n_boxes, "iterations": iterations}])
        self.rows = row if self.rows.empty else pd.concat([self.rows, row], ignore_index=True)
        self.rows = self.rows.sort_values("h", ascending=False, ignore_index=True)

    def level_rates(self) -> pd.DataFrame:
        """Rates between consecutive levels, NaN on the first row."""
        frame = self.rows.copy()
        log_h = np.log(frame["h"].astype(float))
        for col in ERROR_COLUMNS:
            frame[f"rate_{col}"] = np.log(frame[col].astype(float)).diff() / log_h.diff()
        return frame

    def to_dict(self) -> Dict:
        return {
            "case": self.case,
            "nu": self.nu,
            "solver": self.solver,
            "status": self.status,
            "low_confidence": self.low_confidence,
            "rates": self.rates,
            "build_id": self.build_id,
            "meta": self.meta,
            "levels": self.rows.to_dict(orient="records"),
        }

    def check(self, window: Tuple[float, float] = (0.85, 1.25),
              monotone: bool = True) -> List[str]:
        """Failed acceptance gates, empty when every gate passes."""
        failures = []
        if self.incomplete:
            failures.append(f"study {self.status}")
        for col, rate in self.rates.items():
            if rate is None or not window[0] <= rate <= window[1]:
                failures.append(f"{col} rate {rate} outside [{window[0]}, {window[1]}]")
        if monotone:
            for col in ERROR_COLUMNS:
                values = self.rows[col].to_numpy(dtype=float)
                if np.any(np.diff(values) >= 0):
                    failures.append(f"{col} is not decreasing under refinement")
        return failures

    def write(self, output_dir: Union[str, Path], prefix: str = "report") -> Dict[str, Path]:
        """Write ``<prefix>.csv``, ``<prefix>.json`` and the gnuplot file ``<prefix>.dat``."""
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        paths = {
            "csv": output_dir / f"{prefix}.csv",
            "json": output_dir / f"{prefix}.json",
            "dat": output_dir / f"{prefix}.dat",
        }
        self.level_rates().to_csv(paths["csv"], index=False)
        with open(paths["json"], "w") as f:
            json.dump(self.to_dict(), f, indent=2, default=float)
        with open(paths["dat"], "w") as f:
            f.write(f"# {self.case} nu={self.nu} status={self.status}\n")
            f.write("# h e_u_h1 e_p_l2\n")
            for row in self.rows.itertuples(index=False):
                f.write(f"{row.h:.10e} {row.e_u_h1:.10e} {row.e_p_l2:.10e}\n")
        logger.info(f"Wrote convergence report to {output_dir}")
        return paths


def run_convergence(case: ManufacturedCase, levels: Optional[Sequence[float]] = None,
                    cfg: Optional[Dict] = None,
                    meshes: Optional[Sequence[BoxMesh]] = None) -> StudyReport:
    """
    Convergence study over refinement levels.

    Parameters
    ----------
    case : ManufacturedCase
        Exact solution and data
    levels : sequence of float, optional
        Target mesh sizes; 2D meshes are generated on ``case.domain``
    cfg : dict, optional
        ``solver`` (method and its settings), ``jitter``, ``seed``,
        ``progress``, ``stabilized``
    meshes : sequence of BoxMesh, optional
        Ready-made duals, e.g. imported 3D families; replaces ``levels``

    Returns
    -------
    StudyReport
        Rows sorted by decreasing h; ``status`` is ``skipped`` for a 3D case
        without meshes

    Raises
    ------
    StudyError
        When a level fails; the partial report is attached and marked
        ``incomplete``
    """
    cfg = dict(cfg or {})
    solver = dict(cfg.get("solver") or {"method": "monolithic"})
    report = StudyReport(case=case.name, nu=case.nu, solver=solver,
                         meta={"jitter": cfg.get("jitter", 0.0), "seed": cfg.get("seed", 0)})

    if meshes is None:
        if case.dim != 2:
            logger.warning(f"No mesh family supplied for the {case.dim}D case; study skipped")
            report.status = "skipped"
            return report
        if not levels:
            raise ValueError("Either levels or meshes must be given")
        meshes = mesh_family(levels, case.domain, jitter=cfg.get("jitter", 0.0), seed=cfg.get("seed", 0))

    bar = tqdm(meshes, desc=f"convergence {case.name}", disable=not cfg.get("progress", False))
    for mesh in bar:
        h = mesh.parent.h
        try:
            sol = solve_case(mesh, case, solver, stabilized=cfg.get("stabilized", True))
            e_u, e_p = compute_errors(sol, case)
        except (SolverError, ValueError, np.linalg.LinAlgError) as e:
            report.status = "incomplete"
            logger.error(f"Level h={h:.5f} failed: {e}")
            raise StudyError(f"Convergence level h={h:.5f} failed: {e}", report)
        report.add_level(h, e_u, e_p, mesh.n_boxes, sol.iterations)
        logger.info(f"h={h:.5f}: |u - u_h|_H1 = {e_u:.4e}, ||p - p_h||_L2 = {e_p:.4e}")

    if report.low_confidence:
        logger.warning(f"Only {len(report.rows)} levels; fitted rates are low-confidence")
    return report
