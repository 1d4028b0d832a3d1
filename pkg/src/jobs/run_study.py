"""
Run mesh, solve, spectra and convergence studies from a YAML config.

    python -m src.jobs.run_study convergence --config configs/convergence_2d.yml --assert
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd
import yaml

# Add src to Python path
sys.path.append(str(Path(__file__).parent.parent.parent))

from src.assembly.export import export_system
from src.assembly.operators import AssemblyError, build_system
from src.fields.norms import field_frame, interpolate
from src.harness.cases import get_case, mesh_family
from src.harness.convergence import StudyError, compute_errors, fit_rate, run_convergence
from src.mesh.core import BoxMesh, MeshError, quality_report
from src.mesh.io import read_mesh, write_mesh
from src.solver.stokes import (SimpleConfig, SolverError, energy_defect, pressure_oscillation,
                               simple_iterate, solve_monolithic)
from src.spectral.studies import (SpectralError, coercivity_study, consistency_study, fitted_slope,
                                  infsup_study, norm_constant_study, study_frame)
from src.utils.config_loader import (STUDY_KINDS, ConfigLoaderError, load_config, merge_defaults,
                                     validate_study_config)

logger = logging.getLogger(__name__)


def _meshes(config: Dict) -> List[BoxMesh]:
    """Imported mesh files when ``meshes`` is set, generated square duals otherwise."""
    if config.get("meshes"):
        return [read_mesh(path) for path in config["meshes"]]
    domain = [tuple(side) for side in config["domain"]]
    return mesh_family(config["levels"], domain, jitter=config["jitter"], seed=config["seed"])


def _write_config(config: Dict, output_dir: Path) -> None:
    output_dir.mkdir(parents=True, exist_ok=True)
    with open(output_dir / "config.yml", "w") as f:
        yaml.safe_dump(config, f, sort_keys=True)


def _write_dat(frame: pd.DataFrame, path: Path, columns: Sequence[str]) -> None:
    """Whitespace-separated columns with a commented header, for gnuplot."""
    with open(path, "w") as f:
        f.write("# " + " ".join(columns) + "\n")
        for row in frame[list(columns)].itertuples(index=False):
            f.write(" ".join(f"{float(v):.10e}" for v in row) + "\n")


def run_mesh(config: Dict, output_dir: Path) -> List[str]:
    """Generate (or import) the mesh family, write quality diagnostics and mesh files."""
    failures = []
    rows = []
    for k, mesh in enumerate(_meshes(config)):
        report = quality_report(mesh)
        rows.append({"level": k, **report.to_dict()})
        write_mesh(mesh, output_dir / f"mesh_{k}.rcbm")
        if not report.valid:
            failures.append(f"mesh level {k} failed the quality check")
    pd.DataFrame(rows).to_csv(output_dir / "mesh_quality.csv", index=False)
    logger.info(f"Wrote {len(rows)} mesh levels to {output_dir}")
    return failures


def run_solve(config: Dict, output_dir: Path) -> List[str]:
    """Single solve on the first level: fields, residual history and diagnostics."""
    case = get_case(config["case"], config["nu"])
    mesh = _meshes({**config, "levels": config["levels"][:1]})[0]
    system = build_system(mesh, case.nu, case.f, case.g, stabilized=config.get("stabilized", True))
    if config.get("export_matrices", False):
        export_system(system, output_dir)

    solver = dict(config["solver"])
    if solver.get("method") == "simple":
        sol = simple_iterate(system, SimpleConfig.from_dict(solver))
    else:
        sol = solve_monolithic(system, tol=solver.get("tol", 1e-10))

    exact = interpolate(case.u_exact, mesh)
    fields = {f"u_{axis}": comp for axis, comp in zip("xyz", sol.u)}
    fields["p"] = sol.p
    fields.update({f"u_{axis}_exact": comp for axis, comp in zip("xyz", exact)})
    fields["p_exact"] = interpolate(case.p_exact, mesh)
    field_frame(fields).to_csv(output_dir / "fields.csv", index=False)
    sol.residual_frame().to_csv(output_dir / "residuals.csv", index=False)

    e_u, e_p = compute_errors(sol, case)
    summary = {
        "case": case.name,
        "h": mesh.parent.h,
        "method": sol.method,
        "iterations": sol.iterations,
        "final_residual": sol.residuals[-1] if sol.residuals else None,
        "e_u_h1": e_u,
        "e_p_l2": e_p,
        "energy_defect": energy_defect(system, sol),
        "pressure_oscillation": pressure_oscillation(sol),
    }
    with open(output_dir / "solve.json", "w") as f:
        json.dump(summary, f, indent=2, default=float)
    logger.info(f"Solve summary: {summary}")

    failures = []
    limit = config["tolerances"].get("energy_defect", 1e-8)
    if summary["energy_defect"] > limit:
        failures.append(f"energy defect {summary['energy_defect']:.3e} above {limit:.1e}")
    return failures


def _relative_spread(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


def run_spectra(config: Dict, output_dir: Path) -> List[str]:
    """Eigenvalue, norm-constant and consistency studies over the mesh family."""
    meshes = _meshes(config)
    tolerances = config["tolerances"]
    progress = config["progress"]
    dense_limit = config.get("dense_limit", 2000)
    failures = []

    for study in config["studies"]:
        if study == "coercivity":
            rows = coercivity_study(meshes, config["nu"], dense_limit=dense_limit, progress=progress)
            lo, hi = tolerances["coercivity_slope"]
            slope = fitted_slope(rows)
            if not lo <= slope <= hi:
                failures.append(f"coercivity slope {slope:.2f} outside [{lo}, {hi}]")
            columns = ["h", "value", "rate"]
        elif study in ("infsup", "infsup_unstabilized"):
            rows = infsup_study(meshes, config["nu"], stabilized=(study == "infsup"),
                                dense_limit=dense_limit, progress=progress)
            if study == "infsup":
                lo, hi = tolerances["infsup_window"]
                values = [r.value for r in rows]
                if min(values) < lo or max(values) > hi:
                    failures.append(f"inf-sup values {values} outside [{lo}, {hi}]")
                if min(values) < tolerances["infsup_decay"] * values[0]:
                    failures.append("inf-sup constant decays under refinement")
            columns = ["h", "value", "rate"]
        elif study == "norms":
            rows = norm_constant_study(meshes, dense_limit=dense_limit, progress=progress)
            columns = ["h", "lumped_l2_star", "star_h1", "h1_star", "l2_star", "star_inverse"]
            if len(rows) >= 2:
                for col in columns[1:]:
                    spread = _relative_spread(getattr(rows[-1], col), getattr(rows[-2], col))
                    if spread > tolerances.get("norm_spread", 0.2):
                        failures.append(f"norm constant {col} varies by {spread:.1%} on the finest levels")
        elif study == "consistency":
            rows = consistency_study(meshes, config["nu"], samples=config.get("samples", 20),
                                     seed=config["seed"], progress=progress)
            columns = ["h", "stabilization_ratio", "gradient_ratio"]
            if len(rows) >= 2:
                slope = fit_rate([(r.h, r.stabilization_ratio) for r in rows])
                if slope < tolerances.get("consistency_slope", 1.3):
                    failures.append(f"consistency slope {slope:.2f} below {tolerances.get('consistency_slope', 1.3)}")
        else:
            raise ConfigLoaderError(f"Unknown spectral study '{study}'")

        frame = study_frame(rows)
        frame.to_csv(output_dir / f"{study}.csv", index=False)
        _write_dat(frame.fillna(0.0), output_dir / f"{study}.dat", columns)
        logger.info(f"{study}:\n{frame.to_string(index=False)}")
    return failures


def run_convergence_study(config: Dict, output_dir: Path) -> List[str]:
    case = get_case(config["case"], config["nu"])
    meshes = [read_mesh(p) for p in config["meshes"]] if config.get("meshes") else None
    cfg = {k: config[k] for k in ("solver", "jitter", "seed", "progress") if k in config}
    try:
        report = run_convergence(case, config["levels"], cfg, meshes=meshes)
    except StudyError as e:
        if e.report is not None:
            e.report.write(output_dir)
        raise
    report.write(output_dir)
    logger.info(f"Rates: {report.rates}")
    if report.status == "skipped":
        logger.info("Convergence study skipped; no gates evaluated")
        return []
    window = tuple(config["tolerances"]["rate_window"])
    return report.check(window, monotone=case.dim == 2)


COMMANDS = {
    "mesh": run_mesh,
    "solve": run_solve,
    "spectra": run_spectra,
    "convergence": run_convergence_study,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(description='Rhie-Chow Box Method studies for the Stokes problem')
    parser.add_argument('command', choices=STUDY_KINDS,
                        help='Study to run')
    parser.add_argument('--config', default=None,
                        help='Path to config file (defaults are used for missing keys)')
    parser.add_argument('--output-dir', default=None,
                        help='Directory for reports (overrides output_dir in the config)')
    parser.add_argument('--assert', dest='assert_gates', action='store_true',
                        help='Exit nonzero when an acceptance gate fails')
    parser.add_argument('--verbose', action='store_true',
                        help='Enable verbose logging')
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    try:
        raw = load_config(args.config) if args.config else {}
        config = validate_study_config(merge_defaults(raw), args.command)
        output_dir = Path(args.output_dir or config["output_dir"])
        if args.output_dir:
            config["output_dir"] = str(output_dir)
        _write_config(config, output_dir)

        failures = COMMANDS[args.command](config, output_dir)
    except (ConfigLoaderError, MeshError, AssemblyError, SolverError, SpectralError, StudyError) as e:
        logger.error(f"{args.command} failed: {e}")
        return 2

    for failure in failures:
        logger.warning(f"Acceptance gate failed: {failure}")
    if failures and args.assert_gates:
        logger.error(f"{len(failures)} acceptance gate(s) failed")
        return 1
    logger.info(f"{args.command} completed successfully")
    return 0


if __name__ == '__main__':
    sys.exit(main())
