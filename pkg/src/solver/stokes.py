"""
Monolithic and SIMPLE solvers for the stabilized Stokes saddle-point system.

With full Dirichlet velocity data the pressure is fixed up to a constant. Both
solvers add one Lagrange multiplier enforcing ``sum_i |B_i| p_i = 0``; the
multiplier also absorbs the (small) incompatibility of the continuity data
left by the boundary closure of the discrete forms.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from src.assembly.operators import SaddleSystem
from src.fields.norms import BoxField, NodalField, box_triple_norm, extend_pressure

__all__ = [
    "SolverError",
    "StokesSolution",
    "SimpleConfig",
    "solve_monolithic",
    "simple_iterate",
    "fix_pressure_mean",
    "energy_defect",
    "pressure_oscillation",
]

logger = logging.getLogger(__name__)


class SolverError(Exception):
    """Raised when a solve breaks down; ``history`` holds the residuals so far."""

    def __init__(self, message: str, history: Optional[Sequence[float]] = None):
        super().__init__(message)
        self.history = list(history or [])


@dataclass
class StokesSolution:
    """Discrete velocity (nodal, all vertices) and pressure (one value per box)."""
    u: List[NodalField]
    p_box: BoxField
    residuals: List[float] = field(default_factory=list)
    iterations: int = 0
    method: str = "monolithic"
    multiplier: float = 0.0

    @property
    def mesh(self):
        return self.p_box.mesh

    @property
    def p(self) -> NodalField:
        """Nodal pressure, boundary vertices filled by linear extrapolation."""
        return extend_pressure(self.mesh, self.p_box.values)

    @property
    def velocity_vector(self) -> np.ndarray:
        return np.concatenate([c.values for c in self.u])

    @property
    def pressure_vector(self) -> np.ndarray:
        return self.p_box.values.copy()

    def residual_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "iteration": np.arange(1, len(self.residuals) + 1),
            "residual": self.residuals,
        })


@dataclass
class SimpleConfig:
    """
    SIMPLE parameters.

    ``error_tol`` bounds the estimated distance to the fixed point in the box
    norm (defaults to ``tol``); the estimate uses the observed contraction of
    the last ``contraction_window`` increments, capped at ``max_contraction``.

    Raises
    ------
    ValueError
        If a relaxation factor is outside (0, 1] or a tolerance is not positive
    """
    alpha_u: float = 0.7
    alpha_p: float = 0.3
    tol: float = 1e-8
    max_iter: int = 5000
    inner_tol: float = 1e-12
    inner_max_iter: int = 2000
    divergence_window: int = 50
    divergence_growth: float = 1e3
    error_tol: Optional[float] = None
    contraction_window: int = 10
    max_contraction: float = 0.9999

    def __post_init__(self):
        for name in ("alpha_u", "alpha_p"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {value}")
        if self.error_tol is None:
            self.error_tol = self.tol
        if self.tol <= 0 or self.inner_tol <= 0 or self.error_tol <= 0:
            raise ValueError("Tolerances must be positive")
        if not 0.0 < self.max_contraction < 1.0:
            raise ValueError(f"max_contraction must lie in (0, 1), got {self.max_contraction}")
        if self.max_iter < 1 or self.inner_max_iter < 1 or self.contraction_window < 1:
            raise ValueError("Iteration limits must be at least 1")

    @classmethod
    def from_dict(cls, config: Dict) -> "SimpleConfig":
        known = {k: v for k, v in config.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def fix_pressure_mean(p: Union[NodalField, BoxField]) -> Union[NodalField, BoxField]:
    """
    Shift a pressure so its box-weighted mean ``sum_i |B_i| p_i`` vanishes.

    Nodal fields are shifted at every vertex, so only the constant changes.
    """
    mesh = p.mesh
    volumes = mesh.volumes
    if isinstance(p, BoxField):
        box_values = p.values
    else:
        box_values = p.values[mesh.box_vertex]
    mean = float(np.dot(volumes, box_values) / volumes.sum())
    shifted = p.values - mean
    if isinstance(p, BoxField):
        return BoxField(shifted, mesh)
    return NodalField(shifted, mesh)


def _border(system: SaddleSystem, block: sp.spmatrix) -> sp.csr_matrix:
    """Append the mean-value constraint to a matrix whose trailing rows/cols are pressure."""
    n = block.shape[0]
    col = np.zeros(n)
    col[n - system.n_p:] = system.mesh.volumes
    col = sp.csr_matrix(col[:, None])
    return sp.bmat([[block, col], [col.T, None]], format="csc")


def _split(system: SaddleSystem, x: np.ndarray, residuals: List[float], iterations: int,
           method: str, multiplier: float) -> StokesSolution:
    mesh = system.mesh
    n = mesh.parent.n_vertices
    u = [NodalField(x[l * n:(l + 1) * n], mesh) for l in range(mesh.dim)]
    p = fix_pressure_mean(BoxField(x[system.n_u:system.n_u + system.n_p], mesh))
    return StokesSolution(u=u, p_box=p, residuals=residuals, iterations=iterations,
                          method=method, multiplier=multiplier)


def _norm(v: np.ndarray) -> float:
    return float(np.linalg.norm(v))


def solve_monolithic(system: SaddleSystem, tol: float = 1e-10, method: str = "direct",
                     refine_steps: int = 2) -> StokesSolution:
    """
    Solve the bordered monolithic system.

    Parameters
    ----------
    system : SaddleSystem
        Assembled and boundary-eliminated system
    tol : float, default 1e-10
        Bound on the relative residual of the bordered system
    method : {"direct", "iterative"}
        Sparse LU (with up to ``refine_steps`` refinement sweeps), or GMRES
        preconditioned by incomplete LU; direct falls back to iterative when
        the factorization runs out of memory

    Raises
    ------
    SolverError
        If the factorization is singular or the residual stays above ``tol``
    """
    if system.eliminated is None:
        logger.warning("Solving a system without eliminated boundary data")
    K = _border(system, system.K)
    b = np.concatenate([system.rhs, [0.0]])
    scale = _norm(b)
    if scale == 0.0:
        x = np.zeros(K.shape[0])
        return _split(system, x, [0.0], 1, "monolithic", 0.0)

    history: List[float] = []
    x = None
    if method == "direct":
        try:
            lu = spla.splu(K)
            x = lu.solve(b)
            history.append(_norm(K @ x - b) / scale)
            for _ in range(refine_steps):
                if history[-1] <= tol * 1e-2:
                    break
                x = x + lu.solve(b - K @ x)
                history.append(_norm(K @ x - b) / scale)
        except RuntimeError as e:
            raise SolverError(f"Monolithic factorization failed: {e}", history)
        except MemoryError:
            logger.warning("Sparse LU ran out of memory, falling back to GMRES")
            method = "iterative"
    if method == "iterative":
        ilu = spla.spilu(K, drop_tol=1e-6, fill_factor=20)
        M = spla.LinearOperator(K.shape, ilu.solve)
        x, info = _gmres(K, b, M=M, tol=tol * 1e-1, maxiter=2000)
        history.append(_norm(K @ x - b) / scale)
        if info < 0:
            raise SolverError(f"GMRES breakdown (info={info})", history)
    elif method != "direct":
        raise ValueError(f"Unknown method '{method}'")

    if not np.all(np.isfinite(x)) or history[-1] > tol:
        raise SolverError(f"Monolithic residual {history[-1]:.3e} above tolerance {tol:.1e}", history)
    logger.info(f"Monolithic solve: relative residual {history[-1]:.3e}")
    return _split(system, x[:-1], history, len(history), "monolithic", float(x[-1]))


def _krylov(fn, A, b, tol: float, **kwargs):
    # scipy renamed tol to rtol
    try:
        return fn(A, b, rtol=tol, atol=0.0, **kwargs)
    except TypeError:
        return fn(A, b, tol=tol, atol=0.0, **kwargs)


def _cg(A, b, x0, M, tol: float, maxiter: int):
    return _krylov(spla.cg, A, b, tol, x0=x0, M=M, maxiter=maxiter)


def _gmres(A, b, M, tol: float, maxiter: int):
    return _krylov(spla.gmres, A, b, tol, M=M, maxiter=maxiter, restart=200)


def _box_distance(system: SaddleSystem, du: np.ndarray, dp: np.ndarray) -> float:
    """|||(du, dp)|||_box with the pressure extended to the boundary vertices."""
    mesh = system.mesh
    n = mesh.parent.n_vertices
    v = [NodalField(du[l * n:(l + 1) * n], mesh) for l in range(mesh.dim)]
    return box_triple_norm(v, extend_pressure(mesh, dp))


def _error_estimate(increments: List[float], cfg: SimpleConfig) -> float:
    recent = increments[-cfg.contraction_window - 1:]
    ratios = [b / a for a, b in zip(recent[:-1], recent[1:]) if a > 0.0]
    rho = min(max(ratios, default=cfg.max_contraction), cfg.max_contraction)
    return increments[-1] * rho / (1.0 - rho)


def simple_iterate(system: SaddleSystem, cfg: Optional[SimpleConfig] = None,
                   u0: Optional[np.ndarray] = None, p0: Optional[np.ndarray] = None) -> StokesSolution:
    """
    SIMPLE fixed-point iteration with under-relaxation.

    Each sweep: (1) momentum solve ``(A + cD) u* = F - Bt p + cD u`` by
    Jacobi-preconditioned CG, ``c = (1 - alpha_u) / alpha_u``;
    (2) ``u~ = D_a^-1 (H u* + F + cD u)`` with ``H = D - A`` and
    ``D_a = D / alpha_u``; (3) pressure equation
    ``(C - B D_a^-1 Bt) p' = G - B u~`` bordered by the mean constraint;
    (4) ``u <- u~ - D_a^-1 Bt p'`` and ``p <- p + alpha_p (p' - p)``,
    so only the stored pressure is relaxed.

    The stopping residual is the larger of the relative momentum residual and
    the continuity residual scaled by ``||G - B u~||`` of the first sweep. The
    loop stops once that residual is below ``tol`` and the distance to the
    fixed point, estimated as ``d_k rho / (1 - rho)`` from the box-norm
    increment ``d_k`` and the largest recent increment ratio ``rho``, is below
    ``error_tol``.

    Raises
    ------
    SolverError
        On divergence (growth by ``divergence_growth`` within
        ``divergence_window`` sweeps), non-finite iterates or when
        ``max_iter`` is exhausted
    """
    cfg = cfg or SimpleConfig()
    A, Bt, B, C, F, G = system.A, system.Bt, system.B, system.C, system.F, system.G
    n_u, n_p = system.n_u, system.n_p
    diag = A.diagonal()
    if np.any(diag <= 0):
        raise SolverError("Momentum diagonal must be positive")
    c = (1.0 - cfg.alpha_u) / cfg.alpha_u
    d_alpha = diag / cfg.alpha_u

    momentum = (A + sp.diags(c * diag)).tocsr()
    inv_diag = 1.0 / momentum.diagonal()
    jacobi = spla.LinearOperator((n_u, n_u), matvec=lambda r: inv_diag * np.ravel(r))
    pressure = (C - B @ sp.diags(1.0 / d_alpha) @ Bt).tocsr()
    pressure_lu = spla.splu(_border(system, pressure))

    u = np.zeros(n_u) if u0 is None else np.array(u0, dtype=float)
    if system.eliminated is not None:
        u[system.eliminated] = F[system.eliminated]
    p = np.zeros(n_p) if p0 is None else np.array(p0, dtype=float)
    f_ref = _norm(F) or 1.0
    c_ref = None
    history: List[float] = []
    increments: List[float] = []
    multiplier = 0.0

    for it in range(1, cfg.max_iter + 1):
        u_prev, p_prev = u, p
        rhs = F - Bt @ p + c * diag * u
        u_star, info = _cg(momentum, rhs, u, jacobi, cfg.inner_tol, cfg.inner_max_iter)
        if info < 0:
            raise SolverError(f"Momentum CG breakdown at sweep {it}", history)
        h_u = diag * u_star - A @ u_star
        u_tilde = (h_u + F + c * diag * u) / d_alpha
        source = G - B @ u_tilde
        if c_ref is None:
            c_ref = _norm(source) or 1.0
        sol = pressure_lu.solve(np.concatenate([source, [0.0]]))
        p_new, multiplier = sol[:n_p], float(sol[n_p])
        u = u_tilde - (Bt @ p_new) / d_alpha
        p = p + cfg.alpha_p * (p_new - p)

        r_mom = _norm(F - A @ u - Bt @ p) / f_ref
        r_cont = _norm(G - B @ u - C @ p - multiplier * system.mesh.volumes) / c_ref
        r = max(r_mom, r_cont)
        history.append(r)

        if not np.isfinite(r):
            raise SolverError(f"SIMPLE produced non-finite iterates at sweep {it}", history)
        increments.append(_box_distance(system, u - u_prev, p - p_prev))
        estimate = _error_estimate(increments, cfg)
        logger.debug(f"SIMPLE sweep {it}: momentum {r_mom:.3e}, continuity {r_cont:.3e}, "
                     f"error estimate {estimate:.3e}")
        if r <= cfg.tol and estimate <= cfg.error_tol:
            logger.info(f"SIMPLE converged in {it} sweeps (residual {r:.3e}, error estimate {estimate:.3e})")
            x = np.concatenate([u, p])
            return _split(system, x, history, it, "simple", multiplier)
        if it > cfg.divergence_window:
            recent_min = min(history[-cfg.divergence_window - 1:-1])
            if r > cfg.divergence_growth * recent_min:
                raise SolverError(f"SIMPLE diverged at sweep {it} (residual {r:.3e})", history)

    raise SolverError(f"SIMPLE did not reach {cfg.tol:.1e} in {cfg.max_iter} sweeps "
                      f"(residual {history[-1]:.3e})", history)


def energy_defect(system: SaddleSystem, sol: StokesSolution) -> float:
    """
    Relative defect of the discrete energy balance.

    Multiplying the momentum rows by u and the continuity rows by p gives
    ``u.Au + p.Cp + p.(B + Bt^T)u = u.F + p.G`` for a mean-zero pressure; the
    ``B + Bt^T`` correction lives only on boxes touching the boundary.
    """
    u = sol.velocity_vector
    p = sol.pressure_vector
    closure = float(p @ ((system.B + system.Bt.T) @ u))
    lhs = float(u @ (system.A @ u)) + float(p @ (system.C @ p)) + closure
    rhs = float(u @ system.F) + float(p @ system.G)
    return abs(lhs - rhs) / max(abs(rhs), 1e-300)


def pressure_oscillation(sol: StokesSolution) -> float:
    """
    Checkerboard indicator: mean squared face jump of the box pressure
    relative to its mean square. Smooth pressures give O(h^2) values.
    """
    mesh = sol.mesh
    inner = mesh.inner_faces
    p = sol.p_box.values
    jumps = p[mesh.face_box[inner, 1]] - p[mesh.face_box[inner, 0]]
    scale = float(np.dot(mesh.volumes, p ** 2) / mesh.volumes.sum())
    if scale == 0.0:
        return 0.0
    return float(np.mean(jumps ** 2) / scale)
