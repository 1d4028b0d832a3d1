"""
Manufactured Stokes solutions and the mesh families they run on.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from src.mesh.core import BoxMesh, build_dual, triangulate_square

__all__ = [
    "ManufacturedCase",
    "case_2d",
    "case_3d",
    "rigid_motion_case",
    "get_case",
    "mesh_family",
]

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi
FOUR_PI = 4.0 * np.pi

VectorFn = Callable[[np.ndarray], np.ndarray]


@dataclass
class ManufacturedCase:
    """
    Exact Stokes pair with its data.

    Every callable takes an (N, d) array of points. ``u_exact`` and ``f``
    return (N, d), ``p_exact`` returns (N,) and ``grad_u`` returns (N, d, d)
    with ``grad_u[k, l, m] = d u_l / d x_m``.
    """
    name: str
    dim: int
    nu: float
    u_exact: VectorFn
    p_exact: VectorFn
    grad_u: VectorFn
    f: VectorFn
    domain: Tuple[Tuple[float, float], ...]
    laplacian_u: Optional[VectorFn] = None
    meta: dict = field(default_factory=dict)

    def g(self, points: np.ndarray) -> np.ndarray:
        """Dirichlet data, the trace of ``u_exact``."""
        return self.u_exact(points)

    @property
    def lower(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.domain], dtype=float)

    @property
    def upper(self) -> np.ndarray:
        return np.array([hi for _, hi in self.domain], dtype=float)

    def sample_points(self, n: int, seed: int = 0) -> np.ndarray:
        rng = np.random.default_rng(seed)
        return self.lower + (self.upper - self.lower) * rng.random((n, self.dim))

    def max_divergence(self, n: int = 10000, seed: int = 0) -> float:
        """Largest |div u_exact| over random points of the domain."""
        grad = self.grad_u(self.sample_points(n, seed))
        return float(np.abs(np.trace(grad, axis1=1, axis2=2)).max())


def _forcing(nu: float, laplacian_u: VectorFn, grad_p: VectorFn) -> VectorFn:
    def f(x: np.ndarray) -> np.ndarray:
        return -nu * laplacian_u(x) + grad_p(x)
    return f


def case_2d(nu: float = 1.0) -> ManufacturedCase:
    """Cellular vortex flow on [-1/4, 1/4]^2 with p = -(cos 4 pi x + cos 4 pi y) / 4."""

    def u(x):
        X, Y = TWO_PI * x[:, 0], TWO_PI * x[:, 1]
        return np.column_stack([-np.sin(Y) * np.cos(X), np.sin(X) * np.cos(Y)])

    def grad(x):
        X, Y = TWO_PI * x[:, 0], TWO_PI * x[:, 1]
        out = np.empty((len(x), 2, 2))
        out[:, 0, 0] = TWO_PI * np.sin(Y) * np.sin(X)
        out[:, 0, 1] = -TWO_PI * np.cos(Y) * np.cos(X)
        out[:, 1, 0] = TWO_PI * np.cos(X) * np.cos(Y)
        out[:, 1, 1] = -TWO_PI * np.sin(X) * np.sin(Y)
        return out

    def p(x):
        return -0.25 * (np.cos(FOUR_PI * x[:, 0]) + np.cos(FOUR_PI * x[:, 1]))

    def grad_p(x):
        return np.pi * np.column_stack([np.sin(FOUR_PI * x[:, 0]), np.sin(FOUR_PI * x[:, 1])])

    def lap(x):
        return -2.0 * TWO_PI ** 2 * u(x)

    return ManufacturedCase(
        name="vortex_2d", dim=2, nu=nu, u_exact=u, p_exact=p, grad_u=grad,
        f=_forcing(nu, lap, grad_p), domain=((-0.25, 0.25), (-0.25, 0.25)), laplacian_u=lap,
    )


def case_3d(nu: float = 1.0) -> ManufacturedCase:
    """Three-dimensional vortex flow on [-1/4, 1/4]^3 with p = -(sum cos 4 pi x_k) / 8."""

    def u(x):
        s, c = np.sin(TWO_PI * x), np.cos(TWO_PI * x)
        return np.column_stack([
            s[:, 1] * s[:, 2] * c[:, 0],
            s[:, 0] * s[:, 2] * c[:, 1],
            -2.0 * s[:, 0] * s[:, 1] * c[:, 2],
        ])

    def grad(x):
        s, c = np.sin(TWO_PI * x), np.cos(TWO_PI * x)
        sx, sy, sz = s.T
        cx, cy, cz = c.T
        out = np.empty((len(x), 3, 3))
        out[:, 0] = TWO_PI * np.column_stack([-sx * sy * sz, cx * cy * sz, cx * sy * cz])
        out[:, 1] = TWO_PI * np.column_stack([cx * cy * sz, -sx * sy * sz, sx * cy * cz])
        out[:, 2] = 2.0 * TWO_PI * np.column_stack([-cx * sy * cz, -sx * cy * cz, sx * sy * sz])
        return out

    def p(x):
        return -0.125 * np.cos(FOUR_PI * x).sum(axis=1)

    def grad_p(x):
        return 0.5 * np.pi * np.sin(FOUR_PI * x)

    def lap(x):
        return -3.0 * TWO_PI ** 2 * u(x)

    return ManufacturedCase(
        name="vortex_3d", dim=3, nu=nu, u_exact=u, p_exact=p, grad_u=grad,
        f=_forcing(nu, lap, grad_p), domain=((-0.25, 0.25),) * 3, laplacian_u=lap,
    )


def rigid_motion_case(dim: int = 2, nu: float = 1.0, pressure: float = 0.0,
                      domain: Optional[Sequence[Tuple[float, float]]] = None) -> ManufacturedCase:
    """
    Patch test: u = c + W x with W antisymmetric, p constant, f = 0.

    The Box Method reproduces this pair exactly on any orthogonal dual.
    """
    if dim not in (2, 3):
        raise ValueError(f"Unsupported dimension {dim}")
    if dim == 2:
        W = np.array([[0.0, -1.5], [1.5, 0.0]])
        c = np.array([0.3, -0.2])
    else:
        W = np.array([[0.0, -1.5, 0.5], [1.5, 0.0, -0.7], [-0.5, 0.7, 0.0]])
        c = np.array([0.3, -0.2, 0.1])

    def u(x):
        return c + x @ W.T

    def grad(x):
        return np.broadcast_to(W, (len(x), dim, dim)).copy()

    def p(x):
        return np.full(len(x), pressure)

    def zero(x):
        return np.zeros((len(x), dim))

    return ManufacturedCase(
        name=f"rigid_{dim}d", dim=dim, nu=nu, u_exact=u, p_exact=p, grad_u=grad, f=zero,
        domain=tuple(domain) if domain is not None else ((-0.25, 0.25),) * dim, laplacian_u=zero,
    )


_CASES = {
    "vortex_2d": case_2d,
    "vortex_3d": case_3d,
    "rigid_2d": lambda nu=1.0: rigid_motion_case(2, nu),
    "rigid_3d": lambda nu=1.0: rigid_motion_case(3, nu),
}


def get_case(name: str, nu: float = 1.0) -> ManufacturedCase:
    """Look up a case by name (``vortex_2d``, ``vortex_3d``, ``rigid_2d``, ``rigid_3d``)."""
    if name not in _CASES:
        raise ValueError(f"Unknown case '{name}', expected one of {sorted(_CASES)}")
    return _CASES[name](nu=nu)


def mesh_family(levels: Sequence[float], domain: Sequence[Tuple[float, float]] = ((-0.25, 0.25), (-0.25, 0.25)),
                jitter: float = 0.0, seed: int = 0) -> List[BoxMesh]:
    """Dual meshes of the square for each target h, coarsest first."""
    meshes = []
    for k, h in enumerate(sorted(levels, reverse=True)):
        primal = triangulate_square(domain, h, jitter=jitter, seed=seed + k)
        meshes.append(build_dual(primal))
        logger.debug(f"Level {k}: h={primal.h:.5f}, {meshes[-1].n_boxes} boxes")
    return meshes
