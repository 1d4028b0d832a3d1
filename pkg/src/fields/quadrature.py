"""
Collapsed Gauss rules on simplices.

Points are built from Gauss-Jacobi nodes (scipy.special) through the Duffy
map, so a rule with ``n`` points per direction integrates polynomials of
degree ``2n - 1`` exactly on triangles and tetrahedra.
"""
import math
from functools import lru_cache
from typing import Callable, Tuple

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

__all__ = ["simplex_rule", "rule_for_degree", "integrate_simplices"]


def _unit_jacobi(n: int, alpha: int) -> Tuple[np.ndarray, np.ndarray]:
    """Nodes/weights on [0, 1] for the weight (1 - t)^alpha."""
    if alpha == 0:
        x, w = roots_legendre(n)
    else:
        x, w = roots_jacobi(n, alpha, 0)
    return 0.5 * (1.0 + x), w / 2.0 ** (alpha + 1)


@lru_cache(maxsize=None)
def simplex_rule(dim: int, n: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Barycentric points and weights of a collapsed rule on the unit simplex.

    Weights sum to one, so ``integral = |measure| * sum(w * f(points))``.
    """
    if dim not in (2, 3) or n < 1:
        raise ValueError(f"No rule for dim={dim}, n={n}")
    s, ws = _unit_jacobi(n, 0)
    t, wt = _unit_jacobi(n, 1)
    if dim == 2:
        S, T = np.meshgrid(s, t, indexing="ij")
        W = np.outer(ws, wt)
        x = S * (1.0 - T)
        y = T
        ref = np.column_stack([x.ravel(), y.ravel()])
    else:
        u, wu = _unit_jacobi(n, 2)
        S, T, U = np.meshgrid(s, t, u, indexing="ij")
        W = ws[:, None, None] * wt[None, :, None] * wu[None, None, :]
        x = S * (1.0 - T) * (1.0 - U)
        y = T * (1.0 - U)
        z = U
        ref = np.column_stack([x.ravel(), y.ravel(), z.ravel()])
    weights = W.ravel() * math.factorial(dim)
    bary = np.column_stack([1.0 - ref.sum(axis=1), ref])
    bary.setflags(write=False)
    weights.setflags(write=False)
    return bary, weights


def rule_for_degree(dim: int, degree: int) -> Tuple[np.ndarray, np.ndarray]:
    return simplex_rule(dim, max(1, int(math.ceil((degree + 1) / 2))))


def integrate_simplices(fn: Callable[[np.ndarray], np.ndarray], simplices: np.ndarray,
                        measures: np.ndarray, n: int = 4) -> np.ndarray:
    """
    Integrate ``fn`` over stacked simplices.

    Parameters
    ----------
    fn : callable
        Maps an (N, d) array of points to (N,) or (N, k) values
    simplices : np.ndarray
        (m, d+1, d) vertex coordinates
    measures : np.ndarray
        (m,) signed measures; the sign is carried into the result
    n : int, default 4
        Points per direction

    Returns
    -------
    np.ndarray
        (m,) or (m, k) integrals
    """
    m, k, d = simplices.shape
    bary, weights = simplex_rule(d, n)
    points = np.einsum("qk,mkd->mqd", bary, simplices)
    values = np.asarray(fn(points.reshape(-1, d)), dtype=float)
    values = values.reshape((m, len(weights)) + values.shape[1:])
    return measures.reshape((m,) + (1,) * (values.ndim - 2)) * np.einsum("q,mq...->m...", weights, values)
