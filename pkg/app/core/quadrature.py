"""
Quadrature Rules
Shared rules for lines, panels, spheres, balls, triangles and tetrahedra.

All rules are built from scipy.special Gauss-Legendre / Gauss-Jacobi roots
and cached per order; callers get read-only numpy arrays.
"""

from functools import lru_cache
from typing import Tuple

import numpy as np
from scipy import special

from app.core.exceptions import InvalidInputError


# ============================================================================
# ONE-DIMENSIONAL RULES
# ============================================================================

@lru_cache(maxsize=64)
def gauss_legendre(n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Nodes and weights on [-1, 1]."""
    if n < 1:
        raise InvalidInputError("quadrature order must be >= 1", {"order": n})
    x, w = special.roots_legendre(n)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def gauss_on(a: float, b: float, n: int) -> Tuple[np.ndarray, np.ndarray]:
    x, w = gauss_legendre(n)
    half = 0.5 * (b - a)
    return 0.5 * (a + b) + half * x, half * w


# Gauss-Kronrod 7/15 pair on [-1, 1], the xgk/wgk/wg tables of QUADPACK's
# qk15 (Piessens, de Doncker-Kapenga, Ueberhuber and Kahaner, 1983) to 33
# digits. Abscissae run from the right end towards the centre; the 7-point
# Gauss rule uses every second abscissa. tests/test_weights.py checks them
# against numpy's Gauss-Legendre rule and degree-22 exactness.
_XGK = np.array([
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
])
_WGK = np.array([
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
])
_WG = np.array([
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
])


@lru_cache(maxsize=1)
def kronrod15() -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    15 nodes on [-1, 1] with Kronrod weights and embedded Gauss weights.

    The Gauss weight vector is zero at the eight Kronrod-only nodes.
    """
    nodes = np.concatenate([-_XGK[:7], [0.0], _XGK[6::-1]])
    wk = np.concatenate([_WGK[:7], [_WGK[7]], _WGK[6::-1]])
    wg_half = np.zeros(8)
    wg_half[1::2] = _WG
    wg = np.concatenate([wg_half[:7], [wg_half[7]], wg_half[6::-1]])
    for arr in (nodes, wk, wg):
        arr.setflags(write=False)
    return nodes, wk, wg


# ============================================================================
# SPHERE AND BALL RULES
# ============================================================================

@lru_cache(maxsize=32)
def unit_sphere_rule(n_theta: int, n_phi: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Gauss-Legendre in cos(theta) times trapezoid in azimuth.

    The polar axis is e1, so integrands that are axisymmetric about the
    flow direction are integrated exactly in azimuth. Weights sum to 4*pi.
    """
    if n_theta < 2 or n_phi < 1:
        raise InvalidInputError(
            "sphere quadrature order must be >= 2", {"n_theta": n_theta, "n_phi": n_phi}
        )
    mu, w_mu = gauss_legendre(n_theta)
    phi = 2.0 * np.pi * np.arange(n_phi) / n_phi
    sin_t = np.sqrt(1.0 - mu ** 2)
    dirs = np.stack(
        [
            np.repeat(mu, n_phi),
            np.outer(sin_t, np.cos(phi)).ravel(),
            np.outer(sin_t, np.sin(phi)).ravel(),
        ],
        axis=1,
    )
    weights = np.repeat(w_mu, n_phi) * (2.0 * np.pi / n_phi)
    dirs.setflags(write=False)
    weights.setflags(write=False)
    return dirs, weights


def ball_rule(center: np.ndarray, radius: float, order: int) -> Tuple[np.ndarray, np.ndarray]:
    """Tensor rule on a ball: Gauss in r and cos(theta), trapezoid in azimuth."""
    r, w_r = gauss_on(0.0, radius, order)
    dirs, w_dir = unit_sphere_rule(order, order)
    pts = center[None, None, :] + r[:, None, None] * dirs[None, :, :]
    weights = (w_r * r ** 2)[:, None] * w_dir[None, :]
    return pts.reshape(-1, 3), weights.ravel()


def polar_ball_rule(
        x: np.ndarray,
        center: np.ndarray,
        radius: float,
        n_r: int,
        n_theta: int,
        n_phi: int,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Rule on a ball centred at an interior target point ``x``.

    Points lie on rays x + r*omega up to the ball boundary; the r**2
    Jacobian removes a 1/|x - y| singularity of the integrand.
    """
    offset = np.asarray(x, dtype=float) - center
    if offset @ offset >= radius ** 2:
        raise InvalidInputError("polar rule needs a target inside the ball")
    dirs, w_dir = unit_sphere_rule(n_theta, n_phi)
    b = dirs @ offset
    reach = -b + np.sqrt(b ** 2 - (offset @ offset - radius ** 2))
    t, w_t = gauss_legendre(n_r)
    frac = 0.5 * (t + 1.0)
    r = reach[:, None] * frac[None, :]
    pts = x[None, None, :] + r[:, :, None] * dirs[:, None, :]
    weights = w_dir[:, None] * (0.5 * w_t)[None, :] * reach[:, None] * r ** 2
    return pts.reshape(-1, 3), weights.ravel()


# ============================================================================
# SIMPLEX RULES (collapsed coordinates)
# ============================================================================

def _jacobi_unit(n: int, alpha: float) -> Tuple[np.ndarray, np.ndarray]:
    """Nodes/weights on [0, 1] for the weight (1 - u)**alpha."""
    x, w = special.roots_jacobi(n, alpha, 0.0)
    return 0.5 * (x + 1.0), w / 2.0 ** (alpha + 1.0)


@lru_cache(maxsize=8)
def tetrahedron_rule(n: int = 3) -> Tuple[np.ndarray, np.ndarray]:
    """
    Conical product rule on the reference tetrahedron.

    Returns barycentric coordinates (nq, 4) and weights summing to 1/6.
    n points per direction integrate polynomials of degree 2n - 1 exactly.
    """
    u, wu = _jacobi_unit(n, 2.0)
    v, wv = _jacobi_unit(n, 1.0)
    w, ww = _jacobi_unit(n, 0.0)
    U, V, W = np.meshgrid(u, v, w, indexing="ij")
    xi1 = U
    xi2 = (1.0 - U) * V
    xi3 = (1.0 - U) * (1.0 - V) * W
    weights = (wu[:, None, None] * wv[None, :, None] * ww[None, None, :]).ravel()
    xi = np.stack([xi1.ravel(), xi2.ravel(), xi3.ravel()], axis=1)
    bary = np.column_stack([1.0 - xi.sum(axis=1), xi])
    bary.setflags(write=False)
    weights.setflags(write=False)
    return bary, weights


@lru_cache(maxsize=8)
def triangle_rule(n: int = 3) -> Tuple[np.ndarray, np.ndarray]:
    """Collapsed rule on the reference triangle; weights sum to 1/2."""
    u, wu = _jacobi_unit(n, 1.0)
    v, wv = _jacobi_unit(n, 0.0)
    U, V = np.meshgrid(u, v, indexing="ij")
    xi1 = U.ravel()
    xi2 = ((1.0 - U) * V).ravel()
    weights = (wu[:, None] * wv[None, :]).ravel()
    bary = np.column_stack([1.0 - xi1 - xi2, xi1, xi2])
    bary.setflags(write=False)
    weights.setflags(write=False)
    return bary, weights
