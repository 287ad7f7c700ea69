"""
Compiled kernel loops.

Lambda(z, t) = diag * I + zz * z z^T, with
    diag = K + Phi'(r)/r,   zz = (Phi'' - Phi'/r) / r^2,
    Phi(z, t) = erf(|z| / (2 sqrt t)) / (4 pi |z|).
Below |z| < small_arg * sqrt(t) the derivatives come from the Taylor
series of Phi in |z|^2.
"""

import math

import numpy as np
from numba import njit, prange

_FOUR_PI = 4.0 * math.pi
_SQRT_PI = math.sqrt(math.pi)
_SERIES_TERMS = 8


@njit(cache=True)
def lambda_coeffs(r2, t, small_arg):
    four_pi_t = _FOUR_PI * t
    heat = math.exp(-r2 / (4.0 * t)) / (four_pi_t * math.sqrt(four_pi_t))
    sqrt_t = math.sqrt(t)
    a = 0.5 / sqrt_t
    r = math.sqrt(r2)

    if r < small_arg * sqrt_t:
        # Phi = c * sum_n alpha_n r2^n, alpha_n = (-a^2)^n / (n! (2n + 1))
        c = a / (2.0 * math.pi * _SQRT_PI)
        a2 = a * a
        d1 = 0.0
        d2 = 0.0
        coef = 1.0
        for n in range(1, _SERIES_TERMS):
            coef *= -a2 / n
            alpha = coef / (2.0 * n + 1.0)
            d1 += n * alpha * r2 ** (n - 1)
            if n >= 2:
                d2 += n * (n - 1) * alpha * r2 ** (n - 2)
        return heat + 2.0 * c * d1, 4.0 * c * d2

    erf_ar = math.erf(a * r)
    derf = 2.0 * a / _SQRT_PI * math.exp(-a * a * r2)
    q = (derf * r - erf_ar) / (_FOUR_PI * r2 * r)
    zz = -2.0 * a * a * derf / (_FOUR_PI * r2) - 3.0 * q / r2
    return heat + q, zz


@njit(cache=True)
def lambda_coeffs_array(r2, t, small_arg):
    n = r2.shape[0]
    diag = np.empty(n)
    zz = np.empty(n)
    for i in range(n):
        d, c = lambda_coeffs(r2[i], t[i], small_arg)
        diag[i] = d
        zz[i] = c
    return diag, zz


@njit(parallel=True, cache=True)
def gamma_apply(xs, ys, fw, ts, tau, rho, small_arg):
    """
    out[i, k, :, c] = sum_j Lambda(x_i - tau t_k e1 - Q_k y_ij, t_k) Q_k fw[i, j, :, c]

    with Q_k = exp(-t_k Omega), a rotation about e1 by -rho t_k.
    Pass (-tau, -rho) for the tilde kernel.
    """
    nx = xs.shape[0]
    ny = ys.shape[1]
    nt = ts.shape[0]
    m = fw.shape[3]
    out = np.zeros((nx, nt, 3, m))

    for idx in prange(nx * nt):
        i = idx // nt
        k = idx - i * nt
        t = ts[k]
        cs = math.cos(rho * t)
        sn = math.sin(rho * t)
        x0 = xs[i, 0] - tau * t
        x1 = xs[i, 1]
        x2 = xs[i, 2]
        for j in range(ny):
            y1 = ys[i, j, 1]
            y2 = ys[i, j, 2]
            z0 = x0 - ys[i, j, 0]
            z1 = x1 - (cs * y1 + sn * y2)
            z2 = x2 - (-sn * y1 + cs * y2)
            diag, zz = lambda_coeffs(z0 * z0 + z1 * z1 + z2 * z2, t, small_arg)
            for c in range(m):
                f1 = fw[i, j, 1, c]
                f2 = fw[i, j, 2, c]
                v0 = fw[i, j, 0, c]
                v1 = cs * f1 + sn * f2
                v2 = -sn * f1 + cs * f2
                proj = zz * (z0 * v0 + z1 * v1 + z2 * v2)
                out[i, k, 0, c] += diag * v0 + proj * z0
                out[i, k, 1, c] += diag * v1 + proj * z1
                out[i, k, 2, c] += diag * v2 + proj * z2
    return out


@njit(cache=True)
def lambda_grad_coeffs(r2, t, small_arg):
    """
    Coefficients of Lambda and its z-gradient:

        d_k Lambda_ij = e z_k delta_ij + zz (delta_ik z_j + delta_jk z_i) + g3 z_i z_j z_k

    with e = zz - K / (2t). Returns (diag, zz, e, g3).
    """
    four_pi_t = _FOUR_PI * t
    heat = math.exp(-r2 / (4.0 * t)) / (four_pi_t * math.sqrt(four_pi_t))
    sqrt_t = math.sqrt(t)
    a = 0.5 / sqrt_t
    r = math.sqrt(r2)

    if r < small_arg * sqrt_t:
        c = a / (2.0 * math.pi * _SQRT_PI)
        a2 = a * a
        d1 = 0.0
        d2 = 0.0
        d3 = 0.0
        coef = 1.0
        for n in range(1, _SERIES_TERMS + 1):
            coef *= -a2 / n
            alpha = coef / (2.0 * n + 1.0)
            d1 += n * alpha * r2 ** (n - 1)
            if n >= 2:
                d2 += n * (n - 1) * alpha * r2 ** (n - 2)
            if n >= 3:
                d3 += n * (n - 1) * (n - 2) * alpha * r2 ** (n - 3)
        zz = 4.0 * c * d2
        return heat + 2.0 * c * d1, zz, zz - heat / (2.0 * t), 8.0 * c * d3

    erf_ar = math.erf(a * r)
    derf = 2.0 * a / _SQRT_PI * math.exp(-a * a * r2)
    q = (derf * r - erf_ar) / (_FOUR_PI * r2 * r)
    zz = -2.0 * a * a * derf / (_FOUR_PI * r2) - 3.0 * q / r2
    g3 = (4.0 * a ** 4 * derf / _FOUR_PI - 5.0 * zz) / r2
    return heat + q, zz, zz - heat / (2.0 * t), g3


@njit(cache=True)
def lambda_grad_coeffs_array(r2, t, small_arg):
    n = r2.shape[0]
    out = np.empty((n, 4))
    for i in range(n):
        d, c, e, g = lambda_grad_coeffs(r2[i], t[i], small_arg)
        out[i, 0] = d
        out[i, 1] = c
        out[i, 2] = e
        out[i, 3] = g
    return out


@njit(parallel=True, cache=True)
def gamma_apply_grad(xs, ys, fw, ts, tau, rho, small_arg):
    """
    gamma_apply together with the x-gradient:

        grad[i, k, a, b, c] = d/dx_b of out[i, k, a, c]

    The first m columns of fw carry the density; the gradient uses the
    same rotated density v = Q_k fw.
    """
    nx = xs.shape[0]
    ny = ys.shape[1]
    nt = ts.shape[0]
    m = fw.shape[3]
    out = np.zeros((nx, nt, 3, m))
    grad = np.zeros((nx, nt, 3, 3, m))

    for idx in prange(nx * nt):
        i = idx // nt
        k = idx - i * nt
        t = ts[k]
        cs = math.cos(rho * t)
        sn = math.sin(rho * t)
        x0 = xs[i, 0] - tau * t
        x1 = xs[i, 1]
        x2 = xs[i, 2]
        z = np.empty(3)
        v = np.empty(3)
        for j in range(ny):
            y1 = ys[i, j, 1]
            y2 = ys[i, j, 2]
            z[0] = x0 - ys[i, j, 0]
            z[1] = x1 - (cs * y1 + sn * y2)
            z[2] = x2 - (-sn * y1 + cs * y2)
            diag, zz, e, g3 = lambda_grad_coeffs(z[0] * z[0] + z[1] * z[1] + z[2] * z[2], t, small_arg)
            for c in range(m):
                f1 = fw[i, j, 1, c]
                f2 = fw[i, j, 2, c]
                v[0] = fw[i, j, 0, c]
                v[1] = cs * f1 + sn * f2
                v[2] = -sn * f1 + cs * f2
                zv = z[0] * v[0] + z[1] * v[1] + z[2] * v[2]
                proj = zz * zv
                for a in range(3):
                    out[i, k, a, c] += diag * v[a] + proj * z[a]
                    for b in range(3):
                        g = e * v[a] * z[b] + zz * z[a] * v[b] + g3 * zv * z[a] * z[b]
                        if a == b:
                            g += zz * zv
                        grad[i, k, a, b, c] += g
    return out, grad
