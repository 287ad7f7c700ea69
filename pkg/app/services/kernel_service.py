"""
Kernel Service
Fundamental-solution machinery of the rotating Oseen system.

Features:
- heat kernel K, Oseen heat tensor Lambda (closed form + series branch)
- rotation exp(t Omega), time-dependent kernels Gamma and its tilde variant
- Z = int_0^inf Gamma dt by panelled Gauss-Kronrod quadrature with a
  closed-form algebraic tail
- potentials N, S, P and the volume potential R(f)
- manufactured exterior reference fields (u_ref, pi_ref)
"""

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numba
import numpy as np

from app.core.exceptions import InvalidInputError, QuadratureError, UnsupportedEvaluationError
from app.core.quadrature import ball_rule, kronrod15, polar_ball_rule
from app.schemas.kernel import KernelConfig, SourceDensity
from app.schemas.params import FlowParams
from app.services import kernel_jit
from app_logging.logger import get_logger
from config.settings import settings

logger = get_logger(__name__)

numba.set_num_threads(max(1, min(settings.MAX_THREADS, numba.config.NUMBA_NUM_THREADS)))

E1 = np.array([1.0, 0.0, 0.0])


# ============================================================================
# CLOSED-FORM KERNELS
# ============================================================================

def heat_kernel(z, t) -> np.ndarray:
    """K(z, t) = (4 pi t)^(-3/2) exp(-|z|^2 / (4t)); z (3,) or (n, 3)."""
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise InvalidInputError("heat kernel needs t > 0")
    z = np.asarray(z, dtype=float)
    r2 = np.sum(z * z, axis=-1)
    return (4.0 * np.pi * t) ** -1.5 * np.exp(-r2 / (4.0 * t))


def oseen_tensor(z, t, small_arg: float = 0.1) -> np.ndarray:
    """Lambda(z, t) for z (3,) or (n, 3); returns (3, 3) or (n, 3, 3)."""
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    t_arr = np.broadcast_to(np.asarray(t, dtype=float), (z2.shape[0],)).copy()
    if np.any(t_arr <= 0):
        raise InvalidInputError("Oseen tensor needs t > 0")

    r2 = np.ascontiguousarray(np.sum(z2 * z2, axis=1))
    diag, zz = kernel_jit.lambda_coeffs_array(r2, t_arr, small_arg)
    lam = diag[:, None, None] * np.eye(3)[None] + zz[:, None, None] * np.einsum("ni,nj->nij", z2, z2)
    return lam[0] if single else lam


def oseen_tensor_gradient(z, t, small_arg: float = 0.1) -> np.ndarray:
    """d_k Lambda_ij(z, t) as [..., i, j, k]; z (3,) or (n, 3)."""
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    t_arr = np.broadcast_to(np.asarray(t, dtype=float), (z2.shape[0],)).copy()
    if np.any(t_arr <= 0):
        raise InvalidInputError("Oseen tensor needs t > 0")

    r2 = np.ascontiguousarray(np.sum(z2 * z2, axis=1))
    coeffs = kernel_jit.lambda_grad_coeffs_array(r2, t_arr, small_arg)
    zz, e, g3 = coeffs[:, 1], coeffs[:, 2], coeffs[:, 3]
    eye = np.eye(3)
    grad = (
        e[:, None, None, None] * np.einsum("ij,nk->nijk", eye, z2)
        + zz[:, None, None, None] * (np.einsum("ik,nj->nijk", eye, z2) + np.einsum("jk,ni->nijk", eye, z2))
        + g3[:, None, None, None] * np.einsum("ni,nj,nk->nijk", z2, z2, z2)
    )
    return grad[0] if single else grad


def omega_matrix(rho: float) -> np.ndarray:
    """Omega with Omega z = rho e1 x z."""
    return rho * np.array([[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])


def rotation(t: float, rho: float) -> np.ndarray:
    """exp(t Omega): rotation about e1 by the angle rho * t."""
    c, s = math.cos(rho * t), math.sin(rho * t)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def gamma_kernel(x, y, t: float, params: FlowParams, tilde: bool = False, small_arg: float = 0.1) -> np.ndarray:
    """
    Gamma(x, y, t) = Lambda(x - tau t e1 - exp(-t Omega) y, t) exp(-t Omega).

    With tilde=True: Lambda(x + tau t e1 - exp(t Omega) y, t) exp(t Omega).
    """
    if t <= 0:
        raise InvalidInputError("Gamma needs t > 0")
    sign = -1.0 if tilde else 1.0
    q = rotation(-sign * t, params.rho)
    z = np.asarray(x, dtype=float) - sign * params.tau * t * E1 - q @ np.asarray(y, dtype=float)
    return oseen_tensor(z, t, small_arg) @ q


# ============================================================================
# TIME QUADRATURE
# ============================================================================

@dataclass(frozen=True)
class TimeRule:
    """Panelled Kronrod rule in t; every panel holds 15 consecutive nodes."""
    nodes: np.ndarray
    kronrod: np.ndarray
    gauss: np.ndarray
    n_panels: int
    cutoff: float


def _panel_nodes(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    x15, wk15, wg15 = kronrod15()
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    nodes = mid[:, None] + half[:, None] * x15[None, :]
    return nodes, half[:, None] * wk15[None, :], half[:, None] * wg15[None, :]


def _subdivide(breaks: np.ndarray, pieces: int) -> np.ndarray:
    if pieces == 1:
        return breaks
    frac = np.arange(pieces) / pieces
    a, b = breaks[:-1], breaks[1:]
    inner = (a[:, None] + (b - a)[:, None] * frac[None, :]).ravel()
    return np.append(inner, breaks[-1])


def build_time_rule(
        d_min: float,
        extent: float,
        tau: float,
        rho: float,
        config: KernelConfig,
        level: int = 0,
) -> TimeRule:
    """
    Panels for int_0^inf dt.

    Below the split t = s^2 with s-panels halving towards 0 until they are
    well below the smallest source-target distance. Above the split,
    t-panels of length min(sqrt(t), pi / (2|rho|)) up to the cut-off.
    ``level`` halves every panel and doubles the cut-off.
    """
    pieces = 2 ** level
    s_split = math.sqrt(config.time_split)

    n_geo = int(np.clip(math.ceil(math.log2(16.0 * s_split / max(d_min, 1e-12))), 2, 60))
    s_breaks = np.concatenate([[0.0], s_split * 2.0 ** -np.arange(n_geo, -1, -1, dtype=float)])
    s_breaks = _subdivide(s_breaks, pieces)
    s_nodes, s_wk, s_wg = _panel_nodes(s_breaks[:-1], s_breaks[1:])
    jac = 2.0 * s_nodes
    near_t, near_wk, near_wg = s_nodes ** 2, s_wk * jac, s_wg * jac

    abs_tau = abs(tau)
    cutoff = max(
        2.0 * config.time_split,
        4.0 * config.gauss_cutoff / abs_tau ** 2,
        config.tail_factor * extent / abs_tau,
    ) * pieces
    rot_cap = math.pi / (2.0 * abs(rho))

    breaks = [config.time_split]
    t = config.time_split
    while t < cutoff:
        h = min(math.sqrt(t), rot_cap) / pieces
        t = min(t + h, cutoff)
        breaks.append(t)
        if len(breaks) > config.max_panels:
            raise QuadratureError(
                "time panel budget exhausted",
                achieved=float("inf"),
                tolerance=config.time_rtol,
                cutoff=cutoff,
                max_panels=config.max_panels,
            )
    far_breaks = np.asarray(breaks)
    far_t, far_wk, far_wg = _panel_nodes(far_breaks[:-1], far_breaks[1:])

    nodes = np.concatenate([near_t.ravel(), far_t.ravel()])
    return TimeRule(
        nodes=nodes,
        kronrod=np.concatenate([near_wk.ravel(), far_wk.ravel()]),
        gauss=np.concatenate([near_wg.ravel(), far_wg.ravel()]),
        n_panels=nodes.size // 15,
        cutoff=float(cutoff),
    )


def _tail_correction(
        xs: np.ndarray,
        ys: np.ndarray,
        fw: np.ndarray,
        cutoff: float,
        tau: float,
        rho: float,
        extent: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Closed-form int_T^inf Gamma dt applied to fw, through order T^-3.

    Past the cut-off Lambda is the pure harmonic part (3 zz^T - I)/(4 pi |z|^3)
    with |z| ~ |tau| t; the mean part, its first correction and the rotating
    part are integrated exactly. Returns (nx, 3, m) and a size estimate of
    the neglected terms per point.
    """
    abs_tau, sgn = abs(tau), math.copysign(1.0, tau)
    lead = 1.0 / (4.0 * math.pi * abs_tau ** 3 * cutoff ** 2)
    second = 1.0 / (4.0 * math.pi * abs_tau ** 4 * cutoff ** 3)
    rotating = 1.0 / (4.0 * math.pi * abs_tau ** 3 * rho ** 2 * cutoff ** 3)

    f0 = fw[:, :, 0, :]
    f_sum = fw.sum(axis=1)
    out = np.zeros_like(f_sum)

    out[:, 0, :] += lead * f_sum[:, 0, :]

    dx1 = xs[:, None, 0, None] - ys[:, :, 0, None]
    y_dot_f = ys[:, :, 1, None] * fw[:, :, 1, :] + ys[:, :, 2, None] * fw[:, :, 2, :]
    out[:, 0, :] += second * sgn * np.sum(2.0 * dx1 * f0 + y_dot_f, axis=1)
    out[:, 1, :] -= second * sgn * xs[:, 1, None] * f_sum[:, 0, :]
    out[:, 2, :] -= second * sgn * xs[:, 2, None] * f_sum[:, 0, :]

    c, s = math.cos(rho * cutoff), math.sin(rho * cutoff)
    q1 = c * f_sum[:, 1, :] + s * f_sum[:, 2, :]
    q2 = -s * f_sum[:, 1, :] + c * f_sum[:, 2, :]
    out[:, 1, :] -= rotating * rho * q2
    out[:, 2, :] += rotating * rho * q1

    f_abs = np.abs(fw).sum(axis=(1, 2)).max(axis=-1)
    ratio = 2.0 * (extent / (abs_tau * cutoff)) ** 2 + 2.0 / (rho * cutoff) ** 2
    return out, lead * f_abs * ratio


def _tail_gradient(fw: np.ndarray, cutoff: float, tau: float, rho: float, extent: float):
    """x-gradient of the closed-form tail, (nx, 3, 3, m), and its size estimate."""
    abs_tau, sgn = abs(tau), math.copysign(1.0, tau)
    second = sgn / (4.0 * math.pi * abs_tau ** 4 * cutoff ** 3)
    f0 = fw[:, :, 0, :].sum(axis=1)
    grad = np.zeros((fw.shape[0], 3, 3, fw.shape[-1]))
    grad[:, 0, 0, :] = 2.0 * second * f0
    grad[:, 1, 1, :] = -second * f0
    grad[:, 2, 2, :] = -second * f0

    f_abs = np.abs(fw).sum(axis=(1, 2)).max(axis=-1)
    ratio = extent / (abs_tau * cutoff) + 2.0 / (rho * cutoff) ** 2
    return grad, abs(second) * f_abs * ratio


def _scaled_panel_error(values: np.ndarray, rule: TimeRule) -> np.ndarray:
    """QUADPACK-style error per point, summed over panels (nx,)."""
    nx = values.shape[0]
    per_panel = values.reshape(nx, rule.n_panels, 15, *values.shape[2:])
    wk = rule.kronrod.reshape(rule.n_panels, 15)
    wg = rule.gauss.reshape(rule.n_panels, 15)
    k_sum = np.einsum("pq,ipq...->ip...", wk, per_panel)
    g_sum = np.einsum("pq,ipq...->ip...", wg, per_panel)
    resabs = np.einsum("pq,ipq...->ip...", np.abs(wk), np.abs(per_panel))
    err = np.abs(k_sum - g_sum)
    with np.errstate(divide="ignore", invalid="ignore"):
        scaled = np.where(
            resabs > 0.0,
            resabs * np.minimum(1.0, (200.0 * err / np.where(resabs > 0.0, resabs, 1.0)) ** 1.5),
            err,
        )
    return scaled.sum(axis=1).reshape(nx, -1).max(axis=1)


# ============================================================================
# KERNEL SERVICE
# ============================================================================

class KernelService:
    """
    Time-integrated kernels for one flow configuration.

    Stateless apart from its parameters; safe to share between threads.
    """

    def __init__(self, params: FlowParams, config: Optional[KernelConfig] = None):
        self.params = params
        self.config = config or KernelConfig()

    # ------------------------------------------------------------------
    # time integration
    # ------------------------------------------------------------------

    def time_integrate(
            self,
            xs: np.ndarray,
            ys: np.ndarray,
            fw: np.ndarray,
            tilde: bool = False,
            gradient: bool = False,
    ):
        """
        Sum_j int_0^inf Gamma(x_i, y_ij, t) fw_ij dt for every target.

        xs (nx, 3), ys (nx, ny, 3), fw (nx, ny, 3, m).
        Returns values (nx, 3, m) and error estimates (nx,). With
        ``gradient`` the x-gradient (nx, 3, 3, m) is integrated on the same
        rule and returned third; both must meet the tolerance.
        """
        cfg = self.config
        tau, rho = (-self.params.tau, -self.params.rho) if tilde else (self.params.tau, self.params.rho)
        xs = np.ascontiguousarray(xs, dtype=float)
        ys = np.ascontiguousarray(ys, dtype=float)
        fw = np.ascontiguousarray(fw, dtype=float)

        d_min = float(np.min(np.linalg.norm(xs[:, None, :] - ys, axis=-1)))
        if d_min == 0.0:
            raise InvalidInputError("Z is not evaluated at x = y")
        extent = float(np.max(np.linalg.norm(xs, axis=1)) + np.max(np.linalg.norm(ys, axis=-1)))

        err = np.full(xs.shape[0], np.inf)
        for level in range(cfg.max_refinements + 1):
            rule = build_time_rule(d_min, extent, tau, rho, cfg, level)
            if gradient:
                samples, grad_samples = kernel_jit.gamma_apply_grad(xs, ys, fw, rule.nodes, tau, rho, cfg.small_arg)
            else:
                samples = kernel_jit.gamma_apply(xs, ys, fw, rule.nodes, tau, rho, cfg.small_arg)
            values = np.einsum("k,ik...->i...", rule.kronrod, samples)
            tail, tail_err = _tail_correction(xs, ys, fw, rule.cutoff, tau, rho, extent)
            values = values + tail
            err = _scaled_panel_error(samples, rule) + tail_err

            scale = np.abs(values).reshape(values.shape[0], -1).max(axis=1)
            converged = np.all(err <= cfg.time_atol + cfg.time_rtol * scale)
            if gradient:
                grads = np.einsum("k,ik...->i...", rule.kronrod, grad_samples)
                grad_tail, grad_tail_err = _tail_gradient(fw, rule.cutoff, tau, rho, extent)
                grads = grads + grad_tail
                grad_err = _scaled_panel_error(grad_samples, rule) + grad_tail_err
                grad_scale = np.abs(grads).reshape(grads.shape[0], -1).max(axis=1)
                converged = converged and np.all(grad_err <= cfg.time_atol + cfg.time_rtol * grad_scale)
                if converged:
                    return values, np.maximum(err, grad_err), grads
            elif converged:
                return values, err
            logger.debug("time_quadrature_refine", level=level, worst=float(np.max(err / np.maximum(scale, 1e-300))))

        worst = float(np.max(err))
        logger.error("time_quadrature_failed", achieved=worst, rtol=cfg.time_rtol)
        raise QuadratureError(
            "time quadrature tolerance unreachable within panel budget",
            achieved=worst,
            tolerance=cfg.time_rtol,
        )

    def fundamental_tensor(self, xs, y, tilde: bool = False):
        """
        Z(x, y) (or Z~ with tilde=True) for targets xs (3,) or (n, 3).

        Returns the (3, 3) / (n, 3, 3) matrices and their error estimates.
        """
        xs = np.asarray(xs, dtype=float)
        single = xs.ndim == 1
        xs2 = np.atleast_2d(xs)
        ys = np.broadcast_to(np.asarray(y, dtype=float), (xs2.shape[0], 1, 3))
        fw = np.broadcast_to(np.eye(3), (xs2.shape[0], 1, 3, 3))
        values, err = self.time_integrate(xs2, ys, fw, tilde=tilde)
        if single:
            return values[0], float(err[0])
        return values, err

    # ------------------------------------------------------------------
    # volume rules
    # ------------------------------------------------------------------

    def _classify(self, source: SourceDensity, xs: np.ndarray) -> np.ndarray:
        """0 = inside support, 1 = near exterior, 2 = far exterior."""
        dist = np.linalg.norm(xs - source.center_array, axis=1) / source.support_radius
        return np.where(dist < 1.0, 0, np.where(dist < self.config.far_distance_factor, 1, 2))

    def _product_rule(self, source: SourceDensity, far: bool):
        order = self.config.volume_order_far if far else self.config.volume_order
        pts, w = ball_rule(source.center_array, source.support_radius, order)
        keep = source.profile(pts) > 0.0
        return pts[keep], w[keep]

    def _weighted_density(self, source: SourceDensity, pts: np.ndarray, w: np.ndarray) -> np.ndarray:
        return source.evaluate(pts) * w[:, None]

    def _apply_shared(self, xs, pts, fw_flat, tilde=False, gradient=False):
        """R(f) (and its gradient) for targets sharing one volume rule, in batches ordered by |x|."""
        n = xs.shape[0]
        values = np.zeros((n, 3))
        grads = np.zeros((n, 3, 3))
        errors = np.zeros(n)
        order = np.argsort(np.linalg.norm(xs, axis=1), kind="stable")
        batch = settings.KERNEL_BATCH_SIZE
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            ys = np.broadcast_to(pts, (idx.size, *pts.shape))
            fw = np.broadcast_to(fw_flat[:, :, None], (idx.size, *fw_flat.shape, 1))
            result = self.time_integrate(xs[idx], ys, fw, tilde=tilde, gradient=gradient)
            values[idx] = result[0][:, :, 0]
            errors[idx] = result[1]
            if gradient:
                grads[idx] = result[2][..., 0]
        if gradient:
            return values, grads, errors
        return values, errors

    def apply_volume_gradient(self, source: SourceDensity, xs):
        """
        R(f)(x) and grad R(f)(x)[n, i, j] = d_j R(f)_i at exterior points.

        The gradient is integrated from the analytic z-gradient of Lambda
        on the same time and volume rules as the values.
        """
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        if np.any(source.contains(xs)):
            raise UnsupportedEvaluationError("gradient evaluation is exterior only")
        values = np.zeros((xs.shape[0], 3))
        grads = np.zeros((xs.shape[0], 3, 3))
        errors = np.zeros(xs.shape[0])
        kind = self._classify(source, xs)
        for far in (False, True):
            idx = np.flatnonzero(kind == (2 if far else 1))
            if idx.size:
                pts, w = self._product_rule(source, far=far)
                values[idx], grads[idx], errors[idx] = self._apply_shared(
                    xs[idx], pts, self._weighted_density(source, pts, w), gradient=True
                )
        return values, grads, errors

    def apply_volume(self, source: SourceDensity, xs, single_batch: bool = False):
        """
        R(f)(x) = int Z(x, y) f(y) dy at points xs (n, 3).

        Targets inside the support use a polar rule centred at the target.
        With ``single_batch`` every target is exterior and shares the near
        product rule and one time rule (finite-difference stencils).
        """
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        values = np.zeros((xs.shape[0], 3))
        errors = np.zeros(xs.shape[0])

        if single_batch:
            if np.any(source.contains(xs)):
                raise UnsupportedEvaluationError("single-batch evaluation is exterior only")
            pts, w = self._product_rule(source, far=False)
            fw = self._weighted_density(source, pts, w)
            ys = np.broadcast_to(pts, (xs.shape[0], *pts.shape))
            vals, err = self.time_integrate(xs, ys, np.broadcast_to(fw[:, :, None], (xs.shape[0], *fw.shape, 1)))
            return vals[:, :, 0], err

        kind = self._classify(source, xs)
        for far in (False, True):
            idx = np.flatnonzero(kind == (2 if far else 1))
            if idx.size:
                pts, w = self._product_rule(source, far=far)
                values[idx], errors[idx] = self._apply_shared(xs[idx], pts, self._weighted_density(source, pts, w))

        for i in np.flatnonzero(kind == 0):
            pts, w = polar_ball_rule(
                xs[i],
                source.center_array,
                source.support_radius,
                self.config.polar_radial_order,
                self.config.polar_angular_order,
                2 * self.config.polar_angular_order,
            )
            fw = self._weighted_density(source, pts, w)
            vals, err = self.time_integrate(xs[i:i + 1], pts[None], fw[None, :, :, None])
            values[i], errors[i] = vals[0, :, 0], err[0]

        return values, errors

    # ------------------------------------------------------------------
    # potentials
    # ------------------------------------------------------------------

    def _exterior_rule(self, source: SourceDensity, xs: np.ndarray, order: Optional[int]):
        if np.any(source.contains(xs)):
            raise UnsupportedEvaluationError(
                "potential evaluation inside the support is not supported",
                {"points": int(np.sum(source.contains(xs)))},
            )
        pts, w = ball_rule(source.center_array, source.support_radius, order or self.config.volume_order)
        return pts, w

    def _scalar_density(self, source: SourceDensity, pts: np.ndarray, component: Optional[int]) -> np.ndarray:
        if component is None:
            return source.profile(pts)
        return source.evaluate(pts)[:, component]

    def potential_n(self, source: SourceDensity, xs, component: Optional[int] = None, order: Optional[int] = None):
        """N(h)(x) = -int h(y) / (4 pi |x - y|) dy."""
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        pts, w = self._exterior_rule(source, xs, order)
        h = self._scalar_density(source, pts, component) * w
        dist = np.linalg.norm(xs[:, None, :] - pts[None, :, :], axis=-1)
        return -(h[None, :] / (4.0 * np.pi * dist)).sum(axis=1)

    def potential_s(self, source: SourceDensity, xs, component: Optional[int] = None, order: Optional[int] = None):
        """S(h)(x) = int (x - y) h(y) / (4 pi |x - y|^3) dy, shape (n, 3)."""
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        pts, w = self._exterior_rule(source, xs, order)
        h = self._scalar_density(source, pts, component) * w
        diff = xs[:, None, :] - pts[None, :, :]
        dist3 = np.linalg.norm(diff, axis=-1) ** 3
        return np.einsum("nyk,ny->nk", diff, h[None, :] / (4.0 * np.pi * dist3))

    def potential_p(self, source: SourceDensity, xs, order: Optional[int] = None):
        """P(f)(x) = int (x - y) . f(y) / (4 pi |x - y|^3) dy."""
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        pts, w = self._exterior_rule(source, xs, order)
        fw = source.evaluate(pts) * w[:, None]
        diff = xs[:, None, :] - pts[None, :, :]
        dist3 = np.linalg.norm(diff, axis=-1) ** 3
        return np.einsum("nyk,yk->n", diff / (4.0 * np.pi * dist3[:, :, None]), fw)

    def reference_solution(self, source: SourceDensity) -> "ReferenceSolution":
        return ReferenceSolution(self, source)


# ============================================================================
# REFERENCE SOLUTION
# ============================================================================

def _stencil(order: int):
    """Central first-derivative offsets and weights (in units of h)."""
    if order == 2:
        return np.array([-1.0, 1.0]), np.array([-0.5, 0.5])
    if order == 4:
        return np.array([-2.0, -1.0, 1.0, 2.0]), np.array([1.0, -8.0, 8.0, -1.0]) / 12.0
    raise InvalidInputError("finite-difference order must be 2 or 4", {"order": order})


class ReferenceSolution:
    """
    Exterior field pair u_ref = R(f), pi_ref = P(f) as evaluation closures.

    The pair solves L u + grad pi = f, div u = 0 in the whole space.
    """

    def __init__(self, kernels: KernelService, source: SourceDensity):
        self.kernels = kernels
        self.source = source
        self.params = kernels.params

    def velocity(self, xs, single_batch: bool = False):
        return self.kernels.apply_volume(self.source, xs, single_batch=single_batch)

    def pressure(self, xs, order: Optional[int] = None):
        return self.kernels.potential_p(self.source, xs, order=order)

    def pressure_with_error(self, xs):
        """pi_ref and the change against the rule of order + 4 as its error estimate."""
        order = self.kernels.config.volume_order
        value = self.pressure(xs, order=order)
        finer = self.pressure(xs, order=order + 4)
        return finer, np.abs(finer - value)

    def velocity_and_gradient(self, xs) -> Tuple[np.ndarray, np.ndarray]:
        """u_ref and grad u_ref[n, i, j] = d u_i / d x_j, both from the kernel."""
        values, grads, _ = self.kernels.apply_volume_gradient(self.source, xs)
        return values, grads

    def velocity_gradient(self, xs, h: float = 0.05, order: int = 2, single_batch: bool = False) -> np.ndarray:
        """grad[n, i, j] = d u_i / d x_j by central differences."""
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        offsets, weights = _stencil(order)
        shifted = xs[:, None, None, :] + h * offsets[None, None, :, None] * np.eye(3)[None, :, None, :]
        vals, _ = self.velocity(shifted.reshape(-1, 3), single_batch=single_batch)
        vals = vals.reshape(xs.shape[0], 3, offsets.size, 3)
        return np.einsum("njsi,s->nij", vals, weights) / h

    def pde_residual(self, xs, h: float = 0.05):
        """
        L u_ref + grad pi_ref - f at exterior points by fourth-order differences.

        Returns (residual (n, 3), scale (n,)) where scale is the largest of
        the individual operator terms.
        """
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        n = xs.shape[0]
        offsets = np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
        d1 = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0
        d2 = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / 12.0
        shifted = xs[:, None, None, :] + h * offsets[None, None, :, None] * np.eye(3)[None, :, None, :]
        flat = shifted.reshape(-1, 3)
        u, _ = self.velocity(flat, single_batch=True)
        p = self.pressure(flat, order=self.kernels.config.volume_order)
        u = u.reshape(n, 3, offsets.size, 3)
        p = p.reshape(n, 3, offsets.size)

        grad_u = np.einsum("njsi,s->nij", u, d1) / h
        lap_u = np.einsum("njsi,s->ni", u, d2) / h ** 2
        grad_p = np.einsum("njs,s->nj", p, d1) / h
        u0 = u[:, 0, 2, :]

        tau, rho = self.params.tau, self.params.rho
        rot_x = rho * np.column_stack([np.zeros(n), -xs[:, 2], xs[:, 1]])
        drift = tau * grad_u[:, :, 0]
        transport = -np.einsum("nj,nij->ni", rot_x, grad_u)
        coriolis = rho * np.column_stack([np.zeros(n), -u0[:, 2], u0[:, 1]])
        forcing = self.source.evaluate(xs)

        residual = -lap_u + drift + transport + coriolis + grad_p - forcing
        terms = np.stack([lap_u, drift, transport, coriolis, grad_p], axis=0)
        scale = np.linalg.norm(terms, axis=-1).max(axis=0)
        return residual, scale

    def divergence(self, xs, h: float = 0.05):
        """div u_ref and the gradient scale at exterior points (fourth order)."""
        grad = self.velocity_gradient(xs, h=h, order=4, single_batch=True)
        return np.trace(grad, axis1=1, axis2=2), np.linalg.norm(grad, axis=(1, 2))
