"""
Wake Weight Service
Wake weight, decay envelopes, sphere integrals of the weight and power-law fits.

All functions are pure and thread-safe.
"""

from typing import Optional, Sequence, Tuple

import numpy as np

from app.core.exceptions import InvalidInputError, QuadratureError
from app.core.quadrature import unit_sphere_rule
from app.schemas.params import DecayEnvelope
from app.schemas.study import DecayFit
from app_logging.logger import get_logger

logger = get_logger(__name__)


# ============================================================================
# WAKE WEIGHT AND ENVELOPES
# ============================================================================

def wake_weight(y) -> np.ndarray:
    """s(y) = 1 + |y| - y1 for a point (3,) or points (n, 3)."""
    y = np.asarray(y, dtype=float)
    return 1.0 + np.linalg.norm(y, axis=-1) - y[..., 0]


def envelope_eval(env: DecayEnvelope, y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    norm = np.linalg.norm(y, axis=-1)
    if np.any(norm == 0.0):
        raise InvalidInputError("decay envelopes are undefined at y = 0")

    value = env.amplitude * norm ** env.norm_power * wake_weight(y) ** env.wake_power
    if env.log == "l_ab":
        value = value * np.maximum(1.0, np.log(norm))
    elif env.log == "sigma":
        value = value * np.log1p(norm)
    return value


def envelope_dominates(env: DecayEnvelope, ys, values, slack: float = 1.0) -> bool:
    """True when every sampled magnitude stays below slack * envelope."""
    bound = envelope_eval(env, ys)
    return bool(np.all(np.abs(np.asarray(values)) <= slack * bound))


# ============================================================================
# SPHERE INTEGRALS
# ============================================================================

def _sphere_sum(radius: float, b_exp: float, n_theta: int, n_phi: int) -> float:
    dirs, weights = unit_sphere_rule(n_theta, n_phi)
    s = wake_weight(radius * dirs)
    return float(radius ** 2 * np.sum(weights * s ** (-b_exp)))


def sphere_weight_integral_with_error(
        radius: float,
        b_exp: float,
        n_theta: int = 64,
        n_phi: int = 128,
        rtol: float = 1e-4,
) -> Tuple[float, float]:
    """
    Integral of s(x)**(-B) over the sphere |x| = R with an error estimate.

    The estimate is the change against the rule of twice the polar order;
    the finer value is returned.
    """
    if radius <= 0:
        raise InvalidInputError("sphere radius must be positive", {"radius": radius})
    if n_theta < 2:
        raise InvalidInputError("quadrature order must be >= 2", {"n_theta": n_theta})

    coarse = _sphere_sum(radius, b_exp, n_theta, n_phi)
    value = _sphere_sum(radius, b_exp, 2 * n_theta, n_phi)
    error = abs(value - coarse)
    if error > rtol * abs(value):
        logger.warning("sphere_quadrature_unconverged", radius=radius, b_exp=b_exp, error=error)
        raise QuadratureError(
            "sphere quadrature did not converge",
            achieved=error / abs(value),
            tolerance=rtol,
            radius=radius,
            b_exp=b_exp,
        )
    return value, error


def sphere_weight_integral(radius: float, b_exp: float, quad: Tuple[int, int] = (64, 128)) -> float:
    value, _ = sphere_weight_integral_with_error(radius, b_exp, quad[0], quad[1])
    return value


# ============================================================================
# POWER-LAW FITS
# ============================================================================

def fit_power_law(
        radii: Sequence[float],
        values: Sequence[float],
        quantity: str,
        sampling: str,
        envelope_ratio_spread: Optional[float] = None,
) -> DecayFit:
    """Ordinary least squares on (log R, log value)."""
    r = np.asarray(radii, dtype=float)
    v = np.abs(np.asarray(values, dtype=float))
    if r.size < 4:
        raise InvalidInputError("a power-law fit needs at least 4 samples", {"samples": int(r.size)})
    if np.ptp(r) == 0.0:
        raise InvalidInputError("degenerate fit: all radii are equal")
    if np.any(v <= 0.0) or not np.all(np.isfinite(v)):
        raise InvalidInputError("power-law fit needs positive finite values", {"quantity": quantity})

    log_r, log_v = np.log(r), np.log(v)
    design = np.column_stack([log_r, np.ones_like(log_r)])
    (slope, intercept), *_ = np.linalg.lstsq(design, log_v, rcond=None)
    residual = log_v - (slope * log_r + intercept)

    return DecayFit(
        quantity=quantity,
        sampling=sampling,
        exponent=float(slope),
        constant=float(np.exp(intercept)),
        radii=[float(x) for x in r],
        values=[float(x) for x in v],
        residual_rms=float(np.sqrt(np.mean(residual ** 2))),
        envelope_ratio_spread=envelope_ratio_spread,
    )


def fa_scaling_fit(b_exp: float, radii: Sequence[float], quad: Tuple[int, int] = (64, 128)) -> DecayFit:
    """
    Fit of the sphere integral of s**(-B) against R.

    For B = 1 the values are divided by ln(1 + R) before fitting.
    """
    r = np.asarray(sorted(radii), dtype=float)
    if r.size < 4:
        raise InvalidInputError("fa_scaling_fit needs at least 4 radii")
    if np.ptp(r) == 0.0:
        raise InvalidInputError("degenerate fit: all radii are equal")
    if np.log10(r[-1] / r[0]) < 0.9:
        raise InvalidInputError("radii must span about a decade", {"ratio": float(r[-1] / r[0])})

    values = np.array([sphere_weight_integral(float(R), b_exp, quad) for R in r])
    if b_exp == 1.0:
        values = values / np.log1p(r)
    fit = fit_power_law(r, values, quantity=f"sphere_integral_B{b_exp:g}", sampling="sphere")
    logger.info("fa_scaling_fit", b_exp=b_exp, exponent=fit.exponent, residual=fit.residual_rms)
    return fit
