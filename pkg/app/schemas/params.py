"""
Flow parameter and decay envelope schemas.
"""

from typing import Literal, Tuple

from pydantic import Field, field_validator

from app.schemas.base import BaseSchema


AXIS: Tuple[float, float, float] = (1.0, 0.0, 0.0)


# ============================================================================
# FLOW PARAMETERS
# ============================================================================

class FlowParams(BaseSchema):
    """Translation speed, angular speed and obstacle radius."""
    tau: float = Field(..., gt=0, description="Translation speed along e1")
    rho: float = Field(..., description="Angular speed about e1, nonzero")
    r_inner: float = Field(default=1.0, gt=0, description="Obstacle radius")

    @field_validator("rho")
    @classmethod
    def rho_nonzero(cls, value: float) -> float:
        if value == 0.0:
            raise ValueError("rho must be nonzero")
        return value

    @property
    def axis(self) -> Tuple[float, float, float]:
        return AXIS


# ============================================================================
# DECAY ENVELOPES
# ============================================================================

class DecayEnvelope(BaseSchema):
    """
    C * |y|**norm_power * s(y)**wake_power, times an optional log factor.

    log = "l_ab"  -> max(1, ln|y|)
    log = "sigma" -> ln(1 + |y|)
    """
    amplitude: float = Field(default=1.0, ge=0)
    norm_power: float
    wake_power: float
    log: Literal["none", "l_ab", "sigma"] = "none"

    @classmethod
    def velocity(cls, a_exp: float = 4.0, b_exp: float = 4.0, amplitude: float = 1.0) -> "DecayEnvelope":
        """(|y| s)^-1, with the l_{A,B} factor on the borderline A + min(1,B) = 3."""
        log = "l_ab" if a_exp + min(1.0, b_exp) == 3.0 else "none"
        return cls(amplitude=amplitude, norm_power=-1.0, wake_power=-1.0, log=log)

    @classmethod
    def gradient(cls, a_exp: float = 4.0, b_exp: float = 4.0, amplitude: float = 1.0) -> "DecayEnvelope":
        """(|y| s)^-3/2 * s^max(0, 7/2 - A - B)."""
        log = "l_ab" if a_exp + min(1.0, b_exp) == 3.0 else "none"
        wake = -1.5 + max(0.0, 3.5 - a_exp - b_exp)
        return cls(amplitude=amplitude, norm_power=-1.5, wake_power=wake, log=log)

    @classmethod
    def pressure(cls, amplitude: float = 1.0) -> "DecayEnvelope":
        return cls(amplitude=amplitude, norm_power=-2.0, wake_power=0.0)

    @classmethod
    def nonlinear(cls, order: int, amplitude: float = 1.0) -> "DecayEnvelope":
        """(|x| s)^(-1 - order/2) for derivatives of the given order."""
        if order < 0:
            raise ValueError("derivative order must be >= 0")
        power = -1.0 - 0.5 * order
        return cls(amplitude=amplitude, norm_power=power, wake_power=power)
