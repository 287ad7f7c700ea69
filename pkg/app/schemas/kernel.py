"""
Source density and kernel quadrature schemas.
"""

from typing import Tuple

import numpy as np
from pydantic import Field, model_validator

from app.schemas.base import BaseSchema


# ============================================================================
# SOURCE DENSITY
# ============================================================================

class SourceDensity(BaseSchema):
    """
    Compactly supported bump forcing f(y) = amplitude * (1 - r**2)**power,
    r = |y - center| / support_radius, zero for r >= 1.
    """
    center: Tuple[float, float, float] = (2.5, 0.0, 0.0)
    support_radius: float = Field(default=1.0, gt=0)
    amplitude: Tuple[float, float, float] = (1.0, 0.5, 0.0)
    power: int = Field(default=4, ge=3, description="Bump power; >= 3 keeps f in C2")
    obstacle_radius: float = Field(default=1.0, gt=0)

    @model_validator(mode="after")
    def support_clear_of_obstacle(self):
        gap = float(np.linalg.norm(self.center)) - self.support_radius
        if gap <= self.obstacle_radius:
            raise ValueError(
                f"support ball reaches the closed obstacle (clearance {gap - self.obstacle_radius:.3g})"
            )
        return self

    @property
    def center_array(self) -> np.ndarray:
        return np.asarray(self.center, dtype=float)

    @property
    def amplitude_array(self) -> np.ndarray:
        return np.asarray(self.amplitude, dtype=float)

    @property
    def outer_extent(self) -> float:
        """Largest |y| in the support."""
        return float(np.linalg.norm(self.center)) + self.support_radius

    def profile(self, ys: np.ndarray) -> np.ndarray:
        """Scalar bump at points (n, 3)."""
        ys = np.atleast_2d(ys)
        r2 = np.sum((ys - self.center_array) ** 2, axis=1) / self.support_radius ** 2
        return np.where(r2 < 1.0, np.clip(1.0 - r2, 0.0, None) ** self.power, 0.0)

    def evaluate(self, ys: np.ndarray) -> np.ndarray:
        """Vector density at points (n, 3) -> (n, 3)."""
        return self.profile(ys)[:, None] * self.amplitude_array[None, :]

    def profile_mass(self) -> float:
        """Integral of the scalar bump over space (closed form)."""
        from scipy.special import beta

        # 4 pi a^3 * int_0^1 r^2 (1 - r^2)^p dr = 2 pi a^3 * B(3/2, p + 1)
        return float(2.0 * np.pi * self.support_radius ** 3 * beta(1.5, self.power + 1.0))

    def contains(self, xs: np.ndarray) -> np.ndarray:
        xs = np.atleast_2d(xs)
        return np.linalg.norm(xs - self.center_array, axis=1) < self.support_radius


# ============================================================================
# KERNEL QUADRATURE CONFIGURATION
# ============================================================================

class KernelConfig(BaseSchema):
    """Tolerances and orders for time and volume quadrature."""
    time_rtol: float = Field(default=1e-6, gt=0)
    time_atol: float = Field(default=1e-14, gt=0)
    time_split: float = Field(default=1.0, gt=0, description="Switch from s-panels to t-panels")
    gauss_cutoff: float = Field(
        default=30.0, gt=0, description="Far cut-off where exp(-tau^2 T / 4) < exp(-gauss_cutoff)"
    )
    tail_factor: float = Field(
        default=8.0, gt=0, description="Cut-off at least tail_factor * extent / tau"
    )
    max_refinements: int = Field(default=3, ge=0)
    max_panels: int = Field(default=20000, ge=10)
    small_arg: float = Field(default=0.1, gt=0, le=0.5)
    volume_order: int = Field(default=12, ge=2)
    volume_order_far: int = Field(default=8, ge=2)
    far_distance_factor: float = Field(
        default=3.0, gt=1, description="Far rule beyond this many support radii"
    )
    polar_radial_order: int = Field(default=10, ge=2)
    polar_angular_order: int = Field(default=12, ge=2)
    sphere_theta_order: int = Field(default=64, ge=2)
    sphere_phi_order: int = Field(default=128, ge=1)
    sphere_rtol: float = Field(default=1e-4, gt=0)

    def halved(self) -> "KernelConfig":
        return self.model_copy(update={
            "time_rtol": self.time_rtol / 2.0,
            "time_atol": self.time_atol / 2.0,
        })
