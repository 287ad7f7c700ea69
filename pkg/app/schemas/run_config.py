"""
Run configuration: flat ``key = value`` files with strict validation.

Lists are comma separated, ``#`` starts a comment, unknown keys are errors.
"""

import typing
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

from pydantic import Field, ValidationError, field_validator, model_validator

from app.core.exceptions import ConfigError
from app.schemas.base import BaseSchema
from app.schemas.kernel import KernelConfig, SourceDensity
from app.schemas.params import FlowParams
from config.settings import settings


def _increasing(values: List[float], name: str) -> List[float]:
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ValueError(f"{name} must be strictly increasing")
    return values


class RunConfig(BaseSchema):
    """Everything one CLI run needs; defaults reproduce the acceptance studies."""

    # Flow
    tau: float = Field(default=1.0, gt=0)
    rho: float = 0.5
    r_inner: float = Field(default=1.0, gt=0)

    # Source density
    source_center: Tuple[float, float, float] = (2.5, 0.0, 0.0)
    source_radius: float = Field(default=1.0, gt=0)
    source_amplitude: Tuple[float, float, float] = (1.0, 0.5, 0.0)
    source_power: int = Field(default=4, ge=3)

    # Mesh policy
    r_outer: float = Field(default=4.0, gt=0)
    angular_level: int = Field(default=2, ge=0)
    radial_layers: int = Field(default=8, ge=1)
    grading: float = Field(default=1.3, ge=1.0)
    base_layers: int = Field(default=3, ge=1, description="Truncation policy: layers = base * (1 + ln R)")
    use_discrete_normal: bool = False

    # Kernel quadrature
    time_rtol: float = Field(default=1e-6, gt=0)
    time_atol: float = Field(default=1e-14, gt=0)
    volume_order: int = Field(default=12, ge=2)
    volume_order_far: int = Field(default=8, ge=2)

    # Solver
    solver: Literal["direct", "gmres"] = "direct"
    solver_rtol: float = Field(default=1e-8, gt=0)

    # Kernel checks
    kernel_samples: int = Field(default=20, ge=1)
    adjoint_samples: int = Field(default=10, ge=1)
    residual_points: int = Field(default=5, ge=1)
    residual_step: float = Field(default=0.1, gt=0)
    points_file: Optional[str] = None

    # Decay / scaling
    decay_radii: List[float] = [4.0, 5.66, 8.0, 11.3, 16.0, 22.6, 32.0, 45.3, 64.0]
    c0_shell_radius: float = Field(default=16.0, gt=0)
    pressure_offset: float = 0.0
    scaling_exponents: List[float] = [0.5, 1.0, 2.0]
    scaling_radii: List[float] = [8.0, 12.0, 16.0, 24.0, 32.0, 48.0, 64.0]

    # Truncation
    truncation_radii: List[float] = [4.0, 6.0, 8.0, 12.0]
    truncation_level: int = Field(default=2, ge=0)
    control_radius: Optional[float] = None
    study_workers: int = Field(default=1, ge=1)

    # Traction
    traction_radii: List[float] = [4.0, 6.0, 8.0, 12.0, 16.0, 24.0, 32.0]
    traction_theta_order: int = Field(default=16, ge=2)
    traction_phi_order: int = Field(default=16, ge=1)

    # Discrete identities
    energy_levels: List[int] = [2, 3]
    energy_samples: int = Field(default=10, ge=1)
    infsup_levels: List[int] = [0, 1, 2, 3]
    infsup_radial_layers: int = Field(default=4, ge=1)
    infsup_method: Literal["dense", "lobpcg"] = "dense"
    negative_control_levels: List[int] = [0, 1]

    # Output
    output_dir: str = Field(default_factory=lambda: settings.OUTPUT_DIR)
    seed: int = 1234

    @field_validator("rho")
    @classmethod
    def rho_nonzero(cls, value: float) -> float:
        if value == 0.0:
            raise ValueError("rho must be nonzero")
        return value

    @field_validator("decay_radii", "scaling_radii", "truncation_radii", "traction_radii")
    @classmethod
    def radii_increasing(cls, values: List[float], info) -> List[float]:
        if len(values) < 4:
            raise ValueError("at least 4 radii are needed for a fit")
        return _increasing(values, info.field_name)

    @field_validator("energy_levels", "infsup_levels")
    @classmethod
    def levels_increasing(cls, values: List[int], info) -> List[int]:
        if not values or min(values) < 0:
            raise ValueError("levels must be non-negative and non-empty")
        return _increasing(values, info.field_name)

    @model_validator(mode="after")
    def radii_cover_source(self):
        lowest = 2.0 * self.r_inner
        for name in ("r_outer", "truncation_radii", "traction_radii"):
            values = getattr(self, name)
            values = values if isinstance(values, list) else [values]
            if min(values) < lowest:
                raise ValueError(f"{name} must be >= 2 * r_inner")
        extent = self.source_density().outer_extent
        if min(self.truncation_radii) <= extent:
            raise ValueError(f"truncation_radii must exceed the source extent {extent:.3g}")
        if min(self.traction_radii) <= extent or min(self.decay_radii) <= extent:
            raise ValueError(f"evaluation radii must exceed the source extent {extent:.3g}")
        if self.c0_shell_radius < 4.0 * self.r_inner or self.c0_shell_radius <= extent:
            raise ValueError("c0_shell_radius must be >= 4 * r_inner and outside the source")
        return self

    # ------------------------------------------------------------------

    def flow_params(self) -> FlowParams:
        return FlowParams(tau=self.tau, rho=self.rho, r_inner=self.r_inner)

    def source_density(self) -> SourceDensity:
        return SourceDensity(
            center=self.source_center,
            support_radius=self.source_radius,
            amplitude=self.source_amplitude,
            power=self.source_power,
            obstacle_radius=self.r_inner,
        )

    def kernel_config(self) -> KernelConfig:
        return KernelConfig(
            time_rtol=self.time_rtol,
            time_atol=self.time_atol,
            volume_order=self.volume_order,
            volume_order_far=self.volume_order_far,
        )


# ============================================================================
# PARSING
# ============================================================================

def _is_sequence(name: str) -> bool:
    annotation = RunConfig.model_fields[name].annotation
    origin = typing.get_origin(annotation)
    return origin in (list, tuple, List, Tuple)


def _coerce(name: str, raw: str) -> Any:
    raw = raw.strip()
    if raw.lower() in ("", "none", "null"):
        return None
    if _is_sequence(name):
        return [item.strip() for item in raw.split(",") if item.strip()]
    return raw


def _validate(values: Dict[str, Any], lines: Dict[str, str]) -> RunConfig:
    try:
        return RunConfig.model_validate(values)
    except ValidationError as exc:
        first = exc.errors()[0]
        key = str(first["loc"][0]) if first["loc"] else None
        where = lines.get(key, "") if key else ""
        raise ConfigError(
            f"{where}{key or 'config'}: {first['msg']}",
            {"key": key, "errors": [f"{'.'.join(map(str, e['loc']))}: {e['msg']}" for e in exc.errors()]},
        ) from exc


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, Any]:
    """key = value lines -> raw values; records where each key came from."""
    values: Dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'", {"line": lineno})
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in RunConfig.model_fields:
            raise ConfigError(f"{source}:{lineno}: unknown key '{key}'", {"line": lineno, "key": key})
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key '{key}'", {"line": lineno, "key": key})
        values[key] = (_coerce(key, raw), f"{source}:{lineno}: ")
    return values


def parse_overrides(tokens: Sequence[str]) -> Dict[str, Any]:
    """['--key', 'value', ...] -> raw values (dashes in keys become underscores)."""
    values: Dict[str, Any] = {}
    it = iter(tokens)
    for token in it:
        if not token.startswith("--"):
            raise ConfigError(f"unexpected argument '{token}'", {"argument": token})
        key, sep, raw = token[2:].partition("=")
        key = key.replace("-", "_")
        if not sep:
            raw = next(it, None)
            if raw is None:
                raise ConfigError(f"--{key}: missing value", {"key": key})
        if key not in RunConfig.model_fields:
            raise ConfigError(f"--{key}: unknown key '{key}'", {"key": key})
        values[key] = (_coerce(key, raw), f"--{key}: ")
    return values


def load_run_config(path: Optional[Path] = None, overrides: Sequence[str] = ()) -> RunConfig:
    merged: Dict[str, Any] = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}", {"path": str(path)}) from exc
        merged.update(parse_config_text(text, source=str(path)))
    merged.update(parse_overrides(overrides))
    values = {key: value for key, (value, _) in merged.items() if value is not None}
    lines = {key: where for key, (_, where) in merged.items()}
    return _validate(values, lines)
