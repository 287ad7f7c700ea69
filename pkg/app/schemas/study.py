"""
Study and report schemas.

Every study returns its acceptance criteria; the report aggregates them.
"""

from typing import Any, Dict, List, Literal, Optional

from pydantic import Field, field_validator, model_validator

from app.schemas.base import BaseSchema


# Fits whose log-space RMS residual exceeds this are never counted as passing
FIT_RESIDUAL_LIMIT = 0.15


# ============================================================================
# FITS
# ============================================================================

class DecayFit(BaseSchema):
    """Least-squares power law value ~ constant * R**exponent."""
    quantity: str
    sampling: str = Field(..., description="Ray or shell the samples were taken on")
    exponent: float
    constant: float
    radii: List[float]
    values: List[float]
    residual_rms: float
    envelope_ratio_spread: Optional[float] = None

    @field_validator("radii")
    @classmethod
    def radii_increasing(cls, radii: List[float]) -> List[float]:
        if len(radii) < 4:
            raise ValueError("a decay fit needs at least 4 samples")
        if any(b <= a for a, b in zip(radii, radii[1:])):
            raise ValueError("radii must be strictly increasing")
        return radii

    @field_validator("residual_rms")
    @classmethod
    def residual_finite(cls, value: float) -> float:
        if value != value or value in (float("inf"), float("-inf")):
            raise ValueError("fit residual must be finite")
        return value

    @property
    def reliable(self) -> bool:
        return self.residual_rms <= FIT_RESIDUAL_LIMIT


# ============================================================================
# CRITERIA
# ============================================================================

class Criterion(BaseSchema):
    """One acceptance check: value compared against [lower, upper]."""
    name: str
    value: Optional[float]
    lower: Optional[float] = None
    upper: Optional[float] = None
    passed: bool
    note: str = ""

    @classmethod
    def within(
            cls,
            name: str,
            value: Optional[float],
            lower: Optional[float] = None,
            upper: Optional[float] = None,
            reliable: bool = True,
            note: str = "",
    ) -> "Criterion":
        ok = value is not None and reliable
        if ok and lower is not None:
            ok = value >= lower
        if ok and upper is not None:
            ok = value <= upper
        if not reliable and not note:
            note = "unreliable fit"
        return cls(name=name, value=value, lower=lower, upper=upper, passed=bool(ok), note=note)


# ============================================================================
# TRUNCATION STUDY
# ============================================================================

class SolverStats(BaseSchema):
    method: str
    velocity_dofs: int
    pressure_dofs: int
    residual: float
    pressure_pinned: bool = False
    iterations: Optional[int] = None


class TruncationRow(BaseSchema):
    radius: float
    angular_level: int
    radial_layers: int
    dofs: int
    error: float = Field(..., gt=0)
    solver: SolverStats


class TruncationStudy(BaseSchema):
    rows: List[TruncationRow]
    control: Optional[TruncationRow] = None
    control_shift: Optional[float] = None
    slope: Optional[float] = None
    slope_fit: Optional[DecayFit] = None
    status: Literal["reported", "inconclusive"]

    @model_validator(mode="after")
    def slope_only_when_certified(self):
        if self.status == "inconclusive" and self.slope is not None:
            raise ValueError("an inconclusive study cannot report a slope")
        return self


# ============================================================================
# STUDY RESULT / REPORT
# ============================================================================

class StudyResult(BaseSchema):
    """Outcome of one subcommand's study."""
    name: str
    criteria: List[Criterion] = Field(default_factory=list)
    fits: List[DecayFit] = Field(default_factory=list)
    summary: Dict[str, Any] = Field(default_factory=dict)
    rows: List[Dict[str, Any]] = Field(default_factory=list)
    columns: List[str] = Field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.criteria)


class Report(BaseSchema):
    status: Literal["PASS", "FAIL", "EMPTY"]
    studies: List[StudyResult] = Field(default_factory=list)
    failing: List[str] = Field(default_factory=list)
