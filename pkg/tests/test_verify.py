"""
Verification Tests
Tests for the c0 estimate, decay and traction studies on synthetic far
fields, the truncation bookkeeping and the report.
"""

import numpy as np
import pytest
from pydantic import ValidationError

from app.core.exceptions import InvalidInputError
from app.schemas.params import FlowParams
from app.schemas.run_config import RunConfig
from app.schemas.study import (
    Criterion,
    DecayFit,
    SolverStats,
    StudyResult,
    TruncationRow,
    TruncationStudy,
)
from app.services import verify_service
from app.services.weight_service import wake_weight


class _FarField:
    """Stand-in reference with the leading-order Oseen far field around the source centre."""

    params = FlowParams(tau=1.0, rho=0.5)
    center = np.array([2.5, 0.0, 0.0])

    def velocity(self, x):
        x = np.atleast_2d(x) - self.center
        r = np.linalg.norm(x, axis=1)
        u = np.zeros_like(x)
        u[:, 0] = 1.0 / (r * wake_weight(x))
        return u, np.zeros(len(x))

    def velocity_and_gradient(self, x):
        u, _ = self.velocity(x)
        r = np.linalg.norm(np.atleast_2d(x) - self.center, axis=1)
        return u, np.eye(3)[None, :, :] / r[:, None, None] ** 2

    def pressure(self, x):
        x = np.atleast_2d(x) - self.center
        return x[:, 1] / np.linalg.norm(x, axis=1) ** 3


class _PowerField(_FarField):
    """u = e1 / |x|^2 about the origin, so every traction term scales alike."""

    center = np.zeros(3)

    def velocity(self, x):
        r = np.linalg.norm(x, axis=1)
        u = np.zeros_like(x)
        u[:, 0] = 1.0 / r ** 2
        return u, np.zeros(len(x))


def _row(radius: float, error: float, level: int = 2) -> TruncationRow:
    return TruncationRow(
        radius=radius,
        angular_level=level,
        radial_layers=8,
        dofs=1000,
        error=error,
        solver=SolverStats(method="direct", velocity_dofs=900, pressure_dofs=100, residual=1e-12),
    )


# ============================================================================
# C0 AND DECAY
# ============================================================================

@pytest.mark.unit
class TestC0Estimate:

    def test_negative_median(self):
        assert verify_service.estimate_c0([1, 2, 3, 4, 5, 6, 7, 8]) == pytest.approx(-4.5)

    def test_robust_to_outliers(self):
        assert verify_service.estimate_c0([0.1] * 8 + [1e6]) == pytest.approx(-0.1)

    def test_needs_eight_samples(self):
        with pytest.raises(InvalidInputError):
            verify_service.estimate_c0([1.0] * 7)


@pytest.mark.unit
class TestDecayStudy:

    def test_inverse_square_field(self):
        radii = [4.0, 8.0, 16.0, 32.0, 64.0]
        fits = verify_service.decay_study(
            lambda pts: pts / np.linalg.norm(pts, axis=1, keepdims=True) ** 3,
            [(1.0, 0.0, 0.0), (0.0, 0.0, 2.0)],
            radii,
            quantity="q",
        )
        assert len(fits) == 2
        for fit in fits:
            assert fit.exponent == pytest.approx(-2.0, abs=1e-10)
            assert fit.envelope_ratio_spread is None
        assert fits[1].sampling == "ray(0,0,1)"

    def test_rays_from_an_origin(self):
        origin = (2.5, 0.0, 0.0)
        fits = verify_service.decay_study(
            lambda pts: 1.0 / np.linalg.norm(pts - np.asarray(origin), axis=1) ** 2,
            [(0.0, 1.0, 0.0)],
            [4.0, 8.0, 16.0, 32.0],
            quantity="q",
            origin=origin,
        )
        assert fits[0].exponent == pytest.approx(-2.0, abs=1e-10)
        assert fits[0].sampling == "ray(0,1,0)@(2.5,0,0)"

    def test_far_field_studies_pass(self):
        study = verify_service.decay_studies(RunConfig(), _FarField())
        assert study.name == "decay"
        assert study.passed, [c.name for c in study.criteria if not c.passed]
        downstream, transverse, pressure = study.fits[:3]
        assert downstream.exponent == pytest.approx(-1.0, abs=1e-10)
        assert downstream.envelope_ratio_spread == pytest.approx(1.0)
        assert -2.0 < transverse.exponent < -1.8
        assert pressure.exponent == pytest.approx(-2.0, abs=1e-6)
        assert study.summary["c0"] == 0.0
        assert abs(study.summary["c0_estimate"]) < 1e-12
        assert study.summary["c0_samples"] >= 8
        assert study.summary["ray_origin"] == [2.5, 0.0, 0.0]
        assert set(study.columns) == {"quantity", "sampling", "radius", "value"}

    def test_c0_is_zero_for_a_decaying_pressure(self):
        # a nonzero shell median must not leak into the fitted pressure
        class _Skewed(_FarField):
            def pressure(self, x):
                return super().pressure(x) + 1e-3 / np.linalg.norm(np.atleast_2d(x) - self.center, axis=1) ** 2

        study = verify_service.decay_studies(RunConfig(), _Skewed())
        assert study.summary["c0"] == 0.0
        assert study.summary["c0_estimate"] != 0.0
        assert study.fits[2].exponent == pytest.approx(-2.0, abs=1e-8)
        assert study.passed

    def test_pressure_offset_sets_c0(self):
        run = RunConfig(pressure_offset=3.0)
        study = verify_service.decay_studies(run, _FarField())
        assert study.summary["c0"] == -3.0
        assert study.summary["c0_estimate"] == pytest.approx(-3.0)
        assert study.fits[2].exponent == pytest.approx(-2.0, abs=1e-6)


@pytest.mark.unit
class TestTractionDecay:

    def test_all_terms_decay_like_inverse_radius(self):
        study = verify_service.traction_decay_study(_PowerField(), [4.0, 8.0, 16.0, 32.0])
        assert study.passed
        for fit in study.fits:
            assert fit.exponent == pytest.approx(-1.0, abs=1e-6)
        assert len(study.rows) == 4
        assert study.summary["gradient_slope"] == pytest.approx(-1.0, abs=1e-6)

    def test_pressure_offset_is_cancelled(self):
        radii = [4.0, 8.0, 16.0, 32.0]
        plain = verify_service.traction_decay_study(_PowerField(), radii)
        shifted = verify_service.traction_decay_study(_PowerField(), radii, pressure_offset=2.0)
        assert plain.summary["c0"] == 0.0
        assert shifted.summary["c0"] == -2.0
        for a, b in zip(plain.rows, shifted.rows):
            assert b["pressure"] == pytest.approx(a["pressure"], rel=1e-9)


# ============================================================================
# TRUNCATION
# ============================================================================

@pytest.mark.unit
class TestTruncationResult:

    def test_inconclusive_study_cannot_carry_slope(self):
        with pytest.raises(ValidationError):
            TruncationStudy(rows=[_row(4.0, 1.0)], slope=-1.0, status="inconclusive")

    def test_error_must_be_positive(self):
        with pytest.raises(ValidationError):
            _row(4.0, 0.0)

    def test_inconclusive_fails_slope_criterion(self):
        rows = [_row(r, 1.0 / r) for r in (4.0, 6.0, 8.0, 12.0)]
        study = TruncationStudy(
            rows=rows, control=_row(12.0, 0.04, level=3), control_shift=0.52, status="inconclusive"
        )
        result = verify_service.truncation_result(study)
        by_name = {c.name: c for c in result.criteria}
        assert not by_name["truncation_slope"].passed
        assert "inconclusive" in by_name["truncation_slope"].note
        assert not by_name["control_shift"].passed
        assert by_name["error_monotone_decreasing"].passed
        assert result.rows[-1]["control"] is True
        assert result.summary["slope"] is None

    def test_reported_study(self):
        radii = [4.0, 6.0, 8.0, 12.0]
        rows = [_row(r, 2.0 / r) for r in radii]
        fit = DecayFit(
            quantity="truncation_error", sampling="shell", exponent=-1.0, constant=2.0,
            radii=radii, values=[2.0 / r for r in radii], residual_rms=0.0,
        )
        study = TruncationStudy(
            rows=rows, control=_row(12.0, 0.17, level=3), control_shift=0.02,
            slope=-1.0, slope_fit=fit, status="reported",
        )
        result = verify_service.truncation_result(study)
        assert result.passed
        assert len(result.rows) == 5
        assert result.fits == [fit]

    def test_non_monotone_errors_fail(self):
        rows = [_row(r, e) for r, e in zip((4.0, 6.0, 8.0, 12.0), (0.5, 0.3, 0.4, 0.2))]
        study = TruncationStudy(rows=rows, status="inconclusive")
        result = verify_service.truncation_result(study)
        assert not {c.name: c for c in result.criteria}["error_monotone_decreasing"].passed


# ============================================================================
# CRITERIA AND REPORT
# ============================================================================

@pytest.mark.unit
class TestCriterion:

    @pytest.mark.parametrize("value, lower, upper, expected", [
        (1.0, 0.0, 2.0, True),
        (2.0, 0.0, 2.0, True),
        (2.5, 0.0, 2.0, False),
        (-1.0, 0.0, None, False),
        (5.0, None, None, True),
        (None, 0.0, 1.0, False),
    ])
    def test_within(self, value, lower, upper, expected):
        assert Criterion.within("c", value, lower, upper).passed is expected

    def test_unreliable_fit_never_passes(self):
        criterion = Criterion.within("slope", -1.0, -1.3, -0.7, reliable=False)
        assert not criterion.passed
        assert criterion.note == "unreliable fit"


@pytest.mark.unit
class TestReport:

    def test_empty(self):
        report = verify_service.build_report([])
        assert report.status == "EMPTY"
        assert "Overall status: **EMPTY**" in verify_service.report_markdown(report)

    def test_pass(self):
        study = StudyResult(name="mesh", criteria=[Criterion.within("min_volume", 0.1, lower=0.0)])
        report = verify_service.build_report([study])
        assert report.status == "PASS"
        assert report.failing == []

    def test_fail_names_study_and_criterion(self):
        good = StudyResult(name="mesh", criteria=[Criterion.within("min_volume", 0.1, lower=0.0)])
        bad = StudyResult(name="traction", criteria=[Criterion.within("traction_total_slope", -0.2, -1.3, -0.7)])
        report = verify_service.build_report([good, bad])
        assert report.status == "FAIL"
        assert report.failing == ["traction.traction_total_slope"]

        text = verify_service.report_markdown(report)
        assert "Overall status: **FAIL**" in text
        assert "| traction_total_slope | -0.2 | [-1.3, -0.7] | FAIL |" in text
        assert "- traction.traction_total_slope" in text


# ============================================================================
# KERNEL INVARIANTS
# ============================================================================

@pytest.mark.slow
class TestKernelInvariantSuite:

    def test_small_sample_passes(self, flow_params, kernel_config):
        study = verify_service.kernel_invariant_suite(flow_params, kernel_config, samples=2, adjoint_samples=2)
        assert study.passed, [c.name for c in study.criteria if not c.passed]
        assert sum(1 for row in study.rows if row["check"] == "adjoint") == 2
