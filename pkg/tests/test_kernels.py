"""
Kernel Tests
Tests for the heat kernel, the Oseen heat tensor, rotations, the
time-integrated fundamental tensor, potentials and the reference fields.
"""

import math

import numpy as np
import pytest
from pydantic import ValidationError
from scipy.linalg import expm

from app.core.exceptions import InvalidInputError, UnsupportedEvaluationError
from app.core.quadrature import ball_rule
from app.schemas.kernel import KernelConfig, SourceDensity
from app.services.kernel_service import (
    KernelService,
    build_time_rule,
    gamma_kernel,
    heat_kernel,
    omega_matrix,
    oseen_tensor,
    oseen_tensor_gradient,
    rotation,
)
from app.services.verify_service import lambda_by_convolution


# ============================================================================
# SOURCE DENSITY
# ============================================================================

@pytest.mark.unit
class TestSourceDensity:

    def test_support_and_extent(self, source):
        assert source.outer_extent == pytest.approx(3.5)
        inside = source.contains(np.array([[2.5, 0.5, 0.0], [4.0, 0.0, 0.0]]))
        assert inside.tolist() == [True, False]

    def test_vanishes_outside_support(self, source):
        assert np.all(source.evaluate(np.array([[4.0, 0.0, 0.0], [2.5, 1.0, 0.0]])) == 0.0)

    def test_support_must_clear_obstacle(self):
        with pytest.raises(ValidationError):
            SourceDensity(center=(1.5, 0.0, 0.0), support_radius=1.0)

    def test_profile_mass_closed_form(self, source):
        pts, w = ball_rule(source.center_array, source.support_radius, 12)
        assert np.sum(w * source.profile(pts)) == pytest.approx(source.profile_mass(), rel=1e-12)


# ============================================================================
# CLOSED-FORM KERNELS
# ============================================================================

@pytest.mark.unit
class TestHeatKernel:

    def test_value_at_origin(self):
        assert heat_kernel(np.zeros(3), 1.0) == pytest.approx((4.0 * math.pi) ** -1.5)

    def test_vectorised(self):
        z = np.array([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]])
        values = heat_kernel(z, 0.5)
        assert values.shape == (2,)
        assert values[1] < values[0]

    def test_rejects_nonpositive_time(self):
        with pytest.raises(InvalidInputError):
            heat_kernel(np.ones(3), 0.0)


@pytest.mark.unit
class TestOseenTensor:

    @pytest.mark.parametrize("z, t", [
        ((0.3, -0.4, 1.1), 0.2),
        ((1.5, 0.0, 0.0), 1.0),
        ((0.01, 0.02, -0.01), 2.0),
    ])
    def test_symmetric_with_trace_twice_heat_kernel(self, z, t):
        z = np.asarray(z)
        lam = oseen_tensor(z, t)
        assert np.allclose(lam, lam.T, rtol=0.0, atol=1e-15 * np.abs(lam).max())
        assert np.trace(lam) == pytest.approx(2.0 * heat_kernel(z, t), rel=1e-10)

    def test_branches_agree_at_threshold(self):
        t = 0.7
        direction = np.array([1.0, 2.0, -2.0]) / 3.0
        r = 0.1 * math.sqrt(t)
        below = oseen_tensor(direction * r * (1.0 - 1e-9), t, small_arg=0.1)
        above = oseen_tensor(direction * r * (1.0 + 1e-9), t, small_arg=0.1)
        assert np.linalg.norm(below - above) <= 1e-9 * np.linalg.norm(below)

    def test_series_matches_closed_form_inside_threshold(self):
        z, t = np.array([0.02, -0.01, 0.03]), 0.5
        series = oseen_tensor(z, t, small_arg=0.1)
        closed = oseen_tensor(z, t, small_arg=1e-6)
        assert np.linalg.norm(series - closed) <= 1e-8 * np.linalg.norm(series)

    def test_isotropic_at_zero(self):
        lam = oseen_tensor(np.zeros(3), 1.0)
        assert np.all(np.isfinite(lam))
        assert np.allclose(lam, lam[0, 0] * np.eye(3))

    def test_batch_matches_single(self):
        zs = np.array([[0.5, 0.1, 0.0], [0.0, -1.0, 0.4]])
        batch = oseen_tensor(zs, 0.3)
        assert batch.shape == (2, 3, 3)
        assert np.allclose(batch[1], oseen_tensor(zs[1], 0.3), rtol=1e-14)

    def test_rotation_covariance(self):
        z, t = np.array([0.4, -0.7, 0.2]), 0.6
        q = rotation(1.3, 0.8)
        assert np.allclose(q @ oseen_tensor(z, t) @ q.T, oseen_tensor(q @ z, t), rtol=1e-12, atol=1e-16)

    def test_matches_defining_convolution(self):
        z, t = np.array([0.6, -0.3, 0.5]), 0.4
        lam = oseen_tensor(z, t)
        assert np.linalg.norm(lam - lambda_by_convolution(z, t)) <= 1e-5 * np.linalg.norm(lam)

    @pytest.mark.parametrize("z, t", [
        ((0.3, -0.4, 1.1), 0.2),
        ((0.01, 0.02, -0.01), 2.0),
    ])
    def test_gradient_matches_differences(self, z, t):
        z, h = np.asarray(z), 1e-3
        grad = oseen_tensor_gradient(z, t)
        for k in range(3):
            e = h * np.eye(3)[k]
            fd = (
                oseen_tensor(z - 2 * e, t) - 8.0 * oseen_tensor(z - e, t)
                + 8.0 * oseen_tensor(z + e, t) - oseen_tensor(z + 2 * e, t)
            ) / (12.0 * h)
            assert np.linalg.norm(grad[:, :, k] - fd) <= 1e-6 * np.linalg.norm(grad)

    def test_gradient_branches_agree_at_threshold(self):
        t = 0.7
        direction = np.array([1.0, 2.0, -2.0]) / 3.0
        r = 0.1 * math.sqrt(t)
        below = oseen_tensor_gradient(direction * r * (1.0 - 1e-9), t, small_arg=0.1)
        above = oseen_tensor_gradient(direction * r * (1.0 + 1e-9), t, small_arg=0.1)
        assert np.linalg.norm(below - above) <= 1e-7 * np.linalg.norm(below)

    def test_gradient_columns_are_divergence_free(self):
        zs = np.array([[0.3, -0.4, 1.1], [0.01, 0.02, -0.01], [2.0, 0.5, 0.0]])
        grad = oseen_tensor_gradient(zs, 0.4)
        div = np.einsum("niji->nj", grad)
        assert np.all(np.abs(div) <= 1e-10 * np.abs(grad).max(axis=(1, 2, 3))[:, None])


@pytest.mark.unit
class TestRotation:

    def test_exponential_of_omega(self):
        assert np.allclose(rotation(0.9, 0.5), expm(0.9 * omega_matrix(0.5)), atol=1e-14)

    def test_omega_is_cross_product(self):
        z = np.array([0.2, 1.0, -3.0])
        assert np.allclose(omega_matrix(2.0) @ z, 2.0 * np.cross([1.0, 0.0, 0.0], z))

    def test_group_law_and_axis(self):
        a, b, rho = 0.4, -1.7, 0.5
        assert np.allclose(rotation(a + b, rho), rotation(a, rho) @ rotation(b, rho), atol=1e-14)
        assert np.allclose(rotation(a, rho) @ [1.0, 0.0, 0.0], [1.0, 0.0, 0.0])


@pytest.mark.unit
class TestGammaKernel:

    def test_transpose_is_tilde_kernel_with_swapped_points(self, flow_params):
        x, y, t = np.array([2.0, 0.5, -1.0]), np.array([-0.5, 1.5, 0.3]), 0.8
        gamma = gamma_kernel(x, y, t, flow_params)
        tilde = gamma_kernel(y, x, t, flow_params, tilde=True)
        assert np.allclose(gamma.T, tilde, rtol=1e-12, atol=1e-16)

    def test_rejects_nonpositive_time(self, flow_params):
        with pytest.raises(InvalidInputError):
            gamma_kernel(np.ones(3), np.zeros(3), 0.0, flow_params)


# ============================================================================
# TIME QUADRATURE
# ============================================================================

@pytest.mark.unit
class TestTimeRule:

    def test_weights_integrate_constant_up_to_cutoff(self):
        rule = build_time_rule(d_min=0.5, extent=6.0, tau=1.0, rho=0.5, config=KernelConfig())
        assert rule.nodes.size == 15 * rule.n_panels
        assert np.all(rule.nodes > 0.0)
        assert np.sum(rule.kronrod) == pytest.approx(rule.cutoff, rel=1e-12)

    def test_refinement_doubles_cutoff(self):
        config = KernelConfig()
        coarse = build_time_rule(0.5, 6.0, 1.0, 0.5, config, level=0)
        fine = build_time_rule(0.5, 6.0, 1.0, 0.5, config, level=1)
        assert fine.cutoff == pytest.approx(2.0 * coarse.cutoff)
        assert fine.n_panels >= 2 * coarse.n_panels

    def test_cutoff_covers_gaussian_and_travel_time(self):
        config = KernelConfig()
        rule = build_time_rule(0.5, 6.0, 2.0, 0.5, config)
        assert rule.cutoff >= 4.0 * config.gauss_cutoff / 2.0 ** 2
        assert rule.cutoff >= config.tail_factor * 6.0 / 2.0


# ============================================================================
# FUNDAMENTAL TENSOR AND POTENTIALS
# ============================================================================

@pytest.mark.unit
class TestFundamentalTensor:

    def test_adjoint_identity(self, kernels):
        x, y = np.array([2.0, 0.7, -0.4]), np.array([-1.2, 1.1, 0.9])
        z_xy, err = kernels.fundamental_tensor(x, y)
        z_tilde, _ = kernels.fundamental_tensor(y, x, tilde=True)
        assert np.linalg.norm(z_xy - z_tilde.T) <= 1e-6 * np.linalg.norm(z_xy)
        assert err <= kernels.config.time_atol + kernels.config.time_rtol * np.abs(z_xy).max()

    def test_vectorised_targets(self, kernels):
        xs = np.array([[3.0, 0.0, 0.0], [0.0, 3.0, 0.0]])
        values, errors = kernels.fundamental_tensor(xs, np.zeros(3))
        assert values.shape == (2, 3, 3)
        assert errors.shape == (2,)

    def test_wake_direction_dominates(self, kernels):
        downstream, _ = kernels.fundamental_tensor(np.array([6.0, 0.0, 0.0]), np.zeros(3))
        upstream, _ = kernels.fundamental_tensor(np.array([-6.0, 0.0, 0.0]), np.zeros(3))
        assert np.linalg.norm(downstream) > np.linalg.norm(upstream)

    def test_rejects_coincident_points(self, kernels):
        with pytest.raises(InvalidInputError):
            kernels.fundamental_tensor(np.ones(3), np.ones(3))


@pytest.mark.unit
class TestPotentials:

    FAR = np.array([[7.5, 0.0, 0.0], [2.5, 5.0, 0.0], [0.0, -3.0, 4.0]])

    def test_newton_potential_of_radial_bump(self, kernels, source):
        dist = np.linalg.norm(self.FAR - source.center_array, axis=1)
        expected = -source.profile_mass() / (4.0 * math.pi * dist)
        assert np.allclose(kernels.potential_n(source, self.FAR), expected, rtol=1e-7)

    def test_gradient_potential_of_radial_bump(self, kernels, source):
        diff = self.FAR - source.center_array
        dist = np.linalg.norm(diff, axis=1)
        expected = source.profile_mass() * diff / (4.0 * math.pi * dist[:, None] ** 3)
        assert np.allclose(kernels.potential_s(source, self.FAR), expected, rtol=1e-7)

    def test_pressure_potential_is_dipole_outside_support(self, kernels, source):
        diff = self.FAR - source.center_array
        dist = np.linalg.norm(diff, axis=1)
        expected = source.profile_mass() * (diff @ source.amplitude_array) / (4.0 * math.pi * dist ** 3)
        assert np.allclose(kernels.potential_p(source, self.FAR), expected, rtol=1e-7)

    def test_inside_support_is_unsupported(self, kernels, source):
        with pytest.raises(UnsupportedEvaluationError) as exc_info:
            kernels.potential_p(source, source.center_array[None, :])
        assert exc_info.value.exit_code == 3


# ============================================================================
# VOLUME POTENTIAL AND REFERENCE FIELDS
# ============================================================================

@pytest.mark.unit
class TestVolumePotential:

    def test_single_batch_agrees_with_classified_rules(self, kernels, source):
        xs = np.array([[5.0, 0.0, 0.0], [0.0, 4.0, 0.0]])
        split, _ = kernels.apply_volume(source, xs)
        shared, _ = kernels.apply_volume(source, xs, single_batch=True)
        assert np.allclose(split, shared, rtol=1e-4, atol=1e-6 * np.abs(split).max())

    def test_interior_targets_are_finite(self, kernels, source):
        values, errors = kernels.apply_volume(source, np.array([[2.5, 0.2, 0.1]]))
        assert np.all(np.isfinite(values))
        assert np.all(np.isfinite(errors))

    def test_single_batch_is_exterior_only(self, kernels, source):
        with pytest.raises(UnsupportedEvaluationError):
            kernels.apply_volume(source, source.center_array[None, :], single_batch=True)

    def test_pressure_error_estimate(self, kernels, source):
        reference = kernels.reference_solution(source)
        value, error = reference.pressure_with_error(np.array([[0.0, 6.0, 0.0]]))
        assert error[0] <= 1e-7 * abs(value[0]) + 1e-14

    def test_gradient_order_must_be_2_or_4(self, kernels, source):
        with pytest.raises(InvalidInputError):
            kernels.reference_solution(source).velocity_gradient(np.array([[6.0, 0.0, 0.0]]), order=3)

    def test_halving_tolerance_stays_within_error_estimate(self, kernels, source):
        xs = np.array([[6.0, 0.0, 0.0], [0.0, 4.5, 0.0]])
        coarse, errors = kernels.apply_volume(source, xs)
        fine, _ = KernelService(kernels.params, kernels.config.halved()).apply_volume(source, xs)
        assert np.all(np.abs(fine - coarse).max(axis=1) <= errors)

    def test_analytic_gradient_is_divergence_free(self, kernels, source):
        xs = np.array([[6.0, 0.0, 0.0], [0.0, 4.5, 0.0], [-4.0, 0.0, 1.0]])
        values, grads = kernels.reference_solution(source).velocity_and_gradient(xs)
        plain, _ = kernels.apply_volume(source, xs)
        assert np.allclose(values, plain, rtol=1e-5, atol=1e-5 * np.abs(plain).max())
        trace = np.trace(grads, axis1=1, axis2=2)
        assert np.all(np.abs(trace) <= 1e-8 * np.linalg.norm(grads, axis=(1, 2)))

    def test_analytic_gradient_is_exterior_only(self, kernels, source):
        with pytest.raises(UnsupportedEvaluationError):
            kernels.apply_volume_gradient(source, source.center_array[None, :])


@pytest.mark.slow
class TestReferenceSolution:

    def test_pde_residual_and_divergence(self, kernels, source):
        reference = kernels.reference_solution(source)
        xs = np.array([[0.0, 4.5, 0.0]])
        residual, scale = reference.pde_residual(xs, h=0.1)
        assert np.linalg.norm(residual[0]) <= 1e-3 * scale[0]
        div, grad_scale = reference.divergence(xs, h=0.1)
        assert abs(div[0]) <= 1e-3 * grad_scale[0]

    def test_analytic_gradient_matches_differences(self, kernels, source):
        reference = kernels.reference_solution(source)
        xs = np.array([[0.0, 4.5, 0.0], [6.0, 0.0, 0.0]])
        _, analytic = reference.velocity_and_gradient(xs)
        differenced = reference.velocity_gradient(xs, h=0.05, order=4, single_batch=True)
        for a, d in zip(analytic, differenced):
            assert np.linalg.norm(a - d) <= 5e-4 * np.linalg.norm(a)
