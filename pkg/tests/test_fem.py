"""
FEM Tests
Tests for the P2 space, assembly, the saddle-point solve, discrete
identities, the artificial traction and the inf-sup constant.
"""

import numpy as np
import pytest

from app.core.exceptions import InvalidInputError
from app.core.quadrature import tetrahedron_rule
from app.models.mesh import FacetTag
from app.schemas.params import FlowParams
from app.services import fem_service, mesh_service
from app.services.fem_space import (
    build_p2_space,
    interpolate,
    interpolate_values,
    nodal_values,
    p2_lambda_derivatives,
    p2_values,
)


def _uniform_stream(x: np.ndarray) -> np.ndarray:
    return np.tile([1.0, 0.0, 0.0], (x.shape[0], 1))


def _vanishing_on_obstacle(x: np.ndarray) -> np.ndarray:
    radial = np.linalg.norm(x, axis=1, keepdims=True) - 1.0
    return radial * np.column_stack([1.0 + x[:, 1], 0.5 * x[:, 0], x[:, 2] - 0.3])


# ============================================================================
# P2 SPACE
# ============================================================================

@pytest.mark.unit
class TestP2Space:

    def test_edge_count_of_coarsest_shell(self, coarse_mesh):
        space = build_p2_space(coarse_mesh)
        # 30 inner + 30 outer + 12 radial + 30 quad diagonals
        assert space.edges.shape[0] == 102
        assert space.n_nodes == 24 + 102
        assert space.velocity_dofs == 3 * 126
        assert space.pressure_dofs == 24

    def test_midpoint_nodes(self, coarse_mesh):
        space = build_p2_space(coarse_mesh)
        a, b = space.edges[5]
        assert np.allclose(space.nodes[24 + 5], 0.5 * (coarse_mesh.vertices[a] + coarse_mesh.vertices[b]))

    def test_facet_nodes_lie_on_their_facets(self, coarse_mesh):
        space = build_p2_space(coarse_mesh)
        corners = coarse_mesh.vertices[coarse_mesh.facets]
        mids = space.nodes[space.facet_nodes[:, 3:]]
        assert np.allclose(mids[:, 0], 0.5 * (corners[:, 0] + corners[:, 1]))
        assert np.allclose(mids[:, 2], 0.5 * (corners[:, 1] + corners[:, 2]))

    def test_basis_partition_of_unity(self):
        bary, _ = tetrahedron_rule(3)
        assert np.allclose(p2_values(bary).sum(axis=1), 1.0)
        # sum of the basis is 2 s^2 - s in s = sum(lambda), so each partial is 4s - 1 = 3
        assert np.allclose(p2_lambda_derivatives(bary).sum(axis=1), 3.0)

    def test_interpolation_reproduces_quadratics(self, coarse_mesh):
        space = build_p2_space(coarse_mesh)
        coeffs = interpolate(space, lambda x: x ** 2)
        assert np.allclose(nodal_values(space, coeffs), space.nodes ** 2)


# ============================================================================
# ASSEMBLY
# ============================================================================

@pytest.mark.unit
class TestAssembly:

    def test_mass_matrices_integrate_one(self, small_system, small_mesh):
        volume = mesh_service.mesh_volume(small_mesh)
        assert small_system.M.sum() == pytest.approx(3.0 * volume, rel=1e-12)
        assert small_system.M_p.sum() == pytest.approx(volume, rel=1e-12)

    def test_surface_mass_is_outer_area(self, small_system, small_mesh):
        area, _ = mesh_service.facet_geometry(small_mesh.vertices, small_mesh.facets_tagged(FacetTag.OUTER))
        assert small_system.M_gamma.sum() == pytest.approx(3.0 * area.sum(), rel=1e-12)

    def test_stiffness_annihilates_constants(self, small_system):
        ones = np.ones(small_system.space.velocity_dofs)
        assert np.abs(small_system.K @ ones).max() < 1e-10

    def test_divergence_of_constant_and_linear_fields(self, small_system, small_mesh):
        space = small_system.space
        constant = interpolate(space, _uniform_stream)
        assert np.abs(small_system.B @ constant).max() < 1e-12
        # beta(x, psi) = -int 3 psi and the P1 hats sum to one
        linear = interpolate(space, lambda x: x)
        total = (small_system.B @ linear).sum()
        assert total == pytest.approx(-3.0 * mesh_service.mesh_volume(small_mesh), rel=1e-10)

    def test_weighted_norm_of_uniform_stream(self, flow_params):
        mesh = mesh_service.build_shell_mesh(r_outer=2.0, angular_level=2, radial_layers=2, grading=1.0)
        system = fem_service.assemble(mesh, flow_params)
        w = interpolate(system.space, _uniform_stream)
        area, _ = mesh_service.facet_geometry(mesh.vertices, mesh.facets_tagged(FacetTag.OUTER))
        norm2 = fem_service.weighted_norm(system, w) ** 2
        # no gradient, so only (tau/2) |outer sphere| = 8 pi at R = 2 survives
        assert norm2 == pytest.approx(0.5 * flow_params.tau * area.sum(), rel=1e-12)
        assert norm2 == pytest.approx(8.0 * np.pi * flow_params.tau, rel=3e-2)

    def test_rotation_lift_has_no_net_flux(self, small_system):
        ones = np.ones(small_system.space.pressure_dofs)
        rotation = fem_service.dirichlet_lift(small_system, lambda x: 0.5 * np.cross([1.0, 0.0, 0.0], x))
        radial = fem_service.dirichlet_lift(small_system, lambda x: x)
        flux = ones @ (small_system.B @ rotation)
        reference = ones @ (small_system.B @ radial)
        assert abs(reference) > 1.0
        assert abs(flux) <= 1e-10 * abs(reference)

    def test_inner_dofs_cover_obstacle_nodes(self, small_system):
        space = small_system.space
        nodes = small_system.inner_dofs[: small_system.inner_dofs.size // 3]
        inner = space.facet_nodes[space.mesh.facet_tags == space.mesh.tag_code(FacetTag.INNER)]
        assert np.array_equal(np.sort(nodes), np.unique(inner))
        vertices = nodes[nodes < space.mesh.n_vertices]
        assert np.allclose(np.linalg.norm(space.nodes[vertices], axis=1), 1.0)
        assert small_system.free_dofs.size + small_system.inner_dofs.size == space.velocity_dofs

    def test_obstacle_radius_must_match(self, small_mesh):
        with pytest.raises(InvalidInputError):
            fem_service.assemble(small_mesh, FlowParams(tau=1.0, rho=0.5, r_inner=0.5))


@pytest.mark.unit
class TestDiscreteIdentities:

    def test_energy_identity_exact_without_rotation(self, small_mesh):
        # with the discrete normal the drift boundary term is exact; rho -> 0 removes transport
        system = fem_service.assemble(small_mesh, FlowParams(tau=1.0, rho=1e-9), use_discrete_normal=True)
        w = interpolate(system.space, _vanishing_on_obstacle)
        assert fem_service.energy_identity_residual(system, w) < 1e-7

    def test_rotation_block_is_skew(self, small_system):
        n = small_system.space.n_nodes
        upper = small_system.A[n:2 * n, 2 * n:3 * n]
        lower = small_system.A[2 * n:3 * n, n:2 * n]
        assert abs(upper + lower).max() < 1e-14
        scalar_mass = small_system.M[:n, :n]
        assert abs(lower - small_system.params.rho * scalar_mass).max() < 1e-14

    def test_poincare_and_boundedness_ratios(self, small_system):
        w = interpolate(small_system.space, _vanishing_on_obstacle)
        v = interpolate(small_system.space, lambda x: _vanishing_on_obstacle(x)[:, [2, 0, 1]])
        assert 0.0 < fem_service.poincare_ratio(small_system, w) < 1.0
        assert 0.0 < fem_service.boundedness_ratio(small_system, w, v) < 20.0

    def test_zero_field_rejected(self, small_system):
        with pytest.raises(InvalidInputError):
            fem_service.energy_identity_residual(small_system, np.zeros(small_system.space.velocity_dofs))


# ============================================================================
# SOLVE
# ============================================================================

@pytest.mark.unit
class TestSolve:

    def test_zero_data_gives_zero_solution(self, small_system):
        result = fem_service.solve(small_system, np.zeros(small_system.space.velocity_dofs))
        assert np.abs(result.V).max() == 0.0
        assert np.abs(result.P).max() == 0.0
        assert not result.pressure_pinned

    def test_uniform_stream_boundary_data(self, small_system):
        lift = fem_service.dirichlet_lift(small_system, _uniform_stream)
        result = fem_service.solve(small_system, lift)
        assert result.residual <= 1e-7
        assert np.allclose(result.V[small_system.inner_dofs], lift[small_system.inner_dofs])
        assert fem_service.natural_bc_residual(small_system, result) < 1e-6
        assert fem_service.divergence_residual(small_system, result.V) < 1e-6
        assert fem_service.weighted_norm(small_system, result.V) > 0.0

    def test_forced_problem(self, small_system, source):
        load = fem_service.load_vector(small_system.space, source.evaluate)
        assert np.abs(load).max() > 0.0
        result = fem_service.solve(small_system, np.zeros_like(load), load)
        assert fem_service.natural_bc_residual(small_system, result, load) < 1e-6

    def test_load_vector_integrates_constant_density(self, small_system, small_mesh):
        load = fem_service.load_vector(small_system.space, _uniform_stream)
        # P2 functions sum to one, so component sums are the integral of the density
        sums = load.reshape(3, small_system.space.n_nodes).sum(axis=1)
        assert sums[0] == pytest.approx(mesh_service.mesh_volume(small_mesh), rel=1e-12)
        assert np.allclose(sums[1:], 0.0)

    def test_shape_mismatch(self, small_system):
        with pytest.raises(InvalidInputError):
            fem_service.solve(small_system, np.zeros(3))

    @pytest.mark.slow
    def test_exact_field_error_drops_under_refinement(self, kernels, source, flow_params):
        errors = []
        for level, layers in ((0, 2), (1, 4)):
            mesh = mesh_service.build_shell_mesh(r_outer=4.0, angular_level=level, radial_layers=layers)
            system = fem_service.assemble(mesh, flow_params)
            u_nodes, _ = kernels.apply_volume(source, system.space.nodes)
            reference = interpolate_values(system.space, u_nodes)
            lift = np.zeros_like(reference)
            lift[system.inner_dofs] = reference[system.inner_dofs]
            load = fem_service.load_vector(system.space, source.evaluate)
            result = fem_service.solve(system, lift, load)
            errors.append(fem_service.weighted_norm(system, reference - result.V))
        assert errors[1] < errors[0]

    @pytest.mark.slow
    def test_gmres_matches_direct(self, small_system):
        lift = fem_service.dirichlet_lift(small_system, _uniform_stream)
        direct = fem_service.solve(small_system, lift)
        krylov = fem_service.solve(small_system, lift, method="gmres", rtol=1e-10)
        assert krylov.iterations is not None and krylov.iterations > 0
        assert np.allclose(krylov.V, direct.V, rtol=1e-6, atol=1e-7)


# ============================================================================
# TRACTION
# ============================================================================

@pytest.mark.unit
class TestArtificialTraction:

    def test_uniform_stream_traction_is_damping_term(self, small_system):
        space = small_system.space
        V = interpolate(space, _uniform_stream)
        traction = fem_service.artificial_traction(small_system, V, np.zeros(space.pressure_dofs))
        R = space.mesh.r_outer
        expected = 0.5 * (1.0 - traction.points[..., 0] / R)
        assert np.allclose(traction.point_values[..., 0], expected, atol=1e-12)
        assert np.allclose(traction.point_values[..., 1:], 0.0, atol=1e-12)

    def test_constant_pressure_traction(self, small_system):
        space = small_system.space
        traction = fem_service.artificial_traction(
            small_system, np.zeros(space.velocity_dofs), np.ones(space.pressure_dofs)
        )
        assert np.allclose(traction.point_values, -traction.points / space.mesh.r_outer, atol=1e-12)
        assert traction.norm > 0.0

    def test_zero_fields(self, small_system):
        space = small_system.space
        traction = fem_service.artificial_traction(
            small_system, np.zeros(space.velocity_dofs), np.zeros(space.pressure_dofs)
        )
        assert traction.norm == 0.0


# ============================================================================
# INF-SUP
# ============================================================================

@pytest.mark.unit
class TestInfSup:

    def test_taylor_hood_constant_positive(self, coarse_mesh, flow_params):
        system = fem_service.assemble(coarse_mesh, flow_params)
        assert fem_service.discrete_infsup(system) > 0.0

    def test_discontinuous_control_is_finite(self, coarse_mesh, flow_params):
        system = fem_service.assemble(coarse_mesh, flow_params)
        value = fem_service.discrete_infsup(system, pressure="p1_discontinuous")
        assert np.isfinite(value) and value >= 0.0

    def test_unknown_pressure_space(self, coarse_mesh, flow_params):
        system = fem_service.assemble(coarse_mesh, flow_params)
        with pytest.raises(InvalidInputError):
            fem_service.discrete_infsup(system, pressure="p2")

    def test_lobpcg_on_coarsest_shell(self, coarse_mesh, flow_params):
        system = fem_service.assemble(coarse_mesh, flow_params)
        dense = fem_service.discrete_infsup(system, method="dense")
        iterative = fem_service.discrete_infsup(system, method="lobpcg", seed=1)
        assert iterative == pytest.approx(dense, rel=1e-3)

    def test_dense_limit_falls_back_to_lobpcg(self, coarse_mesh, flow_params, monkeypatch):
        system = fem_service.assemble(coarse_mesh, flow_params)
        dense = fem_service.discrete_infsup(system, method="dense")
        monkeypatch.setattr(fem_service.settings, "DENSE_EIG_LIMIT", 10)
        assert fem_service.discrete_infsup(system, method="dense", seed=1) == pytest.approx(dense, rel=1e-3)

    @pytest.mark.slow
    def test_lobpcg_agrees_with_dense(self, small_system):
        dense = fem_service.discrete_infsup(small_system, method="dense")
        iterative = fem_service.discrete_infsup(small_system, method="lobpcg", seed=3)
        assert iterative == pytest.approx(dense, rel=1e-2)
