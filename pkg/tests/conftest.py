"""
Pytest Configuration and Fixtures
Shared flow parameters, sources, kernels and coarse meshes.
"""

from pathlib import Path

import pytest

from app.models.fem import MixedSystem
from app.models.mesh import ShellMesh
from app.repositories.artifact_repo import ArtifactRepository
from app.schemas.kernel import KernelConfig, SourceDensity
from app.schemas.params import FlowParams
from app.services import fem_service, mesh_service
from app.services.kernel_service import KernelService


# ============================================================================
# PARAMETER FIXTURES
# ============================================================================

@pytest.fixture(scope="session")
def flow_params() -> FlowParams:
    """tau = 1, rho = 0.5 around the unit obstacle"""
    return FlowParams(tau=1.0, rho=0.5, r_inner=1.0)


@pytest.fixture(scope="session")
def source() -> SourceDensity:
    """Default bump forcing centred at (2.5, 0, 0)"""
    return SourceDensity()


@pytest.fixture(scope="session")
def kernel_config() -> KernelConfig:
    return KernelConfig()


@pytest.fixture(scope="session")
def kernels(flow_params: FlowParams, kernel_config: KernelConfig) -> KernelService:
    return KernelService(flow_params, kernel_config)


# ============================================================================
# MESH FIXTURES
# ============================================================================

@pytest.fixture(scope="session")
def coarse_mesh() -> ShellMesh:
    """Icosahedron shell, one layer: 12 * 2 vertices, 20 * 3 tets"""
    return mesh_service.build_shell_mesh(r_outer=2.0, angular_level=0, radial_layers=1, grading=1.0)


@pytest.fixture(scope="session")
def small_mesh() -> ShellMesh:
    return mesh_service.build_shell_mesh(r_outer=4.0, angular_level=1, radial_layers=3, grading=1.3)


@pytest.fixture(scope="session")
def small_system(small_mesh: ShellMesh, flow_params: FlowParams) -> MixedSystem:
    return fem_service.assemble(small_mesh, flow_params)


# ============================================================================
# OUTPUT FIXTURES
# ============================================================================

@pytest.fixture
def output_dir(tmp_path: Path) -> Path:
    """Fresh artifact directory per test"""
    out = tmp_path / "out"
    out.mkdir()
    return out


@pytest.fixture
def repo(output_dir: Path) -> ArtifactRepository:
    return ArtifactRepository(output_dir)
