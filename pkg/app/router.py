"""
Command Router
Subcommand table of the CLI: each handler runs one study family, writes its
artifacts and returns the studies it produced.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List

import numpy as np

from app.core.exceptions import InvalidInputError
from app.models.mesh import FacetTag
from app.repositories.artifact_repo import ArtifactRepository
from app.schemas.run_config import RunConfig
from app.schemas.study import Criterion, StudyResult
from app.services import fem_service, mesh_service, verify_service
from app.services.fem_space import interpolate_values, nodal_values
from app.services.kernel_service import KernelService
from app_logging.logger import LogTimer, get_logger

logger = get_logger(__name__)

Handler = Callable[[RunConfig, ArtifactRepository], List[StudyResult]]


@dataclass(frozen=True)
class Command:
    name: str
    help: str
    handler: Handler


COMMANDS: Dict[str, Command] = {}


def command(name: str, help: str):
    """Register a subcommand handler."""
    def register(handler: Handler) -> Handler:
        COMMANDS[name] = Command(name=name, help=help, handler=handler)
        return handler
    return register


def write_study(repo: ArtifactRepository, study: StudyResult) -> None:
    repo.write_csv(f"study_{study.name}.csv", study.columns, study.rows)
    repo.write_json(f"study_{study.name}.json", study.model_dump())
    logger.info("study_written", study=study.name, passed=study.passed)


def _kernels(run: RunConfig) -> KernelService:
    return KernelService(run.flow_params(), run.kernel_config())


# ============================================================================
# MESH
# ============================================================================

@command("mesh", help="build, validate and export the shell mesh")
def run_mesh(run: RunConfig, repo: ArtifactRepository) -> List[StudyResult]:
    mesh = mesh_service.build_shell_mesh(run.r_outer, run.angular_level, run.radial_layers, run.grading, run.r_inner)
    quality = mesh_service.validate(mesh)
    repo.write_mesh("mesh.shellmesh", mesh)
    repo.write_mesh_vtk("mesh.vtk", mesh)

    exact = 4.0 * np.pi / 3.0 * (run.r_outer ** 3 - run.r_inner ** 3)
    euler = {tag: mesh_service.surface_euler_characteristic(mesh, tag) for tag in FacetTag}
    row = quality.model_dump()
    row.update({
        "euler_inner": euler[FacetTag.INNER],
        "euler_outer": euler[FacetTag.OUTER],
        "volume_rel_error": abs(quality.total_volume - exact) / exact,
    })
    study = StudyResult(
        name="mesh",
        criteria=[
            Criterion.within("min_volume", quality.min_volume, lower=0.0),
            Criterion.within("euler_inner", float(euler[FacetTag.INNER]), 2.0, 2.0),
            Criterion.within("euler_outer", float(euler[FacetTag.OUTER]), 2.0, 2.0),
        ],
        summary=row,
        rows=[{k: v for k, v in row.items() if not isinstance(v, list)}],
        columns=[
            "tets", "vertices", "inner_facets", "outer_facets", "min_dihedral_deg", "max_dihedral_deg",
            "min_volume", "total_volume", "volume_rel_error", "euler_inner", "euler_outer",
        ],
    )
    write_study(repo, study)
    return [study]


# ============================================================================
# KERNELS
# ============================================================================

@command("kernels", help="kernel invariant suite, PDE residual and batch evaluation")
def run_kernels(run: RunConfig, repo: ArtifactRepository) -> List[StudyResult]:
    kernels = _kernels(run)
    suite = verify_service.kernel_invariant_suite(
        kernels.params, kernels.config, run.kernel_samples, run.adjoint_samples, run.seed
    )
    reference = kernels.reference_solution(run.source_density())
    residual = verify_service.manufactured_residual_study(
        reference, count=run.residual_points, step=run.residual_step, seed=run.seed
    )

    if run.points_file:
        points = repo.read_points_csv(Path(run.points_file))
    else:
        points = np.array([[r, 0.0, 0.0] for r in (5.0, 8.0)] + [[0.0, r, 0.0] for r in (5.0, 8.0)])
    with LogTimer("kernel_batch", points=len(points)):
        u, u_err = reference.velocity(points)
        exterior = ~run.source_density().contains(points)
        pi = np.full(len(points), np.nan)
        if np.any(exterior):
            pi[exterior] = reference.pressure(points[exterior])
    repo.write_csv(
        "kernel_values.csv",
        ["x1", "x2", "x3", "u1", "u2", "u3", "u_error", "pressure"],
        [
            {"x1": p[0], "x2": p[1], "x3": p[2], "u1": v[0], "u2": v[1], "u3": v[2], "u_error": e, "pressure": q}
            for p, v, e, q in zip(points, u, u_err, pi)
        ],
    )

    for study in (suite, residual):
        write_study(repo, study)
    return [suite, residual]


# ============================================================================
# DECAY
# ============================================================================

@command("decay", help="decay exponents of u_ref and pi_ref + c0, sphere-integral scaling")
def run_decay(run: RunConfig, repo: ArtifactRepository) -> List[StudyResult]:
    reference = _kernels(run).reference_solution(run.source_density())
    study = verify_service.decay_studies(run, reference)
    write_study(repo, study)
    return [study]


# ============================================================================
# SOLVE
# ============================================================================

@command("solve", help="one truncated solve with VTK export")
def run_solve(run: RunConfig, repo: ArtifactRepository) -> List[StudyResult]:
    kernels = _kernels(run)
    source = run.source_density()
    if run.r_outer <= source.outer_extent:
        raise InvalidInputError("r_outer must enclose the source support", {"r_outer": run.r_outer})

    mesh = mesh_service.build_shell_mesh(run.r_outer, run.angular_level, run.radial_layers, run.grading, run.r_inner)
    mesh_service.validate(mesh)
    system = fem_service.assemble(mesh, kernels.params, run.use_discrete_normal)
    space = system.space

    u_nodes, _ = kernels.apply_volume(source, space.nodes)
    reference = interpolate_values(space, u_nodes)
    lift = np.zeros_like(reference)
    lift[system.inner_dofs] = reference[system.inner_dofs]
    load = fem_service.load_vector(space, source.evaluate)
    result = fem_service.solve(system, lift, load, method=run.solver, rtol=run.solver_rtol)

    error = fem_service.weighted_norm(system, reference - result.V)
    natural = fem_service.natural_bc_residual(system, result, load)
    divergence = fem_service.divergence_residual(system, result.V)
    traction = fem_service.artificial_traction(system, result.V, result.P)

    nv = mesh.n_vertices
    repo.write_solution_vtk("solution.vtk", mesh, nodal_values(space, result.V)[:nv], result.P)
    n = space.n_nodes
    repo.write_csv(
        "coefficients.csv",
        ["kind", "index", "node", "component", "value"],
        [{"kind": "velocity", "index": i, "node": i % n, "component": i // n, "value": v} for i, v in enumerate(result.V)]
        + [{"kind": "pressure", "index": i, "node": i, "component": "", "value": p} for i, p in enumerate(result.P)],
    )
    stats = {
        "method": result.method,
        "velocity_dofs": result.velocity_dofs,
        "pressure_dofs": result.pressure_dofs,
        "residual": result.residual,
        "pressure_pinned": result.pressure_pinned,
        "iterations": result.iterations,
    }
    repo.write_json("solver_stats.json", stats)

    tolerance = 10.0 * run.solver_rtol
    study = StudyResult(
        name="solve",
        criteria=[
            Criterion.within("solver_residual", result.residual, upper=tolerance),
            Criterion.within("natural_bc_residual", natural, upper=1e-6),
            Criterion.within("divergence_residual", divergence, upper=1e-6),
        ],
        summary={**stats, "error_weighted_norm": error, "traction_norm": traction.norm, "r_outer": run.r_outer},
        rows=[{"r_outer": run.r_outer, "error": error, "traction_norm": traction.norm, **stats}],
        columns=["r_outer", "error", "traction_norm", "method", "velocity_dofs", "pressure_dofs", "residual", "pressure_pinned"],
    )
    write_study(repo, study)
    return [study]


# ============================================================================
# DISCRETE STABILITY
# ============================================================================

@command("infsup", help="discrete inf-sup constants and the energy identity")
def run_infsup(run: RunConfig, repo: ArtifactRepository) -> List[StudyResult]:
    params = run.flow_params()
    studies = [verify_service.infsup_study(run, params), verify_service.energy_identity_study(run, params)]
    for study in studies:
        write_study(repo, study)
    return studies


# ============================================================================
# TRUNCATION / TRACTION
# ============================================================================

@command("truncation", help="truncation error against the outer radius")
def run_truncation(run: RunConfig, repo: ArtifactRepository) -> List[StudyResult]:
    study = verify_service.truncation_result(verify_service.truncation_study(run, _kernels(run)))
    write_study(repo, study)
    return [study]


@command("traction", help="decay of the artificial traction of the exact fields")
def run_traction(run: RunConfig, repo: ArtifactRepository) -> List[StudyResult]:
    reference = _kernels(run).reference_solution(run.source_density())
    study = verify_service.traction_decay_study(
        reference, run.traction_radii, run.traction_theta_order, run.traction_phi_order, run.pressure_offset
    )
    write_study(repo, study)
    return [study]


# ============================================================================
# REPORT
# ============================================================================

@command("report", help="aggregate every study in the output directory")
def run_report(run: RunConfig, repo: ArtifactRepository) -> List[StudyResult]:
    studies = [StudyResult.model_validate(doc) for doc in repo.study_documents()]
    report = verify_service.build_report(studies)
    repo.write_json("report.json", report.model_dump())
    repo.write_text("report.md", verify_service.report_markdown(report))
    logger.info("report_written", status=report.status, failing=len(report.failing))
    return studies
