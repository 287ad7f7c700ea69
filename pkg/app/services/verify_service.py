"""
Verification Service
Scientific studies over the kernel and FEM layers and the report built from them.

Every study returns a StudyResult whose criteria decide the exit status.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from app.core.exceptions import InvalidInputError
from app.core.quadrature import gauss_on, unit_sphere_rule
from app.schemas.kernel import KernelConfig, SourceDensity
from app.schemas.params import DecayEnvelope, FlowParams
from app.schemas.run_config import RunConfig
from app.schemas.study import (
    Criterion,
    DecayFit,
    Report,
    SolverStats,
    StudyResult,
    TruncationRow,
    TruncationStudy,
)
from app.services import fem_service, mesh_service
from app.services.fem_space import interpolate, interpolate_values
from app.services.kernel_service import (
    KernelService,
    ReferenceSolution,
    heat_kernel,
    oseen_tensor,
    rotation,
)
from app.services.weight_service import envelope_eval, fa_scaling_fit, fit_power_law
from app_logging.logger import LogTimer, bind_context, clear_context, get_logger

logger = get_logger(__name__)

CONTROL_SHIFT_LIMIT = 0.30
MIN_C0_SAMPLES = 8


# ============================================================================
# KERNEL INVARIANTS
# ============================================================================

def lambda_by_convolution(z: np.ndarray, t: float, n_panels: int = 12, n_radial: int = 20, n_angle: int = 64):
    """
    Lambda(z, t) from its defining integral,
        K delta_jk + int (4 pi |w|)^-1 d_j d_k K(z - w, t) dw,
    in spherical coordinates around w = 0 (the r^2 Jacobian removes 1/|w|).
    """
    z = np.asarray(z, dtype=float)
    r_max = float(np.linalg.norm(z)) + 14.0 * math.sqrt(t)
    edges = np.linspace(0.0, r_max, n_panels + 1)
    radii, w_r = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        r, w = gauss_on(float(a), float(b), n_radial)
        radii.append(r)
        w_r.append(w)
    r = np.concatenate(radii)
    w_r = np.concatenate(w_r)
    dirs, w_dir = unit_sphere_rule(n_angle, 2 * n_angle)

    lam = heat_kernel(z, t) * np.eye(3)
    for ri, wi in zip(r, w_r):
        v = z[None, :] - ri * dirs
        k = heat_kernel(v, t)
        hess = k[:, None, None] * (np.einsum("ni,nj->nij", v, v) / (4.0 * t * t) - np.eye(3)[None] / (2.0 * t))
        lam += wi * ri / (4.0 * math.pi) * np.einsum("n,nij->ij", w_dir, hess)
    return lam


def _column_divergence(z: np.ndarray, t: float, small_arg: float, h: float = 1e-3) -> float:
    """max_k |sum_j d_j Lambda_jk| by fourth-order differences, relative to |Lambda|/|z|."""
    offsets = np.array([-2.0, -1.0, 1.0, 2.0])
    weights = np.array([1.0, -8.0, 8.0, -1.0]) / 12.0
    div = np.zeros(3)
    for j in range(3):
        pts = z[None, :] + h * offsets[:, None] * np.eye(3)[j][None, :]
        lam = oseen_tensor(pts, t, small_arg)
        div += np.einsum("s,sk->k", weights, lam[:, j, :]) / h
    scale = np.linalg.norm(oseen_tensor(z, t, small_arg)) / max(np.linalg.norm(z), math.sqrt(t))
    return float(np.max(np.abs(div)) / scale)


def kernel_invariant_suite(
        params: FlowParams,
        config: Optional[KernelConfig] = None,
        samples: int = 20,
        adjoint_samples: int = 10,
        seed: int = 1234,
) -> StudyResult:
    """Symmetry, trace, divergence, convolution, group law and the adjoint identity."""
    config = config or KernelConfig()
    rng = np.random.default_rng(seed)
    rows: List[Dict[str, float]] = []

    with LogTimer("kernel_invariants", samples=samples):
        worst = {"convolution": 0.0, "trace": 0.0, "symmetry": 0.0, "divergence": 0.0}
        for i in range(samples):
            z = rng.uniform(-1.5, 1.5, size=3)
            t = float(10.0 ** rng.uniform(-1.3, 0.3))
            lam = oseen_tensor(z, t, config.small_arg)
            norm = np.linalg.norm(lam)
            conv = np.linalg.norm(lam - lambda_by_convolution(z, t)) / norm
            trace = abs(np.trace(lam) - 2.0 * heat_kernel(z, t)) / abs(2.0 * heat_kernel(z, t))
            sym = np.linalg.norm(lam - lam.T) / norm
            div = _column_divergence(z, t, config.small_arg)
            for key, value in zip(worst, (conv, trace, sym, div)):
                worst[key] = max(worst[key], float(value))
            rows.append({
                "check": "lambda", "index": i, "t": t, "z1": z[0], "z2": z[1], "z3": z[2],
                "convolution": conv, "trace": trace, "divergence": div,
            })

        group = 0.0
        for _ in range(samples):
            a, b = rng.uniform(-5.0, 5.0, size=2)
            group = max(group, float(np.linalg.norm(
                rotation(a + b, params.rho) - rotation(a, params.rho) @ rotation(b, params.rho)
            )))

        kernels = KernelService(params, config)
        halved = KernelService(params, config.halved())
        adjoint, halving = 0.0, 0.0
        for i in range(adjoint_samples):
            x, y = _shell_points(rng, 2, 1.5, 4.0)
            a, b = rng.standard_normal(3), rng.standard_normal(3)
            z_xy, err = kernels.fundamental_tensor(x, y)
            z_tilde, _ = kernels.fundamental_tensor(y, x, tilde=True)
            lhs, rhs = a @ z_xy @ b, b @ z_tilde @ a
            rel = abs(lhs - rhs) / (np.linalg.norm(z_xy) * np.linalg.norm(a) * np.linalg.norm(b))
            adjoint = max(adjoint, float(rel))
            z_half, _ = halved.fundamental_tensor(x, y)
            shift = float(np.max(np.abs(z_half - z_xy)) / max(err, 1e-300))
            halving = max(halving, shift)
            rows.append({"check": "adjoint", "index": i, "relative_error": rel, "halving_ratio": shift})

    criteria = [
        Criterion.within("lambda_convolution_rel_error", worst["convolution"], upper=1e-6),
        Criterion.within("lambda_trace_rel_error", worst["trace"], upper=1e-10),
        Criterion.within("lambda_symmetry", worst["symmetry"], upper=1e-14),
        Criterion.within("lambda_column_divergence", worst["divergence"], upper=1e-6),
        Criterion.within("rotation_group_law", group, upper=1e-12),
        Criterion.within("adjoint_identity_rel_error", adjoint, upper=1e-6),
        Criterion.within("tolerance_halving_within_estimate", halving, upper=1.0),
    ]
    return StudyResult(
        name="kernels",
        criteria=criteria,
        summary={"samples": samples, "adjoint_samples": adjoint_samples},
        rows=rows,
        columns=[
            "check", "index", "t", "z1", "z2", "z3", "convolution", "trace", "divergence", "relative_error", "halving_ratio",
        ],
    )


def _shell_points(rng: np.random.Generator, count: int, r_min: float, r_max: float) -> np.ndarray:
    dirs = rng.standard_normal((count, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return dirs * rng.uniform(r_min, r_max, size=(count, 1))


def manufactured_residual_study(
        reference: ReferenceSolution,
        points: Optional[np.ndarray] = None,
        count: int = 5,
        step: float = 0.1,
        seed: int = 1234,
) -> StudyResult:
    """L u_ref + grad pi_ref - f and div u_ref at exterior points."""
    source = reference.source
    if points is None:
        rng = np.random.default_rng(seed)
        reach = source.outer_extent
        points = _shell_points(rng, count, reach + 0.5, reach + 2.0)
        points = points[np.linalg.norm(points - source.center_array, axis=1) > source.support_radius + 3 * step]
    if np.any(np.linalg.norm(points - source.center_array, axis=1) <= source.support_radius + 2 * step):
        raise InvalidInputError("residual points must keep their stencils outside the support")

    with LogTimer("manufactured_residual", points=len(points)):
        residual, scale = reference.pde_residual(points, h=step)
        div, grad_scale = reference.divergence(points, h=step)

    pde_rel = np.linalg.norm(residual, axis=1) / scale
    div_rel = np.abs(div) / grad_scale
    rows = [
        {"x1": p[0], "x2": p[1], "x3": p[2], "pde_residual": r, "divergence": d}
        for p, r, d in zip(points, pde_rel, div_rel)
    ]
    return StudyResult(
        name="residual",
        criteria=[
            Criterion.within("pde_residual_rel", float(np.max(pde_rel)), upper=1e-3),
            Criterion.within("divergence_rel", float(np.max(div_rel)), upper=1e-3),
            Criterion.within("residual_points", float(len(points)), lower=5.0),
        ],
        rows=rows,
        columns=["x1", "x2", "x3", "pde_residual", "divergence"],
    )


# ============================================================================
# DECAY
# ============================================================================

def estimate_c0(samples: Sequence[float]) -> float:
    """c0 = -median(pi samples) on a far shell."""
    values = np.asarray(samples, dtype=float).ravel()
    if values.size < MIN_C0_SAMPLES:
        raise InvalidInputError("c0 estimate needs at least 8 samples", {"samples": int(values.size)})
    return float(-np.median(values))


def decay_study(
        field: Callable[[np.ndarray], np.ndarray],
        rays: Sequence[Sequence[float]],
        radii: Sequence[float],
        quantity: str,
        envelope: Optional[DecayEnvelope] = None,
        origin: Optional[Sequence[float]] = None,
) -> List[DecayFit]:
    """
    Fit |field| ~ R^a along rays origin + R * direction; optionally report
    the envelope-ratio spread.
    """
    fits = []
    radii = np.asarray(radii, dtype=float)
    base = np.zeros(3) if origin is None else np.asarray(origin, dtype=float)
    for ray in rays:
        direction = np.asarray(ray, dtype=float)
        direction = direction / np.linalg.norm(direction)
        points = base[None, :] + radii[:, None] * direction[None, :]
        values = np.asarray(field(points), dtype=float)
        magnitude = np.linalg.norm(values.reshape(len(radii), -1), axis=1)
        spread = None
        if envelope is not None:
            ratio = magnitude / envelope_eval(envelope, points - base[None, :])
            spread = float(ratio.max() / ratio.min())
        label = "ray(" + ",".join(f"{c:g}" for c in direction) + ")"
        if np.any(base != 0.0):
            label += "@(" + ",".join(f"{c:g}" for c in base) + ")"
        fit = fit_power_law(radii, magnitude, quantity=quantity, sampling=label, envelope_ratio_spread=spread)
        logger.info("decay_fit", quantity=quantity, ray=label, exponent=fit.exponent, residual=fit.residual_rms)
        fits.append(fit)
    return fits


def decay_studies(run: RunConfig, reference: ReferenceSolution) -> StudyResult:
    """
    Velocity and pressure decay plus the c0 check and the sphere-integral scaling.

    Rays start at the source centre. It lies on the rotation axis, so the
    whole-space fields are invariant under shifts along e1 and the fits see
    the far field of a centred source. pi_ref = P(f) vanishes at infinity,
    so c0 = -pressure_offset; the shell median is reported next to it.
    """
    env = DecayEnvelope.velocity()
    centre = np.asarray(run.source_center, dtype=float)
    c0 = 0.0 - run.pressure_offset
    bind_context(study="decay")
    try:
        downstream, transverse = decay_study(
            lambda pts: reference.velocity(pts)[0],
            [(1.0, 0.0, 0.0), (0.0, 1.0, 0.0)],
            run.decay_radii,
            quantity="velocity",
            envelope=env,
            origin=centre,
        )

        dirs, _ = unit_sphere_rule(8, 16)
        shell_pressure = reference.pressure(run.c0_shell_radius * np.asarray(dirs))
        c0_estimate = estimate_c0(shell_pressure + run.pressure_offset)
        (pressure,) = decay_study(
            lambda pts: reference.pressure(pts) + run.pressure_offset + c0,
            [(0.0, 1.0, 0.0)],
            run.decay_radii,
            quantity="pressure_plus_c0",
            origin=centre,
        )

        scaling = [fa_scaling_fit(b, run.scaling_radii) for b in run.scaling_exponents]
    finally:
        clear_context()

    shell_max = float(np.max(np.abs(shell_pressure)))
    criteria = [
        Criterion.within("velocity_downstream_exponent", downstream.exponent, -1.25, -0.75, downstream.reliable),
        Criterion.within("velocity_transverse_exponent", transverse.exponent, -2.25, -1.75, transverse.reliable),
        Criterion.within("pressure_exponent", pressure.exponent, -2.25, -1.75, pressure.reliable),
        Criterion.within("c0_estimate_deviation", abs(c0_estimate - c0), upper=shell_max),
    ]
    for b, fit in zip(run.scaling_exponents, scaling):
        target = 2.0 - min(1.0, b)
        criteria.append(Criterion.within(f"sphere_integral_B{b:g}_exponent", fit.exponent, target - 0.1, target + 0.1, fit.reliable))

    fits = [downstream, transverse, pressure, *scaling]
    rows = [
        {"quantity": f.quantity, "sampling": f.sampling, "radius": r, "value": v}
        for f in fits for r, v in zip(f.radii, f.values)
    ]
    return StudyResult(
        name="decay",
        criteria=criteria,
        fits=fits,
        summary={
            "c0": c0,
            "c0_estimate": c0_estimate,
            "c0_shell_radius": run.c0_shell_radius,
            "c0_samples": int(shell_pressure.size),
            "ray_origin": [float(c) for c in centre],
        },
        rows=rows,
        columns=["quantity", "sampling", "radius", "value"],
    )


# ============================================================================
# TRUNCATION
# ============================================================================

def _truncation_run(
        radius: float,
        level: int,
        run: RunConfig,
        kernels: KernelService,
        source: SourceDensity,
) -> TruncationRow:
    bind_context(study="truncation", radius=radius, level=level)
    try:
        layers = mesh_service.radial_layers_for(radius, run.base_layers, run.r_inner)
        mesh = mesh_service.build_shell_mesh(radius, level, layers, run.grading, run.r_inner)
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
    finally:
        clear_context()

    logger.info("truncation_run_completed", radius=radius, level=level, error=error)
    return TruncationRow(
        radius=radius,
        angular_level=level,
        radial_layers=layers,
        dofs=result.velocity_dofs + result.pressure_dofs,
        error=error,
        solver=SolverStats(
            method=result.method,
            velocity_dofs=result.velocity_dofs,
            pressure_dofs=result.pressure_dofs,
            residual=result.residual,
            pressure_pinned=result.pressure_pinned,
            iterations=result.iterations,
        ),
    )


def truncation_study(run: RunConfig, kernels: Optional[KernelService] = None) -> TruncationStudy:
    """
    e(R) = |I_h u_ref - V_R|^(R) for each radius plus one finer control run.

    Runs are independent and merged in radius order.
    """
    source = run.source_density()
    kernels = kernels or KernelService(run.flow_params(), run.kernel_config())
    radii = list(run.truncation_radii)
    if min(radii) < 2.0 * run.r_inner:
        raise InvalidInputError("truncation radii must be >= 2 * r_inner")
    control_radius = run.control_radius or max(radii)
    if control_radius not in radii:
        raise InvalidInputError("control_radius must be one of the truncation radii", {"control_radius": control_radius})

    jobs = [(r, run.truncation_level) for r in radii] + [(control_radius, run.truncation_level + 1)]
    with LogTimer("truncation_study", radii=radii, workers=run.study_workers):
        with ThreadPoolExecutor(max_workers=run.study_workers) as pool:
            results = list(pool.map(lambda job: _truncation_run(job[0], job[1], run, kernels, source), jobs))

    rows, control = results[:-1], results[-1]
    base = next(row for row in rows if row.radius == control_radius)
    shift = abs(control.error - base.error) / base.error

    if shift > CONTROL_SHIFT_LIMIT:
        logger.warning("truncation_inconclusive", control_shift=shift)
        return TruncationStudy(rows=rows, control=control, control_shift=shift, status="inconclusive")

    fit = fit_power_law([r.radius for r in rows], [r.error for r in rows], quantity="truncation_error", sampling="shell")
    return TruncationStudy(
        rows=rows, control=control, control_shift=shift, slope=fit.exponent, slope_fit=fit, status="reported"
    )


def truncation_result(study: TruncationStudy) -> StudyResult:
    errors = [row.error for row in study.rows]
    monotone = all(b < a for a, b in zip(errors, errors[1:]))
    criteria = [
        Criterion.within("control_shift", study.control_shift, upper=CONTROL_SHIFT_LIMIT),
        Criterion(name="error_monotone_decreasing", value=None if not errors else float(monotone), passed=monotone),
    ]
    if study.status == "reported":
        criteria.append(Criterion.within("truncation_slope", study.slope, -1.4, -0.7, study.slope_fit.reliable))
    else:
        criteria.append(Criterion(name="truncation_slope", value=None, passed=False, note="inconclusive: discretisation dominates"))

    rows = [
        {
            "radius": row.radius, "angular_level": row.angular_level, "radial_layers": row.radial_layers,
            "dofs": row.dofs, "error": row.error, "residual": row.solver.residual,
            "pressure_pinned": row.solver.pressure_pinned, "control": False,
        }
        for row in study.rows
    ]
    if study.control is not None:
        c = study.control
        rows.append({
            "radius": c.radius, "angular_level": c.angular_level, "radial_layers": c.radial_layers,
            "dofs": c.dofs, "error": c.error, "residual": c.solver.residual,
            "pressure_pinned": c.solver.pressure_pinned, "control": True,
        })
    return StudyResult(
        name="truncation",
        criteria=criteria,
        fits=[study.slope_fit] if study.slope_fit else [],
        summary={"status": study.status, "slope": study.slope, "control_shift": study.control_shift},
        rows=rows,
        columns=["radius", "angular_level", "radial_layers", "dofs", "error", "residual", "pressure_pinned", "control"],
    )


# ============================================================================
# TRACTION
# ============================================================================

def traction_decay_study(
        reference: ReferenceSolution,
        radii: Sequence[float],
        n_theta: int = 16,
        n_phi: int = 16,
        pressure_offset: float = 0.0,
) -> StudyResult:
    """
    ||L_R(u_ref, pi_ref + c0)|| on spheres |x| = R and its three constituent
    surface norms, each fitted against R.

    pi_ref vanishes at infinity, so c0 = -pressure_offset. The gradient
    comes from the kernel's analytic gradient on the same quadrature.
    """
    tau = reference.params.tau
    dirs, weights = unit_sphere_rule(n_theta, n_phi)
    dirs = np.asarray(dirs)
    radii = [float(r) for r in radii]
    c0 = 0.0 - pressure_offset

    totals, grads, pressures, velocities = [], [], [], []
    with LogTimer("traction_decay", radii=radii, points=len(dirs)):
        for R in radii:
            x = R * dirs
            w = R ** 2 * weights
            u, grad = reference.velocity_and_gradient(x)
            pi = reference.pressure(x) + pressure_offset + c0
            damp = 1.0 - x[:, 0] / R
            traction = np.einsum("nij,nj->ni", grad, x) / R - pi[:, None] * x / R + 0.5 * tau * damp[:, None] * u

            totals.append(math.sqrt(float(np.sum(w * np.sum(traction ** 2, axis=1)))))
            grads.append(math.sqrt(float(np.sum(w * np.sum(grad ** 2, axis=(1, 2))))))
            pressures.append(math.sqrt(float(np.sum(w * pi ** 2))))
            velocities.append(math.sqrt(float(np.sum(w * damp ** 2 * np.sum(u ** 2, axis=1)))))

    fits = [
        fit_power_law(radii, totals, quantity="traction_total", sampling="sphere"),
        fit_power_law(radii, grads, quantity="traction_gradient", sampling="sphere"),
        fit_power_law(radii, pressures, quantity="traction_pressure", sampling="sphere"),
        fit_power_law(radii, velocities, quantity="traction_velocity", sampling="sphere"),
    ]
    criteria = [
        Criterion.within("traction_total_slope", fits[0].exponent, -1.3, -0.7, fits[0].reliable),
        Criterion.within("traction_pressure_slope", fits[2].exponent, -1.3, -0.7, fits[2].reliable),
    ]
    rows = [
        {"radius": R, "total": t, "gradient": g, "pressure": p, "velocity": v}
        for R, t, g, p, v in zip(radii, totals, grads, pressures, velocities)
    ]
    return StudyResult(
        name="traction",
        criteria=criteria,
        fits=fits,
        summary={"c0": c0, "gradient_slope": fits[1].exponent, "velocity_slope": fits[3].exponent},
        rows=rows,
        columns=["radius", "total", "gradient", "pressure", "velocity"],
    )


# ============================================================================
# DISCRETE IDENTITIES
# ============================================================================

def _smooth_random_field(rng: np.random.Generator, r_inner: float) -> Callable[[np.ndarray], np.ndarray]:
    """(|x| - r_inner) * (a + C x): vanishes on the obstacle sphere."""
    a = rng.standard_normal(3)
    C = rng.standard_normal((3, 3)) * 0.5

    def field(x: np.ndarray) -> np.ndarray:
        radial = np.linalg.norm(x, axis=1, keepdims=True) - r_inner
        return radial * (a[None, :] + x @ C.T)

    return field


def energy_identity_study(run: RunConfig, params: FlowParams) -> StudyResult:
    """Energy identity, Poincare and boundedness ratios across angular levels."""
    rng = np.random.default_rng(run.seed)
    fields = [_smooth_random_field(rng, run.r_inner) for _ in range(run.energy_samples)]
    rows, worst = [], []
    for level in run.energy_levels:
        mesh = mesh_service.build_shell_mesh(run.r_outer, level, run.radial_layers, run.grading, run.r_inner)
        system = fem_service.assemble(mesh, params, run.use_discrete_normal)
        coeffs = [interpolate(system.space, f) for f in fields]
        energy = [fem_service.energy_identity_residual(system, w) for w in coeffs]
        poincare = [fem_service.poincare_ratio(system, w) for w in coeffs]
        bounded = [fem_service.boundedness_ratio(system, w, v) for w, v in zip(coeffs, coeffs[1:] + coeffs[:1])]
        worst.append(max(energy))
        rows.append({
            "angular_level": level, "energy_residual": max(energy),
            "poincare_ratio": max(poincare), "boundedness_ratio": max(bounded),
        })

    criteria = [Criterion.within("energy_residual_default_mesh", worst[0], upper=0.05)]
    for (lo, hi), (a, b) in zip(zip(run.energy_levels, run.energy_levels[1:]), zip(worst, worst[1:])):
        criteria.append(Criterion.within(f"energy_residual_reduction_{lo}_{hi}", a / b, lower=3.0))
    return StudyResult(
        name="energy",
        criteria=criteria,
        summary={"samples": run.energy_samples},
        rows=rows,
        columns=["angular_level", "energy_residual", "poincare_ratio", "boundedness_ratio"],
    )


def infsup_study(run: RunConfig, params: FlowParams) -> StudyResult:
    """Discrete inf-sup across nested levels, the unstable-pair control and uniqueness."""
    rows, values = [], []
    coarse_system = None
    for level in run.infsup_levels:
        mesh = mesh_service.build_shell_mesh(run.r_outer, level, run.infsup_radial_layers, run.grading, run.r_inner)
        system = fem_service.assemble(mesh, params, run.use_discrete_normal)
        coarse_system = coarse_system or system
        value = fem_service.discrete_infsup(system, method=run.infsup_method, seed=run.seed)
        control = None
        if level in run.negative_control_levels:
            control = fem_service.discrete_infsup(system, pressure="p1_discontinuous", method="dense")
        values.append(value)
        rows.append({
            "angular_level": level, "pressure_dofs": system.space.pressure_dofs,
            "infsup": value, "infsup_p1_discontinuous": control,
        })

    zero = fem_service.solve(coarse_system, np.zeros(coarse_system.space.velocity_dofs), method=run.solver)
    zero_size = float(max(np.max(np.abs(zero.V)), np.max(np.abs(zero.P))))

    criteria = [
        Criterion.within("infsup_positive", min(values), lower=1e-12),
        Criterion.within("infsup_nondegenerate", min(values) / values[0], lower=0.5),
        Criterion.within("zero_data_zero_solution", zero_size, upper=run.solver_rtol),
    ]
    for row in rows:
        if row["infsup_p1_discontinuous"] is not None:
            criteria.append(Criterion.within(
                f"unstable_pair_below_taylor_hood_{row['angular_level']}",
                row["infsup_p1_discontinuous"], upper=row["infsup"],
            ))
    return StudyResult(
        name="infsup",
        criteria=criteria,
        summary={"coarsest": values[0], "smallest": min(values)},
        rows=rows,
        columns=["angular_level", "pressure_dofs", "infsup", "infsup_p1_discontinuous"],
    )


# ============================================================================
# REPORT
# ============================================================================

def build_report(studies: Sequence[StudyResult]) -> Report:
    """PASS iff every criterion of every study passed; EMPTY without studies."""
    if not studies:
        return Report(status="EMPTY")
    failing = [f"{s.name}.{c.name}" for s in studies for c in s.criteria if not c.passed]
    return Report(status="FAIL" if failing else "PASS", studies=list(studies), failing=failing)


def report_markdown(report: Report) -> str:
    lines = ["# Verification report", "", f"Overall status: **{report.status}**", ""]
    for study in report.studies:
        lines += [f"## {study.name}", "", "| criterion | value | bounds | result |", "|---|---|---|---|"]
        for c in study.criteria:
            bounds = f"[{'' if c.lower is None else f'{c.lower:g}'}, {'' if c.upper is None else f'{c.upper:g}'}]"
            value = "n/a" if c.value is None else f"{c.value:.6g}"
            result = "pass" if c.passed else "FAIL"
            note = f" ({c.note})" if c.note else ""
            lines.append(f"| {c.name} | {value} | {bounds} | {result}{note} |")
        for fit in study.fits:
            lines.append(f"\n- fit `{fit.quantity}` on {fit.sampling}: exponent {fit.exponent:.4f}, rms {fit.residual_rms:.3g}")
        lines.append("")
    if report.failing:
        lines += ["## Failing criteria", ""] + [f"- {name}" for name in report.failing]
    return "\n".join(lines) + "\n"
