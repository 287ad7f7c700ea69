"""
FEM Service
Taylor-Hood discretisation of the truncated rotating Oseen problem.

Features:
- assembly of a_R + delta_R, beta_R, surface and mass matrices
- Dirichlet lift, saddle-point solve (sparse LU or preconditioned GMRES)
- weighted norm, energy identity, Poincare and boundedness ratios
- artificial traction L_R on the outer sphere and the discrete inf-sup constant
"""

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Literal, Optional, Tuple

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from app.core.exceptions import InvalidInputError, SolverError
from app.core.quadrature import tetrahedron_rule, triangle_rule
from app.models.fem import TRI_EDGES, MixedSystem, P2Space, SolveResult
from app.models.mesh import ShellMesh
from app.schemas.params import FlowParams
from app.services.fem_space import (
    boundary_owners,
    build_p2_space,
    p2_gradients,
    p2_lambda_derivatives,
    p2_values,
    tet_geometry,
)
from app.services.mesh_service import facet_geometry
from app_logging.logger import LogTimer, get_logger
from config.settings import settings

logger = get_logger(__name__)

TET_ORDER = 3       # 27 points, exact through degree 5
TRI_ORDER = 3       # 9 points, exact through degree 5


# ============================================================================
# ELEMENT KERNELS
# ============================================================================

def _pairs(nodes: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    k = nodes.shape[1]
    rows = np.repeat(nodes, k, axis=1).ravel()
    cols = np.tile(nodes, (1, k)).ravel()
    return rows, cols


def _volume_chunk(space: P2Space, params: FlowParams, lo: int, hi: int) -> Dict[str, tuple]:
    """Element matrices for tets [lo, hi) as COO triplets."""
    mesh = space.mesh
    tets = mesh.tets[lo:hi]
    nodes = space.tet_nodes[lo:hi]
    bary, wq = tetrahedron_rule(TET_ORDER)
    phi = p2_values(bary)                                        # (nq, 10)

    grad_lambda, volume = tet_geometry(mesh.vertices, tets)
    grads = p2_gradients(grad_lambda, bary)                      # (nt, nq, 10, 3)
    wdet = 6.0 * volume[:, None] * wq[None, :]                   # (nt, nq)
    xq = np.einsum("qj,tjd->tqd", bary, mesh.vertices[tets])     # (nt, nq, 3)

    stiff = np.einsum("tq,tqad,tqbd->tab", wdet, grads, grads)
    mass = np.einsum("tq,qa,qb->tab", wdet, phi, phi)
    drift = params.tau * np.einsum("tq,qa,tqb->tab", wdet, phi, grads[..., 0])
    swirl = params.rho * np.stack([np.zeros_like(xq[..., 0]), -xq[..., 2], xq[..., 1]], axis=-1)
    transport = -np.einsum("tq,qa,tqd,tqbd->tab", wdet, phi, swirl, grads)

    # beta_R(phi_b e_c, psi_p) = -int d_c phi_b psi_p, psi = P1 hat (= barycentric)
    div = -np.einsum("tq,qp,tqbc->tcpb", wdet, bary, grads)      # (nt, 3, 4, 10)
    pmass = np.einsum("tq,qa,qb->tab", wdet, bary, bary)

    rows, cols = _pairs(nodes)
    prow = np.repeat(tets, 10, axis=1).ravel()
    pcol = np.tile(nodes, (1, 4)).ravel()
    prows, pcols = _pairs(tets)
    return {
        "K": (rows, cols, stiff.ravel()),
        "M": (rows, cols, mass.ravel()),
        "C": (rows, cols, (drift + transport).ravel()),
        "B0": (prow, pcol, div[:, 0].ravel()),
        "B1": (prow, pcol, div[:, 1].ravel()),
        "B2": (prow, pcol, div[:, 2].ravel()),
        "Mp": (prows, pcols, pmass.ravel()),
    }


def _surface_terms(space: P2Space, params: FlowParams, use_discrete_normal: bool):
    """Outer-surface mass and the weighted a_R surface form (scalar n_nodes blocks)."""
    mesh = space.mesh
    outer = mesh.facet_tags == 1
    facets = mesh.facets[outer]
    nodes = space.facet_nodes[outer]
    bary, wq = triangle_rule(TRI_ORDER)
    phi = p2_values(bary, edges=TRI_EDGES)                       # (nq, 6)

    area, normal = facet_geometry(mesh.vertices, facets)
    wdet = 2.0 * area[:, None] * wq[None, :]
    xq = np.einsum("qj,fjd->fqd", bary, mesh.vertices[facets])
    if use_discrete_normal:
        weight = np.repeat(1.0 - normal[:, 0:1], wq.size, axis=1)
    else:
        weight = 1.0 - xq[..., 0] / mesh.r_outer

    plain = np.einsum("fq,qa,qb->fab", wdet, phi, phi)
    weighted = 0.5 * params.tau * np.einsum("fq,fq,qa,qb->fab", wdet, weight, phi, phi)
    rows, cols = _pairs(nodes)
    n = space.n_nodes
    gamma = sp.coo_matrix((plain.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    surface = sp.coo_matrix((weighted.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    return gamma, surface


def _merge(chunks: List[Dict[str, tuple]], key: str, shape: Tuple[int, int]) -> sp.csr_matrix:
    rows = np.concatenate([c[key][0] for c in chunks])
    cols = np.concatenate([c[key][1] for c in chunks])
    vals = np.concatenate([c[key][2] for c in chunks])
    return sp.coo_matrix((vals, (rows, cols)), shape=shape).tocsr()


def _block_diag3(block: sp.spmatrix) -> sp.csr_matrix:
    return sp.kron(sp.identity(3, format="csr"), block, format="csr")


def _chunks(count: int) -> List[Tuple[int, int]]:
    step = settings.ASSEMBLY_CHUNK
    return [(lo, min(lo + step, count)) for lo in range(0, count, step)]


# ============================================================================
# ASSEMBLY
# ============================================================================

def assemble(mesh: ShellMesh, params: FlowParams, use_discrete_normal: bool = False) -> MixedSystem:
    """
    Assemble the mixed system on a validated shell mesh.

    Element chunks are processed in a thread pool; triplets are merged in
    chunk order so the result does not depend on scheduling.
    """
    if not math.isclose(params.r_inner, mesh.r_inner):
        raise InvalidInputError(
            "mesh inner radius differs from the obstacle radius",
            {"mesh": mesh.r_inner, "params": params.r_inner},
        )
    space = build_p2_space(mesh)
    n, n_p = space.n_nodes, space.pressure_dofs

    with LogTimer("assemble", velocity_dofs=space.velocity_dofs, pressure_dofs=n_p):
        ranges = _chunks(mesh.n_tets)
        with ThreadPoolExecutor(max_workers=settings.MAX_THREADS) as pool:
            chunks = list(pool.map(lambda r: _volume_chunk(space, params, *r), ranges))

        K = _merge(chunks, "K", (n, n))
        M = _merge(chunks, "M", (n, n))
        C = _merge(chunks, "C", (n, n))
        B = sp.hstack([_merge(chunks, f"B{c}", (n_p, n)) for c in range(3)], format="csr")
        M_p = _merge(chunks, "Mp", (n_p, n_p))
        gamma, surface = _surface_terms(space, params, use_discrete_normal)

        scalar = (K + C + surface).tocsr()
        rot = params.rho * M
        A = sp.bmat([
            [scalar, None, None],
            [None, scalar, -rot],
            [None, rot, scalar],
        ], format="csr")

    inner_nodes = np.unique(space.facet_nodes[mesh.facet_tags == 0])
    system = MixedSystem(
        space=space,
        params=params,
        A=A,
        B=B,
        K=_block_diag3(K),
        M=_block_diag3(M),
        M_gamma=_block_diag3(gamma),
        M_p=M_p,
        inner_dofs=space.component_dofs(inner_nodes),
        use_discrete_normal=use_discrete_normal,
    )
    logger.info("system_assembled", velocity_dofs=space.velocity_dofs, pressure_dofs=n_p, nnz=int(A.nnz))
    return system


def load_vector(space: P2Space, fn: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """int f . phi_i dx for a vector density fn(points (n, 3)) -> (n, 3)."""
    mesh = space.mesh
    bary, wq = tetrahedron_rule(TET_ORDER)
    phi = p2_values(bary)
    out = np.zeros((3, space.n_nodes))
    for lo, hi in _chunks(mesh.n_tets):
        tets = mesh.tets[lo:hi]
        _, volume = tet_geometry(mesh.vertices, tets)
        xq = np.einsum("qj,tjd->tqd", bary, mesh.vertices[tets]).reshape(-1, 3)
        values = np.asarray(fn(xq), dtype=float).reshape(len(tets), wq.size, 3)
        if not np.any(values):
            continue
        local = np.einsum("tq,qa,tqc->tca", 6.0 * volume[:, None] * wq[None, :], phi, values)
        nodes = space.tet_nodes[lo:hi]
        for c in range(3):
            np.add.at(out[c], nodes.ravel(), local[:, c].ravel())
    return out.ravel()


def dirichlet_lift(system: MixedSystem, b: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """Nodal values of b on the Inner-boundary dofs, zero elsewhere."""
    space = system.space
    n = space.n_nodes
    lift = np.zeros(space.velocity_dofs)
    nodes = system.inner_dofs[: system.inner_dofs.size // 3]
    values = np.asarray(b(space.nodes[nodes]), dtype=float).reshape(-1, 3)
    for c in range(3):
        lift[c * n + nodes] = values[:, c]
    return lift


# ============================================================================
# SOLVE
# ============================================================================

def _reduced_system(system: MixedSystem, lift: np.ndarray, load: np.ndarray, pin: bool):
    free = system.free_dofs
    fixed = system.inner_dofs
    A_ff = system.A[free][:, free]
    A_fg = system.A[free][:, fixed]
    B_f = system.B[:, free]
    B_g = system.B[:, fixed]
    rhs_v = load[free] - A_fg @ lift[fixed]
    rhs_p = -(B_g @ lift[fixed])
    if pin:
        keep = np.arange(1, system.B.shape[0])
        B_f = B_f[keep]
        rhs_p = rhs_p[keep]
    saddle = sp.bmat([[A_ff, B_f.T], [B_f, None]], format="csc")
    return saddle, np.concatenate([rhs_v, rhs_p]), free


def _direct(saddle: sp.csc_matrix, rhs: np.ndarray) -> np.ndarray:
    lu = spla.splu(saddle)
    return lu.solve(rhs)


def _gmres(system: MixedSystem, saddle: sp.csc_matrix, rhs: np.ndarray, free: np.ndarray, rtol: float):
    A_ff = system.A[free][:, free]
    n_v = A_ff.shape[0]
    sym = spla.splu(((A_ff + A_ff.T) * 0.5).tocsc())
    lumped = np.asarray(system.M_p.sum(axis=1)).ravel()

    def apply(x):
        return np.concatenate([sym.solve(x[:n_v]), x[n_v:] / lumped])

    precond = spla.LinearOperator(saddle.shape, matvec=apply)
    history: List[float] = []
    solution, info = spla.gmres(
        saddle,
        rhs,
        rtol=rtol,
        atol=0.0,
        restart=200,
        maxiter=50,
        M=precond,
        callback=history.append,
        callback_type="pr_norm",
    )
    if info != 0:
        raise SolverError(
            "GMRES did not converge",
            {"info": int(info), "residual_history": [float(h) for h in history[-10:]]},
        )
    return solution, len(history)


def solve(
        system: MixedSystem,
        lift: np.ndarray,
        load: Optional[np.ndarray] = None,
        method: Literal["direct", "gmres"] = "direct",
        rtol: float = 1e-8,
) -> SolveResult:
    """
    Solve for V = V~ + lift and P with div(V) = 0 imposed weakly on the total field.

    ``load`` is the assembled right-hand side int F . phi (zeros when omitted).
    """
    n_v = system.space.velocity_dofs
    load = np.zeros(n_v) if load is None else np.asarray(load, dtype=float)
    if lift.shape != (n_v,) or load.shape != (n_v,):
        raise InvalidInputError("lift and load must be velocity-sized", {"velocity_dofs": n_v})

    started = time.perf_counter()
    pinned, iterations = False, None
    with LogTimer("solve", method=method, velocity_dofs=n_v):
        saddle, rhs, free = _reduced_system(system, lift, load, pin=False)
        try:
            if method == "gmres":
                x, iterations = _gmres(system, saddle, rhs, free, rtol)
            else:
                x = _direct(saddle, rhs)
        except RuntimeError as exc:
            logger.warning("saddle_factorization_singular", error=str(exc), action="pin_pressure_dof_0")
            pinned = True
            saddle, rhs, free = _reduced_system(system, lift, load, pin=True)
            try:
                x = _direct(saddle, rhs)
            except RuntimeError as again:
                raise SolverError("singular saddle-point matrix", {"pivot": str(again), "pressure_pinned": True})

    if np.any(rhs):
        residual = float(np.linalg.norm(saddle @ x - rhs)) / float(np.linalg.norm(rhs))
    else:
        residual = float(np.linalg.norm(x))
    if residual > 10.0 * rtol:
        raise SolverError("linear solve residual above tolerance", {"residual": residual, "tolerance": rtol})

    V = lift.copy()
    V[free] += x[: free.size]
    P = np.zeros(system.space.pressure_dofs)
    if pinned:
        P[1:] = x[free.size:]
    else:
        P[:] = x[free.size:]

    result = SolveResult(
        V=V,
        P=P,
        residual=residual,
        velocity_dofs=n_v,
        pressure_dofs=system.space.pressure_dofs,
        method=method,
        pressure_pinned=pinned,
        iterations=iterations,
        wall_time=time.perf_counter() - started,
    )
    logger.info("solve_completed", residual=residual, pressure_pinned=pinned)
    return result


# ============================================================================
# NORMS AND DISCRETE IDENTITIES
# ============================================================================

def weighted_norm(system: MixedSystem, w: np.ndarray) -> float:
    """|w|^(R) = (||grad w||^2 + (tau/2) ||w on the outer sphere||^2)^(1/2)."""
    return float(math.sqrt(max(float(w @ (system.norm_matrix @ w)), 0.0)))


def _zero_inner(system: MixedSystem, w: np.ndarray) -> np.ndarray:
    w = np.array(w, dtype=float)
    w[system.inner_dofs] = 0.0
    return w


def energy_identity_residual(system: MixedSystem, w: np.ndarray) -> float:
    """|w^T A w - (|w|^(R))^2| / (|w|^(R))^2 for w vanishing on the Inner boundary."""
    w = _zero_inner(system, w)
    norm2 = weighted_norm(system, w) ** 2
    if norm2 == 0.0:
        raise InvalidInputError("energy identity needs a nonzero field")
    return abs(float(w @ (system.A @ w)) - norm2) / norm2


def poincare_ratio(system: MixedSystem, w: np.ndarray) -> float:
    """||w||_2 / (R ||grad w||_2 + R^(1/2) ||w on the outer sphere||_2)."""
    w = _zero_inner(system, w)
    R = system.space.mesh.r_outer
    l2 = math.sqrt(float(w @ (system.M @ w)))
    grad = math.sqrt(float(w @ (system.K @ w)))
    trace = math.sqrt(float(w @ (system.M_gamma @ w)))
    return l2 / (R * grad + math.sqrt(R) * trace)


def boundedness_ratio(system: MixedSystem, w: np.ndarray, v: np.ndarray) -> float:
    """|w^T A v| / (|w|^(R) |v|^(R))."""
    w, v = _zero_inner(system, w), _zero_inner(system, v)
    return abs(float(w @ (system.A @ v))) / (weighted_norm(system, w) * weighted_norm(system, v))


def divergence_residual(system: MixedSystem, V: np.ndarray) -> float:
    """max_i |beta_R(V, psi_i)| relative to max_i (|B| |V|)_i."""
    scale = float(np.max(abs(system.B) @ np.abs(V)))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(system.B @ V))) / scale


def natural_bc_residual(system: MixedSystem, result: SolveResult, load: Optional[np.ndarray] = None) -> float:
    """
    Weak residual of the velocity equation on non-Dirichlet dofs.

    For a solve this is int L_R(V, P) . g over the Outer sphere for all
    discrete g, i.e. the natural boundary condition, measured relative to
    the size of A V.
    """
    load = np.zeros(system.space.velocity_dofs) if load is None else load
    free = system.free_dofs
    av = system.A @ result.V
    res = (av + system.B.T @ result.P - load)[free]
    scale = max(float(np.linalg.norm(av[free])), float(np.linalg.norm(load[free])), 1e-300)
    return float(np.linalg.norm(res)) / scale


# ============================================================================
# ARTIFICIAL TRACTION
# ============================================================================

@dataclass(frozen=True)
class Traction:
    """L_R(V, P) on Outer facets: facet means (nf, 3), point values and the surface L2 norm."""
    values: np.ndarray
    points: np.ndarray
    point_values: np.ndarray
    weights: np.ndarray
    norm: float


def artificial_traction(system: MixedSystem, V: np.ndarray, P: np.ndarray) -> Traction:
    """
    L_R(u, pi)_k = sum_j d_j u_k x_j / R - pi x_k / R + (tau/2)(1 - x1/R) u_k
    at Outer-facet quadrature points, gradients taken from the owning tet.
    """
    space = system.space
    mesh = space.mesh
    R, tau = mesh.r_outer, system.params.tau
    outer = mesh.facet_tags == 1
    owners, local = boundary_owners(space)
    owners, local = owners[outer], local[outer]
    facets = mesh.facets[outer]

    tri_bary, wq = triangle_rule(TRI_ORDER)
    nf, nq = facets.shape[0], wq.size
    bary = np.zeros((nf, nq, 4))
    for j in range(3):
        np.put_along_axis(bary, np.repeat(local[:, None, j:j + 1], nq, axis=1), tri_bary[None, :, j:j + 1], axis=2)

    tets = mesh.tets[owners]
    grad_lambda, _ = tet_geometry(mesh.vertices, tets)
    nodes = space.tet_nodes[owners]
    coeff = V.reshape(3, space.n_nodes)[:, nodes]                    # (3, nf, 10)

    flat = bary.reshape(-1, 4)
    phi = p2_values(flat).reshape(nf, nq, 10)
    dphi = p2_lambda_derivatives(flat).reshape(nf, nq, 10, 4)
    grads = np.einsum("fqaj,fjd->fqad", dphi, grad_lambda)

    u = np.einsum("cfa,fqa->fqc", coeff, phi)
    grad_u = np.einsum("cfa,fqad->fqcd", coeff, grads)
    p = np.einsum("fqj,fj->fq", bary, P[tets])
    xq = np.einsum("fqj,fjd->fqd", bary, mesh.vertices[tets])

    values = (
        np.einsum("fqcd,fqd->fqc", grad_u, xq) / R
        - p[..., None] * xq / R
        + 0.5 * tau * (1.0 - xq[..., 0:1] / R) * u
    )
    area, _ = facet_geometry(mesh.vertices, facets)
    weights = 2.0 * area[:, None] * wq[None, :]
    norm = math.sqrt(float(np.sum(weights[..., None] * values ** 2)))
    means = np.einsum("fq,fqc->fc", weights, values) / area[:, None]
    return Traction(values=means, points=xq, point_values=values, weights=weights, norm=norm)


# ============================================================================
# INF-SUP
# ============================================================================

def _discontinuous_pressure(system: MixedSystem) -> Tuple[sp.csr_matrix, sp.csr_matrix]:
    """Divergence block and mass for element-wise P1 pressures (negative control)."""
    space = system.space
    mesh = space.mesh
    n, nt = space.n_nodes, mesh.n_tets
    bary, wq = tetrahedron_rule(TET_ORDER)
    grad_lambda, volume = tet_geometry(mesh.vertices, mesh.tets)
    grads = p2_gradients(grad_lambda, bary)
    wdet = 6.0 * volume[:, None] * wq[None, :]
    div = -np.einsum("tq,qp,tqbc->tcpb", wdet, bary, grads)
    pmass = np.einsum("tq,qa,qb->tab", wdet, bary, bary)

    pdofs = (4 * np.arange(nt)[:, None] + np.arange(4)[None, :])
    prow = np.repeat(pdofs, 10, axis=1).ravel()
    pcol = np.tile(space.tet_nodes, (1, 4)).ravel()
    B = sp.hstack([
        sp.coo_matrix((div[:, c].ravel(), (prow, pcol)), shape=(4 * nt, n)) for c in range(3)
    ], format="csr")
    rows, cols = _pairs(pdofs)
    M_p = sp.coo_matrix((pmass.ravel(), (rows, cols)), shape=(4 * nt, 4 * nt)).tocsr()
    return B, M_p


def discrete_infsup(
        system: MixedSystem,
        pressure: Literal["p1", "p1_discontinuous"] = "p1",
        method: Literal["dense", "lobpcg"] = "dense",
        seed: int = 0,
) -> float:
    """
    Smallest generalised singular value of beta_R between the |.|^(R)
    velocity norm (on fields vanishing on Inner) and the L2 pressure norm:
    sqrt(lambda_min) of  B X^-1 B^T s = lambda M_p s.
    """
    if pressure == "p1":
        B, M_p = system.B, system.M_p
    elif pressure == "p1_discontinuous":
        B, M_p = _discontinuous_pressure(system)
    else:
        raise InvalidInputError("unknown pressure space", {"pressure": pressure})

    free = system.free_dofs
    B_f = B[:, free].tocsr()
    X = system.norm_matrix[free][:, free].tocsc()
    n_p = B_f.shape[0]
    if method == "dense" and n_p > settings.DENSE_EIG_LIMIT:
        logger.warning("infsup_dense_too_large", pressure_dofs=n_p, fallback="lobpcg")
        method = "lobpcg"

    with LogTimer("infsup", pressure=pressure, method=method, pressure_dofs=n_p):
        lu = spla.splu(X)
        if method == "dense":
            bt = B_f.T.tocsc()
            schur = np.zeros((n_p, n_p))
            for lo in range(0, n_p, 256):
                block = bt[:, lo:lo + 256].toarray()
                schur[:, lo:lo + 256] = B_f @ lu.solve(block)
            schur = 0.5 * (schur + schur.T)
            try:
                smallest = sla.eigh(schur, M_p.toarray(), eigvals_only=True, subset_by_index=[0, 0])[0]
            except sla.LinAlgError as exc:
                raise SolverError("inf-sup eigensolve failed", {"error": str(exc)})
        else:
            def schur_apply(S: np.ndarray) -> np.ndarray:
                return B_f @ lu.solve(np.asarray(B_f.T @ S))

            lumped = np.asarray(M_p.sum(axis=1)).ravel()
            op = spla.LinearOperator(
                (n_p, n_p), matvec=lambda s: schur_apply(s.reshape(-1)), matmat=schur_apply,
            )
            precond = spla.LinearOperator(
                (n_p, n_p), matvec=lambda s: s.reshape(-1) / lumped, matmat=lambda S: S / lumped[:, None],
            )
            start = np.random.default_rng(seed).standard_normal((n_p, 4))
            # small problems come back from lobpcg's own dense branch
            values, vectors = spla.lobpcg(op, start, B=M_p, M=precond, largest=False, tol=1e-8, maxiter=500)[:2]
            k = int(np.argmin(values))
            smallest = float(values[k])
            x = vectors[:, k]
            mass_x = M_p @ x
            relative = float(
                np.linalg.norm(schur_apply(x) - smallest * mass_x)
                / max(abs(smallest) * np.linalg.norm(mass_x), 1e-300)
            )
            if relative > 1e-4:
                raise SolverError("lobpcg did not converge", {"relative_residual": relative})

    value = math.sqrt(max(float(smallest), 0.0))
    logger.info("infsup_computed", pressure=pressure, value=value)
    return value
