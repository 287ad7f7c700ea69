"""
P2 (Taylor-Hood velocity) space on shell meshes: dof map, reference basis
functions in barycentric form, element geometry and nodal interpolation.
"""

from typing import Callable, Dict, Tuple

import numpy as np

from app.models.fem import TET_EDGES, TRI_EDGES, P2Space
from app.models.mesh import ShellMesh
from app_logging.logger import get_logger

logger = get_logger(__name__)


def build_p2_space(mesh: ShellMesh) -> P2Space:
    nv = mesh.n_vertices
    local = np.sort(mesh.tets[:, np.array(TET_EDGES)], axis=2)          # (nt, 6, 2)
    edges, inverse = np.unique(local.reshape(-1, 2), axis=0, return_inverse=True)
    tet_nodes = np.concatenate([mesh.tets, nv + inverse.reshape(-1, 6)], axis=1)

    # Edge lookup by key a * nv + b; unique() sorted the pairs lexicographically.
    keys = edges[:, 0] * nv + edges[:, 1]
    facet_edges = np.sort(mesh.facets[:, np.array(TRI_EDGES)], axis=2)
    facet_keys = facet_edges[..., 0] * nv + facet_edges[..., 1]
    facet_nodes = np.concatenate([mesh.facets, nv + np.searchsorted(keys, facet_keys)], axis=1)

    nodes = np.concatenate([mesh.vertices, 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])])
    for arr in (edges, tet_nodes, facet_nodes, nodes):
        arr.setflags(write=False)

    space = P2Space(mesh=mesh, edges=edges, tet_nodes=tet_nodes, facet_nodes=facet_nodes, nodes=nodes)
    logger.debug("p2_space_built", nodes=space.n_nodes, velocity_dofs=space.velocity_dofs)
    return space


# ============================================================================
# REFERENCE BASIS
# ============================================================================

def p2_values(bary: np.ndarray, edges=TET_EDGES) -> np.ndarray:
    """P2 basis values at barycentric points (nq, k+1) -> (nq, k+1+len(edges))."""
    vertex = bary * (2.0 * bary - 1.0)
    edge = np.stack([4.0 * bary[:, a] * bary[:, b] for a, b in edges], axis=1)
    return np.concatenate([vertex, edge], axis=1)


def p2_lambda_derivatives(bary: np.ndarray, edges=TET_EDGES) -> np.ndarray:
    """d phi_i / d lambda_j at barycentric points -> (nq, n_basis, n_lambda)."""
    nq, nl = bary.shape
    out = np.zeros((nq, nl + len(edges), nl))
    for i in range(nl):
        out[:, i, i] = 4.0 * bary[:, i] - 1.0
    for k, (a, b) in enumerate(edges):
        out[:, nl + k, a] = 4.0 * bary[:, b]
        out[:, nl + k, b] = 4.0 * bary[:, a]
    return out


# ============================================================================
# ELEMENT GEOMETRY
# ============================================================================

def tet_geometry(vertices: np.ndarray, tets: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Barycentric gradients (nt, 4, 3) and volumes (nt,)."""
    p = vertices[tets]
    jac = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]], axis=1)
    det = np.linalg.det(jac)
    inv = np.linalg.inv(jac)
    grads = np.concatenate([-inv.sum(axis=2)[:, None, :], np.transpose(inv, (0, 2, 1))], axis=1)
    return grads, det / 6.0


def p2_gradients(grad_lambda: np.ndarray, bary: np.ndarray) -> np.ndarray:
    """Physical P2 gradients (nt, nq, 10, 3)."""
    return np.einsum("qij,tjd->tqid", p2_lambda_derivatives(bary), grad_lambda)


def boundary_owners(space: P2Space) -> Tuple[np.ndarray, np.ndarray]:
    """
    Owning tet of every boundary facet and the local index (0..3) of each
    facet vertex inside that tet.
    """
    mesh = space.mesh
    owner: Dict[Tuple[int, int, int], int] = {}
    faces = np.sort(mesh.tets[:, [[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]]], axis=2)
    wanted = {tuple(f) for f in np.sort(mesh.facets, axis=1).tolist()}
    for t, quad in enumerate(faces.tolist()):
        for face in quad:
            key = tuple(face)
            if key in wanted:
                owner[key] = t

    tets = np.array([owner[tuple(f)] for f in np.sort(mesh.facets, axis=1).tolist()], dtype=np.int64)
    local = np.argmax(mesh.tets[tets][:, None, :] == mesh.facets[:, :, None], axis=2)
    return tets, local


# ============================================================================
# INTERPOLATION
# ============================================================================

def interpolate(space: P2Space, fn: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """Nodal P2 interpolant of a vector field fn(points (n, 3)) -> (n, 3)."""
    values = np.asarray(fn(space.nodes), dtype=float).reshape(space.n_nodes, 3)
    return values.T.ravel().copy()


def interpolate_values(space: P2Space, values: np.ndarray) -> np.ndarray:
    """Coefficient vector from node values (n_nodes, 3)."""
    return np.asarray(values, dtype=float).reshape(space.n_nodes, 3).T.ravel().copy()


def nodal_values(space: P2Space, coeffs: np.ndarray) -> np.ndarray:
    """Inverse of interpolate_values: (n_nodes, 3)."""
    return np.asarray(coeffs).reshape(3, space.n_nodes).T
