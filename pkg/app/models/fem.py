from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from app.models.mesh import ShellMesh
from app.schemas.params import FlowParams

# Local P2 edge order inside a tet (node 4 + k sits on TET_EDGES[k])
TET_EDGES = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))
# Local P2 edge order inside a facet (node 3 + k sits on TRI_EDGES[k])
TRI_EDGES = ((0, 1), (0, 2), (1, 2))


@dataclass(frozen=True)
class P2Space:
    """
    Continuous P2 nodes on a shell mesh: mesh vertices first, then edge midpoints.

    Velocity dof of component c at node k is ``c * n_nodes + k``; pressure
    dofs are the mesh vertices (P1).
    """
    mesh: ShellMesh
    edges: np.ndarray           # (ne, 2) sorted vertex pairs
    tet_nodes: np.ndarray       # (nt, 10)
    facet_nodes: np.ndarray     # (nf, 6)
    nodes: np.ndarray           # (n_nodes, 3)

    @property
    def n_nodes(self) -> int:
        return int(self.nodes.shape[0])

    @property
    def velocity_dofs(self) -> int:
        return 3 * self.n_nodes

    @property
    def pressure_dofs(self) -> int:
        return self.mesh.n_vertices

    def component_dofs(self, nodes: np.ndarray) -> np.ndarray:
        """All three velocity dofs of the given nodes, component-major."""
        nodes = np.asarray(nodes, dtype=np.int64)
        return np.concatenate([c * self.n_nodes + nodes for c in range(3)])


@dataclass(frozen=True)
class MixedSystem:
    """
    Assembled saddle-point operators on one shell mesh.

    A   = a_R + delta_R on velocity dofs
    B   = beta_R as (pressure x velocity), so the system is [[A, B^T], [B, 0]]
    K, M, M_gamma: stiffness, velocity mass and Outer-surface mass (velocity sized)
    M_p: P1 pressure mass
    """
    space: P2Space
    params: FlowParams
    A: sp.csr_matrix
    B: sp.csr_matrix
    K: sp.csr_matrix
    M: sp.csr_matrix
    M_gamma: sp.csr_matrix
    M_p: sp.csr_matrix
    inner_dofs: np.ndarray
    use_discrete_normal: bool = False

    @property
    def free_dofs(self) -> np.ndarray:
        mask = np.ones(self.space.velocity_dofs, dtype=bool)
        mask[self.inner_dofs] = False
        return np.flatnonzero(mask)

    @property
    def norm_matrix(self) -> sp.csr_matrix:
        """Gram matrix of (|.|^(R))^2 = |grad w|^2 + (tau/2)|w on Outer|^2."""
        return (self.K + 0.5 * self.params.tau * self.M_gamma).tocsr()


@dataclass(frozen=True)
class SolveResult:
    V: np.ndarray
    P: np.ndarray
    residual: float
    velocity_dofs: int
    pressure_dofs: int
    method: str = "direct"
    pressure_pinned: bool = False
    iterations: Optional[int] = None
    wall_time: float = 0.0
