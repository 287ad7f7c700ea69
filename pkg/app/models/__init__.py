from app.models.mesh import FacetTag, ShellMesh
from app.models.fem import TET_EDGES, TRI_EDGES, MixedSystem, P2Space, SolveResult

__all__ = [
    "FacetTag",
    "ShellMesh",
    "TET_EDGES",
    "TRI_EDGES",
    "P2Space",
    "MixedSystem",
    "SolveResult",
]
