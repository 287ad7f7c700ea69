from dataclasses import dataclass, field
from enum import Enum as PyEnum
from typing import Tuple

import numpy as np


class FacetTag(str, PyEnum):
    """
    Boundary facet tags.

    INNER: the obstacle sphere |x| = r_inner (normals point to the origin)
    OUTER: the truncating sphere |x| = r_outer (normals point outward)
    """
    INNER = "Inner"
    OUTER = "Outer"


@dataclass(frozen=True)
class ShellMesh:
    """
    Tetrahedral mesh of the shell r_inner < |x| < r_outer.

    Arrays are read-only once built; the mesh is shared freely between threads.
    """
    vertices: np.ndarray            # (nv, 3)
    tets: np.ndarray                # (nt, 4) positively oriented
    facets: np.ndarray              # (nf, 3) ordered so the normal leaves the shell
    facet_tags: np.ndarray          # (nf,) 0 = Inner, 1 = Outer
    r_inner: float
    r_outer: float
    angular_level: int
    radial_layers: int
    grading: float = 1.0
    layer_radii: Tuple[float, ...] = field(default_factory=tuple)

    def __post_init__(self):
        for name in ("vertices", "tets", "facets", "facet_tags"):
            getattr(self, name).setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return int(self.vertices.shape[0])

    @property
    def n_tets(self) -> int:
        return int(self.tets.shape[0])

    def facets_tagged(self, tag: FacetTag) -> np.ndarray:
        code = 0 if tag == FacetTag.INNER else 1
        return self.facets[self.facet_tags == code]

    def tag_code(self, tag: FacetTag) -> int:
        return 0 if tag == FacetTag.INNER else 1
