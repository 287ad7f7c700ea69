"""
Mesh quality schema.
"""

from typing import List

from pydantic import Field

from app.schemas.base import BaseSchema


class MeshQualityReport(BaseSchema):
    """Geometric quality of a validated shell mesh."""
    tets: int
    vertices: int
    inner_facets: int
    outer_facets: int
    min_dihedral_deg: float
    max_dihedral_deg: float
    min_volume: float = Field(..., gt=0)
    total_volume: float
    radius_ratio_bins: List[float]
    radius_ratio_counts: List[int]
