"""
Mesh Service
Tetrahedral meshes of the spherical shell r_inner < |x| < r_outer.

Construction: icosphere surface -> radial prism layers with geometric
grading -> three tets per prism with conforming diagonals.
"""

import math
from functools import lru_cache
from typing import Dict, Tuple

import numpy as np

from app.core.exceptions import InvalidInputError, MeshValidationError
from app.models.mesh import FacetTag, ShellMesh
from app.schemas.mesh import MeshQualityReport
from app_logging.logger import LogTimer, get_logger

logger = get_logger(__name__)

BOUNDARY_TOLERANCE = 0.02
RADIUS_RATIO_BINS = tuple(np.round(np.linspace(0.0, 1.0, 11), 1))


# ============================================================================
# ICOSPHERE
# ============================================================================

def _icosahedron() -> Tuple[np.ndarray, np.ndarray]:
    phi = (1.0 + math.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=float)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    return verts / np.linalg.norm(verts, axis=1, keepdims=True), faces


def _subdivide(verts: np.ndarray, faces: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """1-to-4 split with new vertices projected onto the unit sphere."""
    points = list(verts)
    midpoint: Dict[Tuple[int, int], int] = {}

    def mid(a: int, b: int) -> int:
        key = (a, b) if a < b else (b, a)
        if key not in midpoint:
            p = verts[a] + verts[b]
            points.append(p / np.linalg.norm(p))
            midpoint[key] = len(points) - 1
        return midpoint[key]

    new_faces = []
    for a, b, c in faces:
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        new_faces.extend([(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)])
    return np.asarray(points), np.asarray(new_faces, dtype=np.int64)


@lru_cache(maxsize=8)
def icosphere(level: int) -> Tuple[np.ndarray, np.ndarray]:
    """Unit-sphere triangulation with outward-oriented faces."""
    if level < 0:
        raise InvalidInputError("angular level must be >= 0", {"angular_level": level})
    verts, faces = _icosahedron()
    for _ in range(level):
        verts, faces = _subdivide(verts, faces)

    tri = verts[faces]
    normal = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    flip = np.einsum("ij,ij->i", normal, tri.mean(axis=1)) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]

    verts.setflags(write=False)
    faces.setflags(write=False)
    return verts, faces


# ============================================================================
# GEOMETRY HELPERS
# ============================================================================

def layer_radii(r_inner: float, r_outer: float, layers: int, grading: float) -> np.ndarray:
    """r_l = r_inner + (r_outer - r_inner)(g^l - 1)/(g^L - 1); uniform when g = 1."""
    frac = np.arange(layers + 1, dtype=float) / layers
    if grading != 1.0:
        frac = (grading ** np.arange(layers + 1, dtype=float) - 1.0) / (grading ** layers - 1.0)
    radii = r_inner + (r_outer - r_inner) * frac
    radii[0], radii[-1] = r_inner, r_outer
    return radii


def tet_volumes(vertices: np.ndarray, tets: np.ndarray) -> np.ndarray:
    p = vertices[tets]
    return np.einsum("ij,ij->i", p[:, 1] - p[:, 0], np.cross(p[:, 2] - p[:, 0], p[:, 3] - p[:, 0])) / 6.0


def facet_geometry(vertices: np.ndarray, facets: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Areas (nf,) and unit normals (nf, 3) following the facet orientation."""
    p = vertices[facets]
    cross = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    norm = np.linalg.norm(cross, axis=1)
    return 0.5 * norm, cross / norm[:, None]


def radial_layers_for(r_outer: float, base_layers: int = 3, r_inner: float = 1.0) -> int:
    """Truncation-study policy: layers grow like 1 + ln(R / r_inner)."""
    if r_outer <= r_inner:
        raise InvalidInputError("r_outer must exceed r_inner", {"r_outer": r_outer})
    return int(math.ceil(base_layers * (1.0 + math.log(r_outer / r_inner))))


# ============================================================================
# CONSTRUCTION
# ============================================================================

def build_shell_mesh(
        r_outer: float,
        angular_level: int,
        radial_layers: int,
        grading: float = 1.3,
        r_inner: float = 1.0,
) -> ShellMesh:
    if r_inner <= 0:
        raise InvalidInputError("r_inner must be positive", {"r_inner": r_inner})
    if r_outer < 2.0 * r_inner:
        raise InvalidInputError("r_outer must be at least 2 * r_inner", {"r_outer": r_outer, "r_inner": r_inner})
    if radial_layers < 1:
        raise InvalidInputError("radial_layers must be >= 1", {"radial_layers": radial_layers})
    if grading < 1.0:
        raise InvalidInputError("grading ratio must be >= 1", {"grading": grading})

    with LogTimer("mesh_build", r_outer=r_outer, angular_level=angular_level, radial_layers=radial_layers):
        unit, faces = icosphere(angular_level)
        n_surf = unit.shape[0]
        radii = layer_radii(r_inner, r_outer, radial_layers, grading)
        vertices = (radii[:, None, None] * unit[None, :, :]).reshape(-1, 3)

        # Sorting prism corners by surface id makes every shared quad pick the
        # same diagonal (lower-id bottom corner to higher-id top corner).
        tri = np.sort(faces, axis=1)
        a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
        blocks = []
        for layer in range(radial_layers):
            lo, hi = layer * n_surf, (layer + 1) * n_surf
            blocks.append(np.stack([
                np.column_stack([a + lo, b + lo, c + lo, c + hi]),
                np.column_stack([a + lo, b + lo, b + hi, c + hi]),
                np.column_stack([a + lo, a + hi, b + hi, c + hi]),
            ], axis=1).reshape(-1, 4))
        tets = np.concatenate(blocks)

        vol = tet_volumes(vertices, tets)
        neg = vol < 0
        tets[neg] = tets[neg][:, [0, 2, 1, 3]]

        inner = faces[:, [0, 2, 1]]
        outer = faces + radial_layers * n_surf
        facets = np.concatenate([inner, outer])
        tags = np.concatenate([np.zeros(len(faces), dtype=np.int8), np.ones(len(faces), dtype=np.int8)])

    mesh = ShellMesh(
        vertices=vertices,
        tets=tets,
        facets=facets,
        facet_tags=tags,
        r_inner=float(r_inner),
        r_outer=float(r_outer),
        angular_level=int(angular_level),
        radial_layers=int(radial_layers),
        grading=float(grading),
        layer_radii=tuple(float(r) for r in radii),
    )
    logger.info("mesh_built", tets=mesh.n_tets, vertices=mesh.n_vertices, facets=int(len(facets)))
    return mesh


def refine(mesh: ShellMesh) -> ShellMesh:
    """Same radial layout, one more angular subdivision level."""
    return build_shell_mesh(mesh.r_outer, mesh.angular_level + 1, mesh.radial_layers, mesh.grading, mesh.r_inner)


# ============================================================================
# VALIDATION
# ============================================================================

def mesh_volume(mesh: ShellMesh) -> float:
    return float(np.sum(tet_volumes(mesh.vertices, mesh.tets)))


def surface_euler_characteristic(mesh: ShellMesh, tag: FacetTag) -> int:
    facets = mesh.facets_tagged(tag)
    edges = np.unique(np.sort(facets[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1), axis=0)
    return int(np.unique(facets).size - edges.shape[0] + facets.shape[0])


def _tet_faces(tets: np.ndarray) -> np.ndarray:
    return np.sort(tets[:, [[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]]].reshape(-1, 3), axis=1)


def _check_boundary(mesh: ShellMesh) -> None:
    faces, counts = np.unique(_tet_faces(mesh.tets), axis=0, return_counts=True)
    if np.any(counts > 2):
        raise MeshValidationError("faces shared by more than two tets", faces=faces[counts > 2][:10].tolist())

    exposed = faces[counts == 1]
    tagged = np.unique(np.sort(mesh.facets, axis=1), axis=0)
    if exposed.shape != tagged.shape or not np.array_equal(exposed, tagged):
        raise MeshValidationError(
            "boundary facets do not match the exposed tet faces",
            exposed=int(exposed.shape[0]),
            tagged=int(tagged.shape[0]),
        )

    for tag, radius in ((FacetTag.INNER, mesh.r_inner), (FacetTag.OUTER, mesh.r_outer)):
        facets = mesh.facets_tagged(tag)
        edges, edge_counts = np.unique(
            np.sort(facets[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1), axis=0, return_counts=True
        )
        if np.any(edge_counts != 2):
            raise MeshValidationError(f"{tag.value} surface is not closed", open_edges=int(np.sum(edge_counts != 2)))

        dist = np.linalg.norm(mesh.vertices[np.unique(facets)], axis=1)
        off = np.abs(dist - radius) > BOUNDARY_TOLERANCE * radius
        if np.any(off):
            raise MeshValidationError(f"{tag.value} vertices off their sphere", count=int(np.sum(off)))

        _, normals = facet_geometry(mesh.vertices, facets)
        outward = np.einsum("ij,ij->i", normals, mesh.vertices[facets].mean(axis=1))
        wrong = outward < 0 if tag == FacetTag.OUTER else outward > 0
        if np.any(wrong):
            raise MeshValidationError(f"{tag.value} facet normals point into the shell", count=int(np.sum(wrong)))


def _dihedral_angles(p: np.ndarray) -> np.ndarray:
    """All six dihedral angles (degrees) per tet from face normals."""
    jac = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]], axis=1)
    inv = np.linalg.inv(jac)
    grads = np.concatenate([-inv.sum(axis=2)[:, None, :], np.transpose(inv, (0, 2, 1))], axis=1)
    unit = grads / np.linalg.norm(grads, axis=2, keepdims=True)
    pairs = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
    cosines = np.stack([np.einsum("ij,ij->i", unit[:, i], unit[:, j]) for i, j in pairs], axis=1)
    return np.degrees(np.pi - np.arccos(np.clip(cosines, -1.0, 1.0)))


def _radius_ratio(p: np.ndarray, volumes: np.ndarray) -> np.ndarray:
    """3 * inradius / circumradius, equal to 1 for the regular tet."""
    face_areas = np.zeros(len(p))
    for i, j, k in ((1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2)):
        face_areas += 0.5 * np.linalg.norm(np.cross(p[:, j] - p[:, i], p[:, k] - p[:, i]), axis=1)
    inradius = 3.0 * volumes / face_areas

    lhs = 2.0 * (p[:, 1:] - p[:, :1])
    rhs = np.sum(p[:, 1:] ** 2, axis=2) - np.sum(p[:, :1] ** 2, axis=2)
    centre = np.linalg.solve(lhs, rhs[:, :, None])[:, :, 0]
    circumradius = np.linalg.norm(centre - p[:, 0], axis=1)
    return 3.0 * inradius / circumradius


def validate(mesh: ShellMesh) -> MeshQualityReport:
    volumes = tet_volumes(mesh.vertices, mesh.tets)
    bad = np.flatnonzero(volumes <= 0.0)
    if bad.size:
        logger.error("mesh_inverted_elements", count=int(bad.size))
        raise MeshValidationError("inverted or degenerate tets", element_ids=bad.tolist())

    _check_boundary(mesh)

    p = mesh.vertices[mesh.tets]
    dihedral = _dihedral_angles(p)
    ratio = _radius_ratio(p, volumes)
    counts, _ = np.histogram(np.clip(ratio, 0.0, 1.0), bins=np.asarray(RADIUS_RATIO_BINS))

    report = MeshQualityReport(
        tets=mesh.n_tets,
        vertices=mesh.n_vertices,
        inner_facets=int(np.sum(mesh.facet_tags == 0)),
        outer_facets=int(np.sum(mesh.facet_tags == 1)),
        min_dihedral_deg=float(dihedral.min()),
        max_dihedral_deg=float(dihedral.max()),
        min_volume=float(volumes.min()),
        total_volume=float(volumes.sum()),
        radius_ratio_bins=list(RADIUS_RATIO_BINS),
        radius_ratio_counts=[int(c) for c in counts],
    )
    logger.info("mesh_validated", min_dihedral=report.min_dihedral_deg, min_volume=report.min_volume)
    return report
