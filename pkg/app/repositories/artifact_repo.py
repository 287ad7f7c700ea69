import csv
import io
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import meshio
import numpy as np

from app.core.exceptions import InvalidInputError
from app.models.mesh import ShellMesh
from app.services.mesh_service import layer_radii
from app_logging.logger import get_logger

logger = get_logger(__name__)

MESH_HEADER = "shellmesh v1"
_TAGS = {"Inner": 0, "Outer": 1}
_TAG_NAMES = {0: "Inner", 1: "Outer"}


def _clean(value: Any) -> Any:
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


class ArtifactRepository:
    """
    Artifact Repository.
    Writes every study artifact under one output directory.

    All writes go through a temp file in the target directory followed by
    os.replace, so readers never see a partial file and reruns overwrite.
    """

    def __init__(self, output_dir: os.PathLike):
        self.output_dir = Path(output_dir)

    def path(self, name: str) -> Path:
        return self.output_dir / name

    def _atomic_write(self, name: str, text: str) -> Path:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        target = self.path(name)
        fd, tmp = tempfile.mkstemp(dir=self.output_dir, prefix=f".{name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
                handle.write(text)
            os.replace(tmp, target)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        logger.debug("artifact_written", path=str(target))
        return target

    # ------------------------------------------------------------------
    # tables and documents
    # ------------------------------------------------------------------

    def write_json(self, name: str, document: Dict[str, Any]) -> Path:
        text = json.dumps(_clean(document), sort_keys=True, indent=2, allow_nan=False)
        return self._atomic_write(name, text + "\n")

    def read_json(self, name: str) -> Dict[str, Any]:
        with open(self.path(name), encoding="utf-8") as handle:
            return json.load(handle)

    def write_csv(self, name: str, columns: Sequence[str], rows: Iterable[Dict[str, Any]]) -> Path:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow(["" if row.get(col) is None else _clean(row.get(col)) for col in columns])
        return self._atomic_write(name, buffer.getvalue())

    def write_text(self, name: str, text: str) -> Path:
        return self._atomic_write(name, text)

    def study_documents(self) -> List[Dict[str, Any]]:
        """All study_*.json documents in the output directory, by file name."""
        if not self.output_dir.exists():
            return []
        return [self.read_json(p.name) for p in sorted(self.output_dir.glob("study_*.json"))]

    # ------------------------------------------------------------------
    # meshes
    # ------------------------------------------------------------------

    def write_mesh(self, name: str, mesh: ShellMesh) -> Path:
        lines = [
            MESH_HEADER,
            f"meta {mesh.r_inner!r} {mesh.r_outer!r} {mesh.angular_level} {mesh.radial_layers} {mesh.grading!r}",
            f"vertices {mesh.n_vertices}",
        ]
        lines += [f"{x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
        lines.append(f"tets {mesh.n_tets}")
        lines += [" ".join(str(i) for i in tet) for tet in mesh.tets.tolist()]
        lines.append(f"facets {len(mesh.facets)}")
        lines += [
            f"{a} {b} {c} {_TAG_NAMES[int(tag)]}"
            for (a, b, c), tag in zip(mesh.facets.tolist(), mesh.facet_tags.tolist())
        ]
        return self._atomic_write(name, "\n".join(lines) + "\n")

    def read_mesh(self, path: os.PathLike) -> ShellMesh:
        with open(path, encoding="utf-8") as handle:
            lines = [line.strip() for line in handle]
        cursor = 0

        def fail(message: str) -> InvalidInputError:
            return InvalidInputError(f"{path}: line {cursor + 1}: {message}", {"line": cursor + 1})

        def take() -> List[str]:
            nonlocal cursor
            if cursor >= len(lines):
                raise fail("unexpected end of file")
            parts = lines[cursor].split()
            cursor += 1
            return parts

        def section(keyword: str) -> int:
            parts = take()
            if len(parts) != 2 or parts[0] != keyword:
                raise fail(f"expected '{keyword} <count>'")
            return int(parts[1])

        if take() != MESH_HEADER.split():
            cursor = 0
            raise fail(f"missing '{MESH_HEADER}' header")
        meta = take()
        if len(meta) != 6 or meta[0] != "meta":
            raise fail("expected 'meta r_inner r_outer angular_level radial_layers grading'")
        try:
            r_inner, r_outer = float(meta[1]), float(meta[2])
            level, layers, grading = int(meta[3]), int(meta[4]), float(meta[5])

            vertices = np.array([[float(v) for v in take()] for _ in range(section("vertices"))]).reshape(-1, 3)
            tets = np.array([[int(v) for v in take()] for _ in range(section("tets"))], dtype=np.int64).reshape(-1, 4)
            n_facets = section("facets")
            facets, tags = [], []
            for _ in range(n_facets):
                parts = take()
                if len(parts) != 4 or parts[3] not in _TAGS:
                    raise fail("expected 'a b c Inner|Outer'")
                facets.append([int(v) for v in parts[:3]])
                tags.append(_TAGS[parts[3]])
        except ValueError as exc:
            raise fail(str(exc)) from exc

        return ShellMesh(
            vertices=vertices,
            tets=tets,
            facets=np.asarray(facets, dtype=np.int64).reshape(-1, 3),
            facet_tags=np.asarray(tags, dtype=np.int8),
            r_inner=r_inner,
            r_outer=r_outer,
            angular_level=level,
            radial_layers=layers,
            grading=grading,
            layer_radii=tuple(float(r) for r in layer_radii(r_inner, r_outer, layers, grading)),
        )

    def _write_vtk(self, name: str, grid: meshio.Mesh) -> Path:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=self.output_dir, prefix=f".{name}.", suffix=".vtk")
        os.close(fd)
        try:
            meshio.write(tmp, grid, file_format="vtk", binary=False)
            os.replace(tmp, self.path(name))
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        return self.path(name)

    def write_mesh_vtk(self, name: str, mesh: ShellMesh) -> Path:
        grid = meshio.Mesh(mesh.vertices, [("tetra", mesh.tets)])
        return self._write_vtk(name, grid)

    def write_solution_vtk(self, name: str, mesh: ShellMesh, velocity: np.ndarray, pressure: np.ndarray) -> Path:
        """Vertex values of a P2/P1 solution; velocity (n_vertices, 3)."""
        grid = meshio.Mesh(
            mesh.vertices,
            [("tetra", mesh.tets)],
            point_data={"velocity": np.asarray(velocity, dtype=float), "pressure": np.asarray(pressure, dtype=float)},
        )
        return self._write_vtk(name, grid)

    # ------------------------------------------------------------------
    # point lists
    # ------------------------------------------------------------------

    def read_points_csv(self, path: os.PathLike, expected: Optional[int] = None) -> np.ndarray:
        """x,y,z rows (an optional header line is skipped)."""
        points = []
        with open(path, encoding="utf-8", newline="") as handle:
            for lineno, row in enumerate(csv.reader(handle), start=1):
                if not row or row[0].startswith("#"):
                    continue
                try:
                    points.append([float(v) for v in row[:3]])
                except ValueError:
                    if lineno == 1:
                        continue
                    raise InvalidInputError(f"{path}: line {lineno}: expected x,y,z", {"line": lineno})
        array = np.asarray(points, dtype=float).reshape(-1, 3)
        if expected is not None and array.shape[0] != expected:
            raise InvalidInputError("unexpected point count", {"expected": expected, "found": int(array.shape[0])})
        return array
