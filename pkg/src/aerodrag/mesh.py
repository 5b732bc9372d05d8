"""STL ingestion and watertight/manifold feasibility checks.

Meshes are immutable triangle soups backed by numpy arrays. ``parse_stl``
returns the raw soup (three vertex slots per facet); ``merge_vertices``
welds it into an indexed mesh that the edge-topology checks can use.

Surface self-intersection is not detected here; the feasibility report only
covers boundary edges, non-manifold edges, degenerate faces and winding.
"""

from __future__ import annotations

import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

STL_HEADER_BYTES = 80
STL_RECORD = np.dtype(
    [("normal", "<f4", (3,)), ("vertices", "<f4", (3, 3)), ("attr", "<u2")]
)
assert STL_RECORD.itemsize == 50

DEFAULT_MERGE_EPSILON = 1e-6


class StlError(ValueError):
    pass


class TruncatedBinary(StlError):
    pass


class MalformedAscii(StlError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class EmptyMesh(StlError):
    pass


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64
    face_normals: np.ndarray = field(default=None)  # (F, 3), unit or zero
    # faces removed by merge_vertices because they collapsed
    dropped_degenerate: int = 0
    # raw per-facet normal and attribute words from a binary STL, kept so the
    # file can be written back unchanged
    stl_normals: np.ndarray | None = None
    stl_attributes: np.ndarray | None = None

    def __post_init__(self):
        vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(vertices)):
            raise ValueError("mesh vertices must be finite")
        if faces.size and (faces.min() < 0 or faces.max() >= len(vertices)):
            raise ValueError("face index out of range")
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "faces", faces)
        if self.face_normals is None:
            object.__setattr__(self, "face_normals", compute_face_normals(vertices, faces))
        for arr in (self.vertices, self.faces, self.face_normals):
            arr.flags.writeable = False

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def triangles(self) -> np.ndarray:
        """(F, 3, 3) array of corner coordinates."""
        return self.vertices[self.faces]


@dataclass(frozen=True)
class FeasibilityReport:
    is_watertight: bool
    boundary_edge_count: int
    non_manifold_edge_count: int
    degenerate_face_count: int
    is_consistently_oriented: bool
    checks_self_intersection: bool = False

    def as_dict(self) -> dict:
        return {
            "is_watertight": self.is_watertight,
            "boundary_edge_count": self.boundary_edge_count,
            "non_manifold_edge_count": self.non_manifold_edge_count,
            "degenerate_face_count": self.degenerate_face_count,
            "is_consistently_oriented": self.is_consistently_oriented,
            "checks_self_intersection": self.checks_self_intersection,
        }


def compute_face_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    if len(faces) == 0:
        return np.zeros((0, 3))
    tri = vertices[faces]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    norm = np.linalg.norm(cross, axis=1, keepdims=True)
    out = np.zeros_like(cross)
    np.divide(cross, norm, out=out, where=norm > 0)
    return out


# ---------------------------------------------------------------- parsing


def _looks_ascii(data: bytes) -> bool:
    if not data[:5].lower() == b"solid":
        return False
    if len(data) >= STL_HEADER_BYTES + 4:
        (count,) = struct.unpack_from("<I", data, STL_HEADER_BYTES)
        if len(data) == STL_HEADER_BYTES + 4 + STL_RECORD.itemsize * count:
            return False
    return True


def parse_stl(data: bytes) -> TriangleMesh:
    """Parse ASCII or little-endian binary STL bytes into an unmerged soup.

    The file is treated as ASCII only when it starts with ``solid`` and its
    length does not match the binary layout ``84 + 50 * count``.
    """
    if not data:
        raise EmptyMesh("empty STL payload")
    if _looks_ascii(data):
        return _parse_ascii(data)
    return _parse_binary(data)


def read_stl(path: str | Path) -> TriangleMesh:
    return parse_stl(Path(path).read_bytes())


def _soup(corners: np.ndarray, **extra) -> TriangleMesh:
    n = len(corners)
    return TriangleMesh(
        vertices=corners.reshape(-1, 3),
        faces=np.arange(3 * n, dtype=np.int64).reshape(n, 3),
        **extra,
    )


def _parse_binary(data: bytes) -> TriangleMesh:
    if len(data) < STL_HEADER_BYTES + 4:
        raise TruncatedBinary(f"binary STL needs at least 84 bytes, got {len(data)}")
    (count,) = struct.unpack_from("<I", data, STL_HEADER_BYTES)
    payload = len(data) - STL_HEADER_BYTES - 4
    if payload < count * STL_RECORD.itemsize:
        raise TruncatedBinary(
            f"header declares {count} facets but only "
            f"{payload // STL_RECORD.itemsize} records are present"
        )
    if count == 0:
        raise EmptyMesh("binary STL declares zero facets")
    rec = np.frombuffer(data, dtype=STL_RECORD, count=count, offset=STL_HEADER_BYTES + 4)
    return _soup(
        rec["vertices"].astype(np.float64),
        stl_normals=rec["normal"].copy(),
        stl_attributes=rec["attr"].copy(),
    )


def _parse_ascii(data: bytes) -> TriangleMesh:
    text = data.decode("ascii", errors="replace")
    corners: list[list[float]] = []
    state = "top"  # top -> solid -> facet -> loop
    in_loop = 0
    last_line = 0

    def floats(tokens, lineno, what):
        if len(tokens) != 3:
            raise MalformedAscii(lineno, f"'{what}' expects 3 numbers")
        try:
            return [float(t) for t in tokens]
        except ValueError:
            raise MalformedAscii(lineno, f"bad number in '{what}' line") from None

    for lineno, raw in enumerate(text.splitlines(), 1):
        tokens = raw.split()
        if not tokens:
            continue
        last_line = lineno
        key = tokens[0].lower()
        if state == "top":
            if key != "solid":
                raise MalformedAscii(lineno, f"expected 'solid', got '{tokens[0]}'")
            state = "solid"
        elif state == "solid":
            if key == "endsolid":
                state = "top"
            elif key == "facet":
                if len(tokens) < 2 or tokens[1].lower() != "normal":
                    raise MalformedAscii(lineno, "expected 'facet normal'")
                floats(tokens[2:], lineno, "facet normal")
                state = "facet"
            else:
                raise MalformedAscii(lineno, f"unexpected '{tokens[0]}' in solid")
        elif state == "facet":
            if key == "outer" and len(tokens) == 2 and tokens[1].lower() == "loop":
                state = "loop"
                in_loop = 0
            elif key == "endfacet":
                raise MalformedAscii(lineno, "facet without vertex loop")
            else:
                raise MalformedAscii(lineno, f"expected 'outer loop', got '{tokens[0]}'")
        elif state == "loop":
            if key == "vertex":
                if in_loop == 3:
                    raise MalformedAscii(lineno, "more than 3 vertices in facet")
                corners.append(floats(tokens[1:], lineno, "vertex"))
                in_loop += 1
            elif key == "endloop":
                if in_loop != 3:
                    raise MalformedAscii(lineno, f"facet has {in_loop} vertices, expected 3")
                state = "endfacet"
            else:
                raise MalformedAscii(lineno, f"unexpected '{tokens[0]}' in vertex loop")
        elif state == "endfacet":
            if key != "endfacet":
                raise MalformedAscii(lineno, f"expected 'endfacet', got '{tokens[0]}'")
            state = "solid"

    if state in ("facet", "loop", "endfacet"):
        raise MalformedAscii(last_line, "unexpected end of file inside facet")
    if not corners:
        raise EmptyMesh("ASCII STL contains no facets")
    return _soup(np.asarray(corners, dtype=np.float64).reshape(-1, 3, 3))


# ---------------------------------------------------------------- writing


def to_binary_stl(mesh: TriangleMesh, header: bytes = b"") -> bytes:
    """Serialize as binary STL. Stored source normals/attributes win when present."""
    rec = np.zeros(mesh.n_faces, dtype=STL_RECORD)
    rec["vertices"] = mesh.triangles().astype("<f4")
    if mesh.stl_normals is not None and len(mesh.stl_normals) == mesh.n_faces:
        rec["normal"] = mesh.stl_normals
        rec["attr"] = mesh.stl_attributes
    else:
        rec["normal"] = mesh.face_normals.astype("<f4")
    head = header[:STL_HEADER_BYTES].ljust(STL_HEADER_BYTES, b"\0")
    return head + struct.pack("<I", mesh.n_faces) + rec.tobytes()


def to_ascii_stl(mesh: TriangleMesh, name: str = "mesh") -> str:
    lines = [f"solid {name}"]
    for n, tri in zip(mesh.face_normals, mesh.triangles()):
        lines.append(f"  facet normal {n[0]:.9e} {n[1]:.9e} {n[2]:.9e}")
        lines.append("    outer loop")
        for v in tri:
            lines.append(f"      vertex {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}")
        lines.append("    endloop")
        lines.append("  endfacet")
    lines.append(f"endsolid {name}")
    return "\n".join(lines) + "\n"


def write_stl(path: str | Path, mesh: TriangleMesh, ascii: bool = False) -> None:
    path = Path(path)
    if ascii:
        path.write_text(to_ascii_stl(mesh, path.stem))
    else:
        path.write_bytes(to_binary_stl(mesh))


# ---------------------------------------------------------------- topology


def merge_vertices(mesh: TriangleMesh, epsilon: float = DEFAULT_MERGE_EPSILON) -> TriangleMesh:
    """Weld vertices that fall into the same epsilon grid cell.

    With ``epsilon == 0`` only bit-identical coordinates are merged. Faces
    left with fewer than three distinct corners are dropped and counted in
    ``dropped_degenerate``. The first vertex seen in a cell is kept as the
    representative, so merging is idempotent.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    v = mesh.vertices
    keys = v
    if epsilon > 0:
        with np.errstate(over="ignore"):
            snapped = np.round(v / epsilon)
        # an epsilon too small to represent behaves like exact matching
        if np.all(np.abs(snapped) < 2.0**62):
            keys = snapped.astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    # renumber representatives in order of first appearance
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    new_vertices = v[first[order]]
    faces = rank[inverse][mesh.faces]
    keep = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    faces = faces[keep]
    used = np.unique(faces)
    if len(used) < len(new_vertices):
        remap = np.full(len(new_vertices), -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        new_vertices = new_vertices[used]
        faces = remap[faces]
    return TriangleMesh(
        vertices=new_vertices,
        faces=faces,
        dropped_degenerate=mesh.dropped_degenerate + int((~keep).sum()),
    )


def surface_areas(mesh: TriangleMesh) -> tuple[np.ndarray, float]:
    """Per-face areas (half the cross-product magnitude) and their total."""
    if mesh.n_faces == 0:
        return np.zeros(0), 0.0
    tri = mesh.triangles()
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    return area, float(area.sum())


def edge_incidence(mesh: TriangleMesh) -> dict[tuple[int, int], list[tuple[int, int]]]:
    """Map each undirected edge to the directed (a, b) traversals of its faces."""
    incidence: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for f in mesh.faces.tolist():
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            incidence.setdefault((min(a, b), max(a, b)), []).append((a, b))
    return incidence


def validate_feasibility(mesh: TriangleMesh, area_tol: float = 1e-18) -> FeasibilityReport:
    """Edge-topology report for a merged mesh. Never raises on bad geometry."""
    incidence = edge_incidence(mesh)
    counts = Counter(len(v) for v in incidence.values())
    boundary = counts.get(1, 0)
    non_manifold = sum(c for n, c in counts.items() if n > 2)
    oriented = all(uses[0] != uses[1] for uses in incidence.values() if len(uses) == 2)
    areas, _ = surface_areas(mesh)
    degenerate = int((areas <= area_tol).sum()) + mesh.dropped_degenerate
    return FeasibilityReport(
        is_watertight=boundary == 0 and non_manifold == 0,
        boundary_edge_count=boundary,
        non_manifold_edge_count=non_manifold,
        degenerate_face_count=degenerate,
        is_consistently_oriented=oriented,
    )


def euler_characteristic(mesh: TriangleMesh) -> int:
    return mesh.n_vertices - len(edge_incidence(mesh)) + mesh.n_faces
