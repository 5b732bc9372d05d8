"""Closed test geometries: boxes and icospheres with outward winding."""

from __future__ import annotations

import numpy as np

from .mesh import TriangleMesh

# unit cube corners, index = 4*x + 2*y + z
_CUBE_FACES = np.array(
    [
        [0, 1, 3], [0, 3, 2],  # x = 0
        [4, 6, 7], [4, 7, 5],  # x = 1
        [0, 4, 5], [0, 5, 1],  # y = 0
        [2, 3, 7], [2, 7, 6],  # y = 1
        [0, 2, 6], [0, 6, 4],  # z = 0
        [1, 5, 7], [1, 7, 3],  # z = 1
    ]
)


def box(size=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Axis-aligned box as 12 outward-wound triangles."""
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
    size = np.asarray(size, dtype=float)
    verts = (corners - 0.5) * size + np.asarray(center, dtype=float)
    return TriangleMesh(verts, _CUBE_FACES.copy())


def unit_cube() -> TriangleMesh:
    """The cube [0, 1]^3."""
    return box((1, 1, 1), (0.5, 0.5, 0.5))


def icosphere(subdivisions: int = 2, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    t = (1.0 + 5.0**0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(v, dtype=float) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    v = np.array(verts) * radius + np.asarray(center, dtype=float)
    return TriangleMesh(v, np.array(faces))


def unit_square() -> TriangleMesh:
    """[0, 1]^2 in the z = 0 plane as two equal triangles."""
    v = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float)
    return TriangleMesh(v, np.array([[0, 1, 2], [0, 2, 3]]))


def drop_faces(mesh: TriangleMesh, which) -> TriangleMesh:
    keep = np.ones(mesh.n_faces, dtype=bool)
    keep[np.atleast_1d(which)] = False
    return TriangleMesh(mesh.vertices, mesh.faces[keep])


def as_soup(mesh: TriangleMesh) -> TriangleMesh:
    """Unweld a mesh into three private vertex slots per face."""
    n = mesh.n_faces
    return TriangleMesh(mesh.triangles().reshape(-1, 3), np.arange(3 * n).reshape(n, 3))
