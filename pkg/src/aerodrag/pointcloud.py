"""Surface sampling, normalization, Chamfer distance and dataset diversity.

Sampling uses numpy's PCG64 bit generator, whose output stream is fixed for
a given seed across platforms and numpy releases, so cached clouds are
reproducible bit for bit.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from itertools import combinations
from pathlib import Path

import numpy as np

from .knn import nearest_sq_dist, sq_dist
from .mesh import TriangleMesh, surface_areas

DEFAULT_POINTS = 5000
DIVERSITY_SUBSAMPLE = 1024
CACHE_MAGIC = b"DAPC"
CACHE_VERSION = 1


class ZeroAreaMesh(ValueError):
    pass


class EmptyCloud(ValueError):
    pass


class TooFewClouds(ValueError):
    pass


class CacheError(IOError):
    pass


def make_rng(*seed) -> np.random.Generator:
    """PCG64 generator keyed by one or more non-negative integers."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(seed))))


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray  # (n, 3)
    design_id: str | None = None
    sample_seed: int | None = None

    def __post_init__(self):
        pts = np.asarray(self.points)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
            raise EmptyCloud("a point cloud needs shape (n, 3) with n >= 1")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class NormalizationTransform:
    translation: tuple[float, float, float]
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - np.asarray(self.translation)) / self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) * self.scale + np.asarray(self.translation)


def sample_surface(mesh: TriangleMesh, n: int = DEFAULT_POINTS, seed: int = 0,
                   design_id: str | None = None) -> PointCloud:
    """Area-weighted uniform sampling of ``n`` points on the mesh surface."""
    if n < 1:
        raise ValueError("n must be at least 1")
    areas, total = surface_areas(mesh)
    if total < 1e-18:
        raise ZeroAreaMesh("mesh has no surface area to sample")
    rng = make_rng(seed)
    cum = np.cumsum(areas)
    face = np.searchsorted(cum, rng.random(n) * cum[-1], side="right")
    face = np.minimum(face, len(areas) - 1)
    # sqrt warp gives uniform density over the triangle
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    tri = mesh.triangles()[face]
    pts = np.einsum("ni,nij->nj", bary, tri)
    return PointCloud(pts, design_id=design_id, sample_seed=seed)


def normalize_unit_sphere(pc: PointCloud) -> tuple[PointCloud, NormalizationTransform]:
    """Centre on the centroid and scale the farthest point to radius 1."""
    pts = np.asarray(pc.points, dtype=np.float64)
    centroid = pts.mean(axis=0)
    shifted = pts - centroid
    radius = float(np.sqrt((shifted**2).sum(axis=1).max()))
    scale = radius if radius >= 1e-12 else 1.0
    transform = NormalizationTransform(tuple(float(c) for c in centroid), scale)
    return replace(pc, points=shifted / scale), transform


def _cloud(x) -> np.ndarray:
    pts = np.asarray(x.points if isinstance(x, PointCloud) else x, dtype=np.float64)
    if pts.ndim != 2 or len(pts) == 0:
        raise EmptyCloud("Chamfer distance needs non-empty point sets")
    return pts


def chamfer_distance(A, B, accelerated: bool = True) -> float:
    """Symmetric Chamfer distance with squared Euclidean terms.

    CD = mean_a min_b |a - b|^2 + mean_b min_a |a - b|^2
    """
    a, b = _cloud(A), _cloud(B)
    return float(nearest_sq_dist(a, b, accelerated).mean() + nearest_sq_dist(b, a, accelerated).mean())


def chamfer_distance_bruteforce(A, B) -> float:
    a, b = _cloud(A), _cloud(B)
    d = sq_dist(a, b)
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())


def subsample(pc, m: int, seed: int) -> np.ndarray:
    pts = _cloud(pc)
    if len(pts) <= m:
        return pts
    idx = make_rng(seed).choice(len(pts), size=m, replace=False)
    return pts[np.sort(idx)]


def diversity_score(clouds, subsample_to: int | None = DIVERSITY_SUBSAMPLE, seed: int = 0) -> float:
    """Mean Chamfer distance over all unordered pairs of clouds.

    Each cloud is first reduced to ``subsample_to`` points (seeded by its
    position in the list); pass ``None`` to use every point. The pair terms
    are summed with ``math.fsum``, so the result does not depend on the
    order pairs are evaluated in.
    """
    if len(clouds) < 2:
        raise TooFewClouds("diversity needs at least two clouds")
    pts = [
        _cloud(c) if subsample_to is None else subsample(c, subsample_to, seed + i)
        for i, c in enumerate(clouds)
    ]
    terms = [chamfer_distance(pts[i], pts[j]) for i, j in combinations(range(len(pts)), 2)]
    return math.fsum(terms) / len(terms)


# ------------------------------------------------------------ disk cache


def cache_name(design_id: str, n: int, seed: int) -> str:
    return f"{design_id}_{n}_{seed}.dapc"


def write_cache(path: str | Path, points: np.ndarray) -> None:
    pts = np.ascontiguousarray(points, dtype="<f4").reshape(-1, 3)
    header = CACHE_MAGIC + struct.pack("<II", CACHE_VERSION, len(pts))
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(header + pts.tobytes())
    tmp.replace(path)


def read_cache(path: str | Path) -> np.ndarray:
    """Load an (n, 3) float32 array from a .dapc file."""
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != CACHE_MAGIC:
        raise CacheError(f"{path}: not a point-cloud cache file")
    version, n = struct.unpack_from("<II", data, 4)
    if version != CACHE_VERSION:
        raise CacheError(f"{path}: unsupported cache version {version}")
    if len(data) != 12 + 12 * n:
        raise CacheError(f"{path}: expected {n} points, file length is {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(n, 3).astype(np.float32)
