"""Synthetic design families with analytic drag-like targets.

Each design is a box or an ellipsoid with extents (length, width, height),
length along the flow. The target depends only on aspect ratio,

    cd = 0.15 + 0.45 * W*H / (L*W + W*H + L*H)    (+0.04 for ellipsoids)

so it survives unit-sphere normalization of the sampled clouds, while the
overall scale varies freely between designs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mesh import TriangleMesh, write_stl
from .pointcloud import make_rng
from .shapes import box, icosphere

MANIFEST_COLUMNS = ["design_id", "cd", "cl", "cl_f", "cl_r", "cm"]


@dataclass(frozen=True)
class SyntheticDesign:
    design_id: str
    kind: str  # "box" | "ellipsoid"
    extents: tuple[float, float, float]
    scale: float

    @property
    def cd(self) -> float:
        L, W, H = self.extents
        frontal_share = W * H / (L * W + W * H + L * H)
        return 0.15 + 0.45 * frontal_share + (0.04 if self.kind == "ellipsoid" else 0.0)

    @property
    def cl(self) -> float:
        L, W, H = self.extents
        return 0.05 * (H - W) / (L + W + H)

    def mesh(self) -> TriangleMesh:
        dims = np.asarray(self.extents) * self.scale
        if self.kind == "box":
            return box(dims)
        sphere = icosphere(2)
        return TriangleMesh(sphere.vertices * (dims / 2.0), sphere.faces)


def overfit_family() -> list[SyntheticDesign]:
    """Eight hand-picked designs: four boxes, four ellipsoids, mixed scales."""
    spec = [
        ("box", (1.0, 1.0, 1.0), 1.0),
        ("box", (2.0, 1.0, 0.8), 0.5),
        ("box", (1.0, 1.6, 1.2), 2.0),
        ("box", (3.0, 1.0, 1.0), 1.5),
        ("ellipsoid", (1.0, 1.0, 1.0), 0.7),
        ("ellipsoid", (2.5, 1.0, 0.9), 1.2),
        ("ellipsoid", (1.0, 2.0, 1.0), 0.4),
        ("ellipsoid", (1.5, 1.2, 2.0), 3.0),
    ]
    return [SyntheticDesign(f"design_{i:03d}", k, e, s) for i, (k, e, s) in enumerate(spec)]


def random_family(n: int, seed: int = 0) -> list[SyntheticDesign]:
    """``n`` random boxes/ellipsoids with extents in [0.6, 2.4] and scales in [0.5, 2]."""
    rng = make_rng(seed)
    out = []
    for i in range(n):
        kind = "box" if rng.random() < 0.5 else "ellipsoid"
        extents = tuple(float(x) for x in rng.uniform(0.6, 2.4, size=3))
        scale = float(rng.uniform(0.5, 2.0))
        out.append(SyntheticDesign(f"design_{i:03d}", kind, extents, scale))
    return out


def write_dataset(designs: list[SyntheticDesign], root: str | Path) -> tuple[Path, Path]:
    """Write ``stl/<id>.stl`` files and ``manifest.csv`` under ``root``."""
    root = Path(root)
    stl_dir = root / "stl"
    stl_dir.mkdir(parents=True, exist_ok=True)
    for d in designs:
        write_stl(stl_dir / f"{d.design_id}.stl", d.mesh())
    manifest = root / "manifest.csv"
    with manifest.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_COLUMNS)
        for d in designs:
            w.writerow([d.design_id, repr(d.cd), repr(d.cl), 0.0, 0.0, 0.0])
    return stl_dir, manifest
