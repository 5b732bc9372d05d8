"""Exact k-nearest-neighbour graphs.

Two paths produce identical index tables: a chunked brute-force search for
any feature dimension, and a uniform spatial hash grid for 3-D coordinates.
Both order neighbours by (squared distance, index) and compute distances
with the same column-accumulated kernel, so tie outcomes agree bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_CHUNK_ELEMS = 1 << 22
# above this feature width, brute force switches to the Gram expansion
EXACT_KERNEL_MAX_DIM = 8


class KTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class NeighborGraph:
    indices: np.ndarray  # (n, k) int64
    k: int
    feature_dim: int
    include_self: bool = False

    @property
    def n(self) -> int:
        return len(self.indices)


def sq_dist(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Squared distances between rows of A (m, d) and B (p, d), in float64.

    Accumulates one coordinate at a time so every entry is computed by the
    same sequence of floating-point operations regardless of array shapes.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    diff = A[:, None, 0] - B[None, :, 0]
    out = diff * diff
    for c in range(1, A.shape[1]):
        np.subtract(A[:, None, c], B[None, :, c], out=diff)
        diff *= diff
        out += diff
    return out


def _gram_sq_dist(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    out = (A * A).sum(axis=1)[:, None] + (B * B).sum(axis=1)[None, :]
    out -= 2.0 * (A @ B.T)
    np.maximum(out, 0.0, out=out)
    return out


def _block_sq_dist(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    if A.shape[1] <= EXACT_KERNEL_MAX_DIM:
        return sq_dist(A, B)
    return _gram_sq_dist(A, B)


def pairwise_sq_dist(X: np.ndarray) -> np.ndarray:
    """(n, n) matrix of squared Euclidean distances; symmetric, zero diagonal."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
        raise ValueError("expected a non-empty (n, d) array")
    D = _block_sq_dist(X, X)
    if X.shape[1] > EXACT_KERNEL_MAX_DIM:
        D = 0.5 * (D + D.T)
        np.fill_diagonal(D, 0.0)
    return D


def _check_k(n: int, k: int, include_self: bool) -> None:
    limit = n if include_self else n - 1
    if k < 1:
        raise ValueError("k must be at least 1")
    if k > limit:
        raise KTooLarge(f"k={k} needs more than the {n} points available")


def _select(dist: np.ndarray, cand: np.ndarray, k: int) -> np.ndarray:
    """Rows of ``dist`` over candidate indices ``cand`` (sorted ascending) -> k best."""
    # cand is ascending, so a stable sort on distance breaks ties by index
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    return cand[order]


def knn_graph(X: np.ndarray, k: int, include_self: bool = False) -> NeighborGraph:
    """Brute-force kNN over rows of X in any dimension.

    Row i lists the k rows closest to row i, excluding i itself unless
    ``include_self`` (then i always occupies slot 0). Ties go to the smaller
    index.

    Up to ``EXACT_KERNEL_MAX_DIM`` features the exact difference kernel is
    used (shared with the grid path); wider features use the float64 Gram
    expansion, symmetrized, with an exact zero diagonal.
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    _check_k(n, k, include_self)
    out = np.empty((n, k), dtype=np.int64)
    rows = max(1, _CHUNK_ELEMS // max(n, 1))
    cand = np.arange(n)
    for start in range(0, n, rows):
        stop = min(n, start + rows)
        if d > EXACT_KERNEL_MAX_DIM and rows >= n:
            dist = pairwise_sq_dist(X)
        else:
            dist = _block_sq_dist(X[start:stop], X)
        r = np.arange(stop - start)
        dist[r, r + start] = -1.0 if include_self else np.inf
        out[start:stop] = _select(dist, cand, k)
    return NeighborGraph(out, k, d, include_self)


def batched_knn(X: np.ndarray, k: int, include_self: bool = False) -> np.ndarray:
    """kNN index tables for a (batch, n, d) stack; shape (batch, n, k)."""
    X = np.asarray(X)
    fn = knn_graph_accelerated if X.shape[-1] == 3 else knn_graph
    return np.stack([fn(x, k, include_self).indices for x in X])


class SpatialGrid:
    """Uniform hash grid over 3-D points for exact nearest-neighbour queries.

    Cell size is the bounding-box diagonal divided by cbrt(n). Queries expand
    Chebyshev rings of cells until the k-th best distance is strictly below
    the distance any unvisited cell could offer.
    """

    def __init__(self, points: np.ndarray, cell_size: float | None = None):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
            raise ValueError("SpatialGrid needs a non-empty (n, 3) array")
        self.points = pts
        self.lo = pts.min(axis=0)
        if cell_size is None:
            diag = float(np.linalg.norm(pts.max(axis=0) - self.lo))
            cell_size = diag / np.cbrt(len(pts)) if diag > 0 else 1.0
        self.h = float(cell_size)
        cells = self._cell_of(pts)
        self.dims = cells.max(axis=0) + 1
        flat = self._flat(cells)
        order = np.lexsort((np.arange(len(pts)), flat))
        self._sorted = order
        flat_sorted = flat[order]
        ncell = int(np.prod(self.dims))
        self._start = np.searchsorted(flat_sorted, np.arange(ncell), side="left")
        self._stop = np.searchsorted(flat_sorted, np.arange(ncell), side="right")
        self._shells: dict[int, np.ndarray] = {}

    def _cell_of(self, p: np.ndarray) -> np.ndarray:
        return np.floor((p - self.lo) / self.h).astype(np.int64)

    def _flat(self, cells: np.ndarray) -> np.ndarray:
        return (cells[:, 0] * self.dims[1] + cells[:, 1]) * self.dims[2] + cells[:, 2]

    def _shell(self, r: int) -> np.ndarray:
        if r not in self._shells:
            rng = np.arange(-r, r + 1)
            off = np.stack(np.meshgrid(rng, rng, rng, indexing="ij"), -1).reshape(-1, 3)
            self._shells[r] = off[np.abs(off).max(axis=1) == r]
        return self._shells[r]

    def _members(self, cell: np.ndarray, r: int) -> list[np.ndarray]:
        cells = cell + self._shell(r)
        ok = np.all((cells >= 0) & (cells < self.dims), axis=1)
        out = []
        for f in self._flat(cells[ok]).tolist():
            a, b = self._start[f], self._stop[f]
            if b > a:
                out.append(self._sorted[a:b])
        return out

    def query(self, queries: np.ndarray, k: int, exclude: np.ndarray | None = None):
        """k nearest grid points for each query row.

        ``exclude[i]`` (if given) is an index that query i may not return,
        used to drop self-matches. Returns (indices, squared distances).
        """
        q = np.asarray(queries, dtype=np.float64)
        m = len(q)
        avail = len(self.points) - (0 if exclude is None else 1)
        if k > avail:
            raise KTooLarge(f"k={k} exceeds the {avail} candidate points")
        idx_out = np.empty((m, k), dtype=np.int64)
        dist_out = np.empty((m, k))
        qcells = np.clip(self._cell_of(q), -1, self.dims)
        qc = qcells + 1
        qflat = (qc[:, 0] * (self.dims[1] + 2) + qc[:, 1]) * (self.dims[2] + 2) + qc[:, 2]
        groups = np.argsort(qflat, kind="stable")
        bounds = np.flatnonzero(np.diff(qflat[groups])) + 1
        max_ring = int(self.dims.max()) + 1
        for group in np.split(groups, bounds):
            cell = qcells[group[0]]
            found: list[np.ndarray] = []
            r = 0
            while True:
                found += self._members(cell, r)
                cand = np.sort(np.concatenate(found)) if found else np.zeros(0, np.int64)
                dist = sq_dist(q[group], self.points[cand])
                if exclude is not None:
                    dist[cand[None, :] == exclude[group][:, None]] = np.inf
                enough = len(cand) - (0 if exclude is None else 1) >= k
                if r >= max_ring:
                    break
                if enough:
                    kth = np.partition(dist, k - 1, axis=1)[:, k - 1]
                    # anything outside rings 0..r lies at least r*h away; the
                    # margin absorbs rounding in the cell assignment
                    if np.all(kth < (max(r - 1e-6, 0.0) * self.h) ** 2):
                        break
                r += 1
            order = np.argsort(dist, axis=1, kind="stable")[:, :k]
            idx_out[group] = cand[order]
            dist_out[group] = np.take_along_axis(dist, order, axis=1)
        return idx_out, dist_out


def knn_graph_accelerated(X: np.ndarray, k: int, include_self: bool = False) -> NeighborGraph:
    """Grid-accelerated kNN for 3-D points; same output as :func:`knn_graph`."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != 3:
        raise ValueError("accelerated kNN is only defined for (n, 3) coordinates")
    n = len(X)
    _check_k(n, k, include_self)
    grid = SpatialGrid(X)
    if include_self:
        if k == 1:
            return NeighborGraph(np.arange(n)[:, None], k, 3, True)
        rest, _ = grid.query(X, k - 1, exclude=np.arange(n))
        return NeighborGraph(np.concatenate([np.arange(n)[:, None], rest], axis=1), k, 3, True)
    idx, _ = grid.query(X, k, exclude=np.arange(n))
    return NeighborGraph(idx, k, 3, False)


def nearest_sq_dist(queries: np.ndarray, reference: np.ndarray, accelerated: bool = True) -> np.ndarray:
    """Squared distance from every query row to its nearest reference row."""
    queries = np.asarray(queries, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if accelerated and queries.shape[1] == 3:
        _, d = SpatialGrid(reference).query(queries, 1)
        return d[:, 0]
    out = np.empty(len(queries))
    rows = max(1, _CHUNK_ELEMS // max(len(reference), 1))
    for start in range(0, len(queries), rows):
        out[start : start + rows] = sq_dist(queries[start : start + rows], reference).min(axis=1)
    return out
