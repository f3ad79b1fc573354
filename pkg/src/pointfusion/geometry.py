"""Point cloud handling: pinhole projection, unit-sphere normalization and kNN.

Conventions: points are N x 3 arrays (x, y, z) in scene units with z along the
optical axis; pixel (row, col) corresponds to (v, u). Everything here is pure
and safe to call from multiple threads.
"""

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np


class PointFileError(ValueError):
    """Raised when a point file fails to parse; carries the offending line."""


@dataclass
class PointCloud:
    """A set of 3D points, optionally carrying per-point features."""

    points: np.ndarray  # N x 3 float32

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float32)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be N x 3, got shape {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("points contain non-finite coordinates")
        self.points = pts
        self._knn_cache = {}

    @property
    def count(self) -> int:
        return self.points.shape[0]

    def subset(self, indices: np.ndarray) -> "PointCloud":
        return PointCloud(self.points[np.asarray(indices, dtype=np.int64)])


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera model: focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point lies outside the image")


@dataclass(frozen=True)
class ProjectionReport:
    """Bookkeeping of where each input point went during projection."""

    projected: int
    dropped: int  # outside the image bounds or z <= 0
    evicted: int  # lost a same-pixel collision to a nearer point

    @property
    def total(self) -> int:
        return self.projected + self.dropped + self.evicted


@dataclass
class SparseDepthMap:
    """H x W depth grid that is nonzero only where a point projects.

    `indices` lists the occupied (row, col) cells in row-major order and
    `point_index[i]` is the id of the source point that owns cell i.
    """

    depth: np.ndarray  # H x W float32, 0 where missing
    mask: np.ndarray  # H x W bool
    indices: np.ndarray  # M x 2 int64 (row, col)
    point_index: np.ndarray  # M int64
    report: Optional[ProjectionReport] = None

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=bool)
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1, 2)
        self.point_index = np.asarray(self.point_index, dtype=np.int64)
        h, w = self.depth.shape
        if self.mask.shape != (h, w):
            raise ValueError("mask shape does not match depth shape")
        if not np.array_equal(self.mask, self.depth > 0):
            raise ValueError("mask must be true exactly where depth > 0")
        if len(self.indices) != len(self.point_index):
            raise ValueError("indices and point_index length mismatch")
        if len(self.indices):
            r, c = self.indices[:, 0], self.indices[:, 1]
            if r.min() < 0 or c.min() < 0 or r.max() >= h or c.max() >= w:
                raise ValueError("occupied indices out of bounds")
            flat = r * w + c
            if len(np.unique(flat)) != len(flat):
                raise ValueError("duplicate occupied cells")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.depth.shape

    @property
    def occupied(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class NormalizationTransform:
    """Centroid/scale pair mapping a cloud onto the unit sphere and back."""

    centroid: np.ndarray  # 3-vector
    scale: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        return ((np.asarray(points, dtype=np.float64) - self.centroid) / self.scale).astype(np.float32)

    def invert(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) * self.scale + self.centroid).astype(np.float32)


def _empty_map(height: int, width: int, report=None) -> SparseDepthMap:
    return SparseDepthMap(
        depth=np.zeros((height, width), dtype=np.float32),
        mask=np.zeros((height, width), dtype=bool),
        indices=np.zeros((0, 2), dtype=np.int64),
        point_index=np.zeros(0, dtype=np.int64),
        report=report,
    )


def _build_map(height, width, rows, cols, depths, point_ids, n_dropped) -> SparseDepthMap:
    """Resolve same-cell collisions by keeping the smallest depth."""
    flat = rows * width + cols
    # sort by (cell, depth, point id) so the first entry per cell is the winner;
    # the point-id tiebreak keeps equal-depth collisions deterministic
    order = np.lexsort((point_ids, depths, flat))
    flat_sorted = flat[order]
    keep = np.ones(len(order), dtype=bool)
    keep[1:] = flat_sorted[1:] != flat_sorted[:-1]
    winners = order[keep]
    evicted = len(order) - len(winners)
    # row-major order of occupied cells
    winners = winners[np.argsort(flat[winners], kind="stable")]

    depth = np.zeros((height, width), dtype=np.float32)
    depth[rows[winners], cols[winners]] = depths[winners]
    indices = np.stack([rows[winners], cols[winners]], axis=1).astype(np.int64)
    report = ProjectionReport(projected=len(winners), dropped=n_dropped, evicted=evicted)
    return SparseDepthMap(
        depth=depth,
        mask=depth > 0,
        indices=indices,
        point_index=point_ids[winners].astype(np.int64),
        report=report,
    )


def project_points(pc: PointCloud, intr: CameraIntrinsics) -> SparseDepthMap:
    """Project a cloud through a pinhole camera into a sparse depth map.

    Pixels are rounded to the nearest integer; points falling outside the
    image or having z <= 0 are counted as dropped in the attached report.
    When several points land on the same pixel the smallest z wins.
    """
    if pc.count == 0:
        return _empty_map(intr.height, intr.width, ProjectionReport(0, 0, 0))

    pts = pc.points.astype(np.float64)
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    valid = z > 0
    u = np.full(pc.count, -1.0)
    v = np.full(pc.count, -1.0)
    u[valid] = np.rint(intr.fx * x[valid] / z[valid] + intr.cx)
    v[valid] = np.rint(intr.fy * y[valid] / z[valid] + intr.cy)
    inside = valid & (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)

    n_dropped = int((~inside).sum())
    if not inside.any():
        return _empty_map(intr.height, intr.width, ProjectionReport(0, n_dropped, 0))

    ids = np.nonzero(inside)[0]
    rows = v[inside].astype(np.int64)
    cols = u[inside].astype(np.int64)
    depths = z[inside].astype(np.float32)
    return _build_map(intr.height, intr.width, rows, cols, depths, ids, n_dropped)


def backproject(sparse: SparseDepthMap, intr: CameraIntrinsics) -> PointCloud:
    """Lift the occupied cells of a sparse depth map back to 3D rays."""
    if sparse.occupied == 0:
        return PointCloud(np.zeros((0, 3), dtype=np.float32))
    rows = sparse.indices[:, 0].astype(np.float64)
    cols = sparse.indices[:, 1].astype(np.float64)
    z = sparse.depth[sparse.indices[:, 0], sparse.indices[:, 1]].astype(np.float64)
    x = (cols - intr.cx) * z / intr.fx
    y = (rows - intr.cy) * z / intr.fy
    return PointCloud(np.stack([x, y, z], axis=1).astype(np.float32))


def normalize_unit_sphere(pc: PointCloud) -> Tuple[PointCloud, NormalizationTransform]:
    """Center a cloud at its centroid and scale the farthest point to norm 1.

    A cloud whose points all coincide keeps scale 1 (degenerate rule).
    """
    if pc.count == 0:
        raise ValueError("cannot normalize an empty point cloud")
    pts = pc.points.astype(np.float64)
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    radius = float(np.linalg.norm(centered, axis=1).max())
    scale = radius if radius > 0 else 1.0
    transform = NormalizationTransform(centroid=centroid, scale=scale)
    return PointCloud((centered / scale).astype(np.float32)), transform


def knn(pc: PointCloud, k: int) -> np.ndarray:
    """Exact k-nearest-neighbor indices (N x k), each point its own neighbor.

    Ties are broken by the lower point index so results are reproducible.
    """
    n = pc.count
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    cached = pc._knn_cache.get(k)
    if cached is not None:
        return cached
    pts = pc.points.astype(np.float64)
    sq = (pts * pts).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (pts @ pts.T)
    np.fill_diagonal(d2, 0.0)
    # stable sort on distances -> equal distances resolve to the lower index
    idx = np.argsort(d2, axis=1, kind="stable")[:, :k].astype(np.int64)
    pc._knn_cache[k] = idx
    return idx


def knn_padded(pc: PointCloud, k: int) -> np.ndarray:
    """knn that tolerates k > N by repeating the last valid neighbor."""
    n = pc.count
    if n == 0:
        raise ValueError("knn on an empty point cloud")
    if k <= n:
        return knn(pc, k)
    base = knn(pc, n)
    pad = np.repeat(base[:, -1:], k - n, axis=1)
    return np.concatenate([base, pad], axis=1)


def rescale_indices(sparse: SparseDepthMap, factor: int) -> SparseDepthMap:
    """Map a sparse depth map onto a grid downscaled by a power-of-two factor.

    Cells colliding in the coarse grid are resolved by the smaller depth.
    """
    h, w = sparse.shape
    if factor < 1 or (factor & (factor - 1)) != 0:
        raise ValueError(f"factor must be a positive power of two, got {factor}")
    if h % factor or w % factor:
        raise ValueError(f"factor {factor} does not divide map size {h}x{w}")
    if factor == 1:
        return sparse
    if sparse.occupied == 0:
        return _empty_map(h // factor, w // factor)
    rows = sparse.indices[:, 0] // factor
    cols = sparse.indices[:, 1] // factor
    depths = sparse.depth[sparse.indices[:, 0], sparse.indices[:, 1]]
    return _build_map(h // factor, w // factor, rows, cols, depths, sparse.point_index.copy(), 0)


def save_point_file(path, pc: PointCloud) -> None:
    """Write points as 'x y z' text lines, 9 significant digits."""
    with open(path, "w") as f:
        f.write("# x y z\n")
        for x, y, z in pc.points:
            f.write(f"{x:.9g} {y:.9g} {z:.9g}\n")


def load_point_file(path) -> PointCloud:
    """Read a text point file; '#' lines are comments."""
    pts = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            parts = stripped.split()
            if len(parts) != 3:
                raise PointFileError(f"{path}:{lineno}: expected 3 values, got {len(parts)}")
            try:
                pts.append([float(p) for p in parts])
            except ValueError as exc:
                raise PointFileError(f"{path}:{lineno}: {exc}") from exc
    if not pts:
        return PointCloud(np.zeros((0, 3), dtype=np.float32))
    return PointCloud(np.asarray(pts, dtype=np.float32))
