"""Voxel grid definition, point binning, index arithmetic and trilinear sampling.

Conventions used throughout the toolkit:
  * world coordinates are metric (x, y, z),
  * dense volumes are stored row-major as (z, y, x, c),
  * voxel bounds are half-open: a point on the min face belongs to the
    voxel, a point on the max face belongs to the neighbour.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError

_OCCG_MAGIC = b"OCCG"
_OCCG_VERSION = 1


def _as_vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64).reshape(3)
    return a


@dataclass(frozen=True)
class GridConfig:
    """Axis-aligned voxel grid with a coarse stride.

    The fine grid has cell size ``voxel_size``; the coarse grid aggregates
    ``stride`` fine cells per axis. Each axis extent must be an integer
    multiple of ``voxel_size * stride``.
    """

    min_corner: tuple
    max_corner: tuple
    voxel_size: float
    stride: int = 1

    def __post_init__(self):
        lo = _as_vec3(self.min_corner)
        hi = _as_vec3(self.max_corner)
        object.__setattr__(self, "min_corner", tuple(lo.tolist()))
        object.__setattr__(self, "max_corner", tuple(hi.tolist()))
        if not np.all(hi > lo):
            raise ConfigError("max_corner must exceed min_corner componentwise")
        if self.voxel_size <= 0:
            raise ConfigError("voxel_size must be positive")
        if self.stride < 1:
            raise ConfigError("stride must be a positive integer")
        cell = self.voxel_size * self.stride
        dims = (hi - lo) / cell
        if not np.allclose(dims, np.round(dims), atol=1e-6):
            raise ConfigError(
                "grid extent must be an integer multiple of voxel_size * stride"
            )
        if np.any(np.round(dims) < 1):
            raise ConfigError("coarse grid must have at least one voxel per axis")

    @property
    def lo(self) -> np.ndarray:
        return _as_vec3(self.min_corner)

    @property
    def hi(self) -> np.ndarray:
        return _as_vec3(self.max_corner)

    @property
    def coarse_cell(self) -> float:
        return self.voxel_size * self.stride

    @property
    def coarse_dims(self) -> tuple:
        """(nx, ny, nz) of the coarse grid."""
        d = np.round((self.hi - self.lo) / self.coarse_cell).astype(int)
        return tuple(d.tolist())

    @property
    def fine_dims(self) -> tuple:
        """(nx, ny, nz) of the fine grid."""
        d = np.round((self.hi - self.lo) / self.voxel_size).astype(int)
        return tuple(d.tolist())

    def voxel_center(self, index) -> np.ndarray:
        """World-space center of a coarse voxel."""
        idx = np.asarray(index, dtype=np.float64).reshape(-1, 3)
        c = self.lo + (idx + 0.5) * self.coarse_cell
        return c[0] if np.asarray(index).ndim == 1 else c

    def voxel_bounds(self, index):
        """(lo, hi) world bounds of a coarse voxel, half-open."""
        idx = _as_vec3(index)
        lo = self.lo + idx * self.coarse_cell
        return lo, lo + self.coarse_cell

    def all_coarse_indices(self) -> np.ndarray:
        """All coarse voxel indices, sorted lexicographically by (x, y, z)."""
        nx, ny, nz = self.coarse_dims
        gx, gy, gz = np.meshgrid(
            np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"
        )
        return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


@dataclass(frozen=True)
class VoxelBin:
    """Points assigned to one coarse voxel, in ascending source order."""

    voxel_index: tuple
    point_indices: tuple

    @property
    def count(self) -> int:
        return len(self.point_indices)


@dataclass
class VoxelFeatureVolume:
    """Dense per-voxel feature volume, stored as (z, y, x, c)."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 4:
            raise ConfigError("volume data must be 4-dimensional (z, y, x, c)")

    @property
    def dims(self) -> tuple:
        """(nx, ny, nz)."""
        nz, ny, nx, _ = self.data.shape
        return (nx, ny, nz)

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    def at(self, index) -> np.ndarray:
        ix, iy, iz = index
        return self.data[iz, iy, ix]


@dataclass
class OccupancyGrid:
    """Hard per-voxel class labels; class 0 means empty."""

    labels: np.ndarray  # (nz, ny, nx) uint8
    voxel_size: float
    min_corner: tuple

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 3:
            raise ConfigError("labels must be 3-dimensional (z, y, x)")
        self.min_corner = tuple(_as_vec3(self.min_corner).tolist())

    @property
    def dims(self) -> tuple:
        nz, ny, nx = self.labels.shape
        return (nx, ny, nz)


def voxel_indices(points: np.ndarray, cfg: GridConfig):
    """Vectorized coarse-voxel lookup.

    Returns (indices (n, 3) int64, inside (n,) bool); indices are only
    meaningful where ``inside`` holds.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rel = (pts - cfg.lo) / cfg.coarse_cell
    idx = np.floor(rel).astype(np.int64)
    dims = np.asarray(cfg.coarse_dims)
    inside = np.all((idx >= 0) & (idx < dims), axis=1)
    # Upper faces are exclusive: a point exactly on max_corner floors to dims.
    return idx, inside


def voxel_index(point, cfg: GridConfig):
    """Coarse voxel containing ``point``, or None when outside the grid."""
    idx, inside = voxel_indices(np.asarray(point).reshape(1, 3), cfg)
    if not inside[0]:
        return None
    return tuple(int(v) for v in idx[0])


def bin_points(cloud, cfg: GridConfig):
    """Assign points to coarse voxels.

    Returns (bins, dropped): bins sorted by voxel index with point indices
    ascending; ``dropped`` counts points outside the grid.
    """
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.size == 0:
        return [], 0
    pts = pts.reshape(len(pts), -1)[:, :3]
    idx, inside = voxel_indices(pts, cfg)
    dropped = int((~inside).sum())
    if not inside.any():
        return [], dropped
    src = np.nonzero(inside)[0]
    keys = idx[src]
    # Sort by (x, y, z, source index); stable grouping keeps sources ascending.
    order = np.lexsort((src, keys[:, 2], keys[:, 1], keys[:, 0]))
    keys = keys[order]
    src = src[order]
    change = np.any(np.diff(keys, axis=0) != 0, axis=1)
    starts = np.concatenate([[0], np.nonzero(change)[0] + 1, [len(src)]])
    bins = []
    for a, b in zip(starts[:-1], starts[1:]):
        bins.append(
            VoxelBin(
                voxel_index=tuple(int(v) for v in keys[a]),
                point_indices=tuple(int(v) for v in src[a:b]),
            )
        )
    return bins, dropped


def trilinear_sample(vol: VoxelFeatureVolume, pos) -> np.ndarray:
    """Trilinearly interpolate a feature volume at voxel-center coordinates.

    ``pos`` is (x, y, z) with 0 at the center of voxel (0, 0, 0); values
    outside the center lattice are clamped.
    """
    return trilinear_sample_batch(vol, np.asarray(pos).reshape(1, 3))[0]


def trilinear_sample_batch(vol: VoxelFeatureVolume, pos: np.ndarray) -> np.ndarray:
    pos = np.asarray(pos, dtype=np.float64).reshape(-1, 3)
    nx, ny, nz = vol.dims
    dims = np.array([nx, ny, nz], dtype=np.float64)
    p = np.clip(pos, 0.0, dims - 1.0)
    i0 = np.clip(np.floor(p).astype(np.int64), 0, np.maximum(dims.astype(int) - 2, 0))
    f = p - i0
    x0, y0, z0 = i0[:, 0], i0[:, 1], i0[:, 2]
    x1 = np.minimum(x0 + 1, nx - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    z1 = np.minimum(z0 + 1, nz - 1)
    fx, fy, fz = f[:, 0, None], f[:, 1, None], f[:, 2, None]
    d = vol.data
    c000 = d[z0, y0, x0]
    c100 = d[z0, y0, x1]
    c010 = d[z0, y1, x0]
    c110 = d[z0, y1, x1]
    c001 = d[z1, y0, x0]
    c101 = d[z1, y0, x1]
    c011 = d[z1, y1, x0]
    c111 = d[z1, y1, x1]
    c00 = c000 * (1 - fx) + c100 * fx
    c10 = c010 * (1 - fx) + c110 * fx
    c01 = c001 * (1 - fx) + c101 * fx
    c11 = c011 * (1 - fx) + c111 * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


def split_voxel(coarse_index, factor: int, cfg: GridConfig):
    """Tile a coarse voxel into factor^3 children.

    Returns (fine_indices (f^3, 3), centers (f^3, 3) world meters); children
    are ordered lexicographically by (x, y, z) offset.
    """
    if factor < 1:
        raise ConfigError("split factor must be >= 1")
    idx = np.asarray(coarse_index, dtype=np.int64).reshape(3)
    ox, oy, oz = np.meshgrid(
        np.arange(factor), np.arange(factor), np.arange(factor), indexing="ij"
    )
    offs = np.stack([ox.ravel(), oy.ravel(), oz.ravel()], axis=1)
    fine = idx * factor + offs
    child = cfg.coarse_cell / factor
    centers = cfg.lo + (fine + 0.5) * child
    return fine, centers


def write_occg(path, grid: OccupancyGrid) -> None:
    """Serialize an occupancy grid in the little-endian OCCG format."""
    nx, ny, nz = grid.dims
    with open(path, "wb") as fh:
        fh.write(_OCCG_MAGIC)
        fh.write(struct.pack("<I", _OCCG_VERSION))
        fh.write(struct.pack("<3I", nx, ny, nz))
        fh.write(struct.pack("<f", grid.voxel_size))
        fh.write(struct.pack("<3f", *grid.min_corner))
        fh.write(np.ascontiguousarray(grid.labels, dtype=np.uint8).tobytes())


def read_occg(path) -> OccupancyGrid:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _OCCG_MAGIC:
        raise DataError(f"{path}: bad magic, expected OCCG")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != _OCCG_VERSION:
        raise DataError(f"{path}: unsupported OCCG version {version}")
    nx, ny, nz = struct.unpack_from("<3I", raw, 8)
    (voxel_size,) = struct.unpack_from("<f", raw, 20)
    min_corner = struct.unpack_from("<3f", raw, 24)
    body = raw[36:]
    expect = nx * ny * nz
    if len(body) != expect:
        raise DataError(f"{path}: expected {expect} label bytes, got {len(body)}")
    labels = np.frombuffer(body, dtype=np.uint8).reshape(nz, ny, nx).copy()
    return OccupancyGrid(labels=labels, voxel_size=float(voxel_size), min_corner=min_corner)
