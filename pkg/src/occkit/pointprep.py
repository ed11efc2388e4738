"""Per-voxel point densification and reduction.

Sparse voxels are padded with uniformly generated synthetic points, dense
voxels are reduced with farthest point sampling, and voxels already in the
target range pass through untouched. The result is the set of 3D reference
points later projected onto the camera images.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ConfigError, DataError
from .grid import GridConfig, VoxelBin

_OCFP_MAGIC = b"OCFP"
_OCFP_VERSION = 1

SOURCE_RAW = 0
SOURCE_SYNTHETIC = 1


class FillScope(Enum):
    NON_EMPTY_ONLY = "non_empty_only"
    ALL_VOXELS = "all_voxels"


@dataclass(frozen=True)
class PreprocessConfig:
    """Hyperparameters of the point pre-sampling stage.

    Voxels with at most ``tau`` points are padded to exactly ``theta``;
    voxels with more than ``theta`` points are reduced to ``theta`` via
    farthest point sampling.
    """

    tau: int
    theta: int
    seed: int = 0
    fill_scope: FillScope = FillScope.ALL_VOXELS

    def __post_init__(self):
        if self.theta < 1:
            raise ConfigError("theta must be >= 1")
        if self.tau < 0 or self.tau >= self.theta:
            raise ConfigError("tau must satisfy 0 <= tau < theta")


@dataclass
class VoxelRefs:
    """Reference points of one voxel: raw survivors first, then synthetic."""

    positions: np.ndarray  # (n, 3) world meters
    source: np.ndarray  # (n,) uint8, 0 = raw, 1 = synthetic
    raw_index: np.ndarray  # (n,) int64, -1 for synthetic points

    @property
    def count(self) -> int:
        return len(self.positions)


@dataclass
class ReferencePointSet:
    """Per-voxel reference points keyed by coarse voxel index."""

    voxels: dict  # (ix, iy, iz) -> VoxelRefs

    def sorted_keys(self):
        return sorted(self.voxels.keys())

    def total_points(self) -> int:
        return sum(v.count for v in self.voxels.values())

    def flatten(self):
        """Concatenate all voxels in canonical (sorted-key) order.

        Returns (keys (V, 3), point_voxel (P,), positions (P, 3),
        source (P,), raw_index (P,)).
        """
        keys = self.sorted_keys()
        if not keys:
            z3 = np.zeros((0, 3))
            z = np.zeros((0,), dtype=np.int64)
            return np.zeros((0, 3), dtype=np.int64), z, z3, z.astype(np.uint8), z
        point_voxel = []
        pos = []
        src = []
        ridx = []
        for vi, k in enumerate(keys):
            refs = self.voxels[k]
            point_voxel.append(np.full(refs.count, vi, dtype=np.int64))
            pos.append(refs.positions)
            src.append(refs.source)
            ridx.append(refs.raw_index)
        return (
            np.asarray(keys, dtype=np.int64),
            np.concatenate(point_voxel),
            np.concatenate(pos),
            np.concatenate(src),
            np.concatenate(ridx),
        )


def voxel_rng(seed: int, index) -> np.random.Generator:
    """Independent generator stream for one voxel, derived from (seed, index)."""
    ix, iy, iz = (int(v) for v in index)
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, ix, iy, iz])


def uniform_fill(lo, hi, count: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``count`` i.i.d. uniform points inside the half-open box [lo, hi)."""
    if count < 0:
        raise ConfigError("count must be >= 0")
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    return lo + rng.random((count, 3)) * (hi - lo)


def fps(points, k: int, start_index: int) -> np.ndarray:
    """Greedy farthest point sampling.

    Starting from ``start_index``, repeatedly add the point maximizing the
    minimum Euclidean distance to the selected set; distance ties are broken
    by the lowest point index. Returns min(k, n) indices sorted ascending.
    Uses an O(n k) cached-distance implementation whose output matches the
    naive greedy selection exactly, including tie-breaks.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if n == 0:
        raise DataError("farthest point sampling requires a non-empty cloud")
    if k < 1:
        raise ConfigError("k must be >= 1")
    if not (0 <= start_index < n):
        raise ConfigError("start_index out of range")
    k = min(k, n)
    selected = np.empty(k, dtype=np.int64)
    selected[0] = start_index
    d2 = ((pts - pts[start_index]) ** 2).sum(axis=1)
    d2[start_index] = -1.0  # excludes selected points from argmax
    for i in range(1, k):
        nxt = int(np.argmax(d2))  # first occurrence = lowest index on ties
        selected[i] = nxt
        d2 = np.minimum(d2, ((pts - pts[nxt]) ** 2).sum(axis=1))
        d2[nxt] = -1.0
    return np.sort(selected)


def preprocess(
    bins, cloud, cfg: PreprocessConfig, grid: GridConfig
) -> ReferencePointSet:
    """Apply the per-voxel densify/reduce rule to a binned cloud.

    With ``fill_scope = ALL_VOXELS`` every coarse voxel of the grid is
    processed (empty ones receive ``theta`` synthetic points); with
    ``NON_EMPTY_ONLY`` voxels without raw points are skipped.
    """
    pts = np.asarray(cloud, dtype=np.float64)
    pts = pts.reshape(len(pts), -1)[:, :3] if len(pts) else pts.reshape(0, 3)
    by_key = {b.voxel_index: b for b in bins}
    if cfg.fill_scope is FillScope.ALL_VOXELS:
        keys = [tuple(int(v) for v in k) for k in grid.all_coarse_indices()]
    else:
        keys = sorted(by_key.keys())
    out = {}
    for key in keys:
        b = by_key.get(key)
        raw_idx = np.asarray(b.point_indices if b else (), dtype=np.int64)
        n = len(raw_idx)
        if n <= cfg.tau:
            lo, hi = grid.voxel_bounds(key)
            synth = uniform_fill(lo, hi, cfg.theta - n, voxel_rng(cfg.seed, key))
            positions = np.concatenate([pts[raw_idx], synth]) if n else synth
            source = np.concatenate(
                [
                    np.full(n, SOURCE_RAW, dtype=np.uint8),
                    np.full(cfg.theta - n, SOURCE_SYNTHETIC, dtype=np.uint8),
                ]
            )
            raw_index = np.concatenate(
                [raw_idx, np.full(cfg.theta - n, -1, dtype=np.int64)]
            )
        elif n <= cfg.theta:
            positions = pts[raw_idx]
            source = np.full(n, SOURCE_RAW, dtype=np.uint8)
            raw_index = raw_idx
        else:
            rng = voxel_rng(cfg.seed, key)
            start = int(rng.integers(n))
            keep = fps(pts[raw_idx], cfg.theta, start)
            raw_index = raw_idx[keep]
            positions = pts[raw_index]
            source = np.full(cfg.theta, SOURCE_RAW, dtype=np.uint8)
        out[key] = VoxelRefs(positions=positions, source=source, raw_index=raw_index)
    return ReferencePointSet(voxels=out)


def write_ocfp(path, cloud: np.ndarray) -> None:
    """Serialize an (n, 4) cloud of (x, y, z, intensity) as OCFP."""
    pts = np.asarray(cloud, dtype=np.float32).reshape(-1, 4)
    with open(path, "wb") as fh:
        fh.write(_OCFP_MAGIC)
        fh.write(struct.pack("<I", _OCFP_VERSION))
        fh.write(struct.pack("<I", len(pts)))
        fh.write(np.ascontiguousarray(pts, dtype="<f4").tobytes())


def read_ocfp(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _OCFP_MAGIC:
        raise DataError(f"{path}: bad magic, expected OCFP")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != _OCFP_VERSION:
        raise DataError(f"{path}: unsupported OCFP version {version}")
    (count,) = struct.unpack_from("<I", raw, 8)
    body = raw[12:]
    if len(body) != count * 16:
        raise DataError(f"{path}: truncated point records")
    return (
        np.frombuffer(body, dtype="<f4").reshape(count, 4).astype(np.float64)
    )


def read_cloud(path) -> np.ndarray:
    """Load a cloud from OCFP or the CSV fallback (header x,y,z,intensity)."""
    path = str(path)
    if path.endswith(".csv"):
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            rows = [
                (float(r["x"]), float(r["y"]), float(r["z"]), float(r["intensity"]))
                for r in reader
            ]
        return np.asarray(rows, dtype=np.float64).reshape(-1, 4)
    return read_ocfp(path)
