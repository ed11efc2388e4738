import numpy as np
import pytest

from occkit.errors import ConfigError, DataError
from occkit.grid import (
    GridConfig,
    OccupancyGrid,
    VoxelFeatureVolume,
    bin_points,
    read_occg,
    split_voxel,
    trilinear_sample,
    voxel_index,
    write_occg,
)


@pytest.fixture
def unit_grid():
    # 4x4x4 coarse voxels of 1 m
    return GridConfig(min_corner=(0, 0, 0), max_corner=(4, 4, 4), voxel_size=1.0)


def test_grid_config_validation():
    with pytest.raises(ConfigError):
        GridConfig(min_corner=(0, 0, 0), max_corner=(0, 1, 1), voxel_size=0.5)
    with pytest.raises(ConfigError):
        GridConfig(min_corner=(0, 0, 0), max_corner=(1, 1, 1), voxel_size=0.3)
    with pytest.raises(ConfigError):
        GridConfig(min_corner=(0, 0, 0), max_corner=(1, 1, 1), voxel_size=0.5, stride=0)


def test_street_scale_grid_dims():
    cfg = GridConfig(
        min_corner=(-51.2, -51.2, -3.0),
        max_corner=(51.2, 51.2, 5.0),
        voxel_size=0.2,
    )
    assert cfg.fine_dims == (512, 512, 40)


def test_voxel_index_boundaries(unit_grid):
    assert voxel_index((0, 0, 0), unit_grid) == (0, 0, 0)
    assert voxel_index((4, 4, 4), unit_grid) is None  # max face exclusive
    assert voxel_index((3.999, 0.0, 1.0), unit_grid) == (3, 0, 1)
    assert voxel_index((-0.001, 1, 1), unit_grid) is None


def test_voxel_index_center_roundtrip(unit_grid):
    for idx in [(0, 0, 0), (3, 2, 1), (1, 3, 3)]:
        center = unit_grid.voxel_center(idx)
        assert voxel_index(center, unit_grid) == idx


def test_bin_points_empty_and_basic(unit_grid):
    bins, dropped = bin_points(np.zeros((0, 3)), unit_grid)
    assert bins == [] and dropped == 0
    bins, dropped = bin_points([(0.5, 0.5, 0.5)], unit_grid)
    assert len(bins) == 1 and bins[0].count == 1 and dropped == 0


def test_bin_points_same_voxel_and_dropped(unit_grid):
    cloud = [(0.1, 0.1, 0.1), (9.0, 0.0, 0.0), (0.2, 0.2, 0.2), (0.3, 0.1, 0.4)]
    bins, dropped = bin_points(cloud, unit_grid)
    assert dropped == 1
    assert len(bins) == 1
    assert bins[0].count == 3
    assert bins[0].point_indices == (0, 2, 3)


def test_bin_points_partition_property(unit_grid):
    rng = np.random.default_rng(7)
    for _ in range(20):
        cloud = rng.uniform(-1, 5, (200, 3))
        bins, dropped = bin_points(cloud, unit_grid)
        assert sum(b.count for b in bins) + dropped == len(cloud)
        seen = sorted(i for b in bins for i in b.point_indices)
        assert len(seen) == len(set(seen))
        for b in bins:
            lo, hi = unit_grid.voxel_bounds(b.voxel_index)
            pts = cloud[list(b.point_indices)]
            assert np.all(pts >= lo) and np.all(pts < hi)


def _volume(dims, channels, rng):
    nx, ny, nz = dims
    return VoxelFeatureVolume(data=rng.normal(size=(nz, ny, nx, channels)))


def test_trilinear_exact_at_centers():
    rng = np.random.default_rng(0)
    vol = _volume((3, 4, 5), 2, rng)
    for idx in [(0, 0, 0), (2, 3, 4), (1, 2, 2)]:
        np.testing.assert_allclose(
            trilinear_sample(vol, idx), vol.at(idx), rtol=0, atol=0
        )


def test_trilinear_midpoint_and_constant():
    rng = np.random.default_rng(1)
    vol = _volume((3, 3, 3), 4, rng)
    mid = trilinear_sample(vol, (0.5, 0, 0))
    np.testing.assert_allclose(mid, 0.5 * (vol.at((0, 0, 0)) + vol.at((1, 0, 0))))
    const = VoxelFeatureVolume(data=np.full((2, 2, 2, 3), 1.25))
    np.testing.assert_allclose(trilinear_sample(const, (0.3, 0.7, 1.1)), 1.25)


def test_trilinear_linear_along_axes():
    rng = np.random.default_rng(2)
    vol = _volume((4, 4, 4), 1, rng)
    for axis in range(3):
        base = np.array([1.0, 1.0, 1.0])
        a = base.copy()
        b = base.copy()
        b[axis] += 1.0
        for t in (0.25, 0.5, 0.75):
            p = a * (1 - t) + b * t
            expect = (1 - t) * trilinear_sample(vol, a) + t * trilinear_sample(vol, b)
            np.testing.assert_allclose(trilinear_sample(vol, p), expect, atol=1e-12)


def test_trilinear_clamps_out_of_range():
    rng = np.random.default_rng(3)
    vol = _volume((2, 2, 2), 2, rng)
    np.testing.assert_allclose(
        trilinear_sample(vol, (-5, 0, 0)), trilinear_sample(vol, (0, 0, 0))
    )


def test_split_voxel_counts(unit_grid):
    fine, centers = split_voxel((1, 2, 3), 2, unit_grid)
    assert len(fine) == 8 and len(centers) == 8
    fine1, centers1 = split_voxel((1, 2, 3), 1, unit_grid)
    assert len(fine1) == 1
    np.testing.assert_allclose(centers1[0], unit_grid.voxel_center((1, 2, 3)))


def test_split_voxel_child_centers(unit_grid):
    _, centers = split_voxel((0, 0, 0), 2, unit_grid)
    parent = unit_grid.voxel_center((0, 0, 0))
    rel = np.sort(np.unique(np.round(centers - parent, 12).ravel()))
    np.testing.assert_allclose(rel, [-0.25, 0.25])


def test_split_voxel_tiles_parent(unit_grid):
    fine, _ = split_voxel((2, 1, 0), 3, unit_grid)
    keys = {tuple(f) for f in fine}
    assert len(keys) == 27
    expect = {
        (2 * 3 + i, 1 * 3 + j, 0 * 3 + k)
        for i in range(3)
        for j in range(3)
        for k in range(3)
    }
    assert keys == expect


def test_occg_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    labels = rng.integers(0, 5, (4, 3, 2)).astype(np.uint8)
    g = OccupancyGrid(labels=labels, voxel_size=0.2, min_corner=(-1, 0, 2))
    path = tmp_path / "g.occg"
    write_occg(path, g)
    back = read_occg(path)
    assert back.dims == g.dims
    np.testing.assert_array_equal(back.labels, labels)
    assert back.voxel_size == pytest.approx(0.2)


def test_occg_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.occg"
    path.write_bytes(b"NOPE" + b"\0" * 40)
    with pytest.raises(DataError):
        read_occg(path)
