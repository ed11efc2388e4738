import numpy as np
import pytest

from occkit.errors import ConfigError
from occkit.cameras import (
    CameraModel,
    FeatureMap,
    bilinear,
    load_rig,
    look_at_extrinsics,
    project,
    project_all,
    save_rig,
)
from occkit.grid import GridConfig
from occkit.pointprep import FillScope, PreprocessConfig, preprocess


def make_cam(cam_id="cam", fx=100.0, fy=100.0, cx=50.0, cy=50.0, ext=None, size=(101, 101)):
    intr = np.array([[fx, 0, cx], [0, fy, cy], [0, 0, 1.0]])
    return CameraModel(
        cam_id=cam_id,
        intrinsics=intr,
        extrinsics=np.eye(4) if ext is None else ext,
        image_size=size,
    )


def test_camera_validation():
    with pytest.raises(ConfigError):
        make_cam(fx=-1.0)
    bad = np.eye(4)
    bad[0, 1] = 0.5
    with pytest.raises(ConfigError):
        make_cam(ext=bad)


def test_project_pinhole_arithmetic():
    cam = make_cam()
    px = project((0.1, 0.2, 1.0), cam)
    np.testing.assert_allclose(px, (60.0, 70.0), atol=1e-12)


def test_project_behind_camera_absent():
    cam = make_cam()
    assert project((0.0, 0.0, -1.0), cam) is None
    assert project((0.0, 0.0, 0.0), cam) is None  # at the near plane


def test_project_optical_axis_hits_principal_point():
    cam = make_cam()
    for z in (0.01, 1.0, 50.0):
        np.testing.assert_allclose(project((0, 0, z), cam), (50.0, 50.0), atol=1e-9)


def test_project_feature_map_scaling():
    cam = make_cam(size=(100, 100))
    px = project((0.1, 0.2, 1.0), cam, feat_size=(50, 25))
    np.testing.assert_allclose(px, (60.0 * 0.5, 70.0 * 0.25), atol=1e-12)


def test_project_out_of_bounds_absent():
    cam = make_cam(size=(40, 40))
    assert project((10.0, 0.0, 1.0), cam) is None


def test_backprojection_roundtrip():
    rng = np.random.default_rng(0)
    ext = look_at_extrinsics((1.0, -2.0, 0.5), (0.0, 0.0, 0.0))
    cam = make_cam(ext=ext, size=(201, 201), cx=100.0, cy=100.0)
    for _ in range(50):
        p = rng.uniform(-0.5, 0.5, 3)
        cam_p = ext[:3, :3] @ p + ext[:3, 3]
        px = project(p, cam)
        if px is None:
            continue
        z = cam_p[2]
        ray = np.array([(px[0] - cam.cx) / cam.fx, (px[1] - cam.cy) / cam.fy, 1.0]) * z
        back = ext[:3, :3].T @ (ray - ext[:3, 3])
        np.testing.assert_allclose(back, p, atol=1e-9)


def test_rigid_invariance():
    rng = np.random.default_rng(1)
    ext = look_at_extrinsics((0.0, -3.0, 1.0), (0.0, 0.0, 0.0))
    cam = make_cam(ext=ext, size=(201, 201), cx=100.0, cy=100.0)
    # random rigid world transform
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    theta = 0.7
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    rot = np.eye(3) + np.sin(theta) * k + (1 - np.cos(theta)) * (k @ k)
    trans = rng.normal(size=3)
    world_t = np.eye(4)
    world_t[:3, :3] = rot
    world_t[:3, 3] = trans
    cam2 = make_cam(ext=ext @ np.linalg.inv(world_t), size=(201, 201), cx=100.0, cy=100.0)
    for _ in range(30):
        p = rng.uniform(-0.5, 0.5, 3)
        px1 = project(p, cam)
        px2 = project(rot @ p + trans, cam2)
        if px1 is None:
            assert px2 is None
        else:
            np.testing.assert_allclose(px1, px2, atol=1e-9)


def _refs_for(points):
    grid = GridConfig(min_corner=(-2, -2, -2), max_corner=(2, 2, 2), voxel_size=1.0)
    from occkit.grid import bin_points

    bins, _ = bin_points(points, grid)
    cfg = PreprocessConfig(tau=0, theta=1, fill_scope=FillScope.NON_EMPTY_ONLY)
    return preprocess(bins, points, cfg, grid)


def test_project_all_duplicate_camera():
    ext = look_at_extrinsics((0.0, -3.0, 0.0), (0.0, 0.0, 0.0))
    cam = make_cam(cam_id="a", ext=ext, size=(201, 201), cx=100.0, cy=100.0)
    twin = make_cam(cam_id="b", ext=ext, size=(201, 201), cx=100.0, cy=100.0)
    refs = _refs_for(np.array([[0.1, 0.1, 0.1], [-0.4, 0.2, -0.3]]))
    table = project_all(refs, [cam, twin])
    for p in range(table.valid.shape[1]):
        projs = table.projections_of(p)
        assert len(projs) == 2
        np.testing.assert_allclose(projs[0][1], projs[1][1])


def test_project_all_invisible_point():
    ext = look_at_extrinsics((0.0, -3.0, 0.0), (0.0, -4.0, 0.0))  # faces away
    cam = make_cam(ext=ext, size=(201, 201), cx=100.0, cy=100.0)
    refs = _refs_for(np.array([[0.0, 0.0, 0.0]]))
    table = project_all(refs, [cam])
    assert table.projections_of(0) == []


def test_project_all_stereo_overlap():
    # Two cameras converging on the origin; a point between them is seen by both.
    left = make_cam(
        cam_id="L",
        ext=look_at_extrinsics((-0.5, -3.0, 0.0), (0.0, 0.0, 0.0)),
        size=(201, 201),
        cx=100.0,
        cy=100.0,
    )
    right = make_cam(
        cam_id="R",
        ext=look_at_extrinsics((0.5, -3.0, 0.0), (0.0, 0.0, 0.0)),
        size=(201, 201),
        cx=100.0,
        cy=100.0,
    )
    refs = _refs_for(np.array([[0.0, 0.0, 0.05]]))
    table = project_all(refs, [left, right])
    assert len(table.projections_of(0)) == 2


def test_bilinear_integer_and_center():
    rng = np.random.default_rng(2)
    fmap = FeatureMap(camera_id="c", data=rng.normal(size=(4, 5, 3)))
    np.testing.assert_allclose(bilinear(fmap, (2, 3)), fmap.data[3, 2])
    center = bilinear(fmap, (1.5, 2.5))
    block = fmap.data[2:4, 1:3].reshape(4, 3)
    np.testing.assert_allclose(center, block.mean(axis=0), atol=1e-12)


def test_bilinear_constant_and_linearity():
    const = FeatureMap(camera_id="c", data=np.full((3, 3, 2), 0.7))
    np.testing.assert_allclose(bilinear(const, (0.31, 1.87)), 0.7)
    rng = np.random.default_rng(3)
    m1 = rng.normal(size=(4, 4, 2))
    m2 = rng.normal(size=(4, 4, 2))
    p = (1.3, 2.1)
    lhs = bilinear(FeatureMap(camera_id="c", data=2.0 * m1 - 0.5 * m2), p)
    rhs = 2.0 * bilinear(FeatureMap(camera_id="c", data=m1), p) - 0.5 * bilinear(
        FeatureMap(camera_id="c", data=m2), p
    )
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_bilinear_clamps():
    rng = np.random.default_rng(4)
    fmap = FeatureMap(camera_id="c", data=rng.normal(size=(3, 3, 1)))
    np.testing.assert_allclose(bilinear(fmap, (-3.0, 1.0)), bilinear(fmap, (0.0, 1.0)))
    np.testing.assert_allclose(bilinear(fmap, (9.0, 9.0)), fmap.data[2, 2])


def test_rig_json_roundtrip(tmp_path):
    cams = [
        make_cam(cam_id="front"),
        make_cam(cam_id="left", ext=look_at_extrinsics((1, 1, 1), (0, 0, 0))),
    ]
    path = tmp_path / "rig.json"
    save_rig(path, cams)
    back = load_rig(path)
    assert [c.cam_id for c in back] == ["front", "left"]
    for a, b in zip(cams, back):
        np.testing.assert_allclose(a.intrinsics, b.intrinsics)
        np.testing.assert_allclose(a.extrinsics, b.extrinsics)
        assert a.image_size == b.image_size
