"""Pinhole camera rig, world-to-image projection and 2D feature sampling."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError

NEAR_PLANE = 1e-3  # meters; points closer than this are treated as invisible


@dataclass
class CameraModel:
    """Pinhole camera: 3x3 intrinsics plus a 4x4 world-to-camera transform."""

    cam_id: str
    intrinsics: np.ndarray  # 3x3, (fx, 0, cx; 0, fy, cy; 0, 0, 1)
    extrinsics: np.ndarray  # 4x4 rigid world -> camera
    image_size: tuple  # (width, height) pixels

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        self.extrinsics = np.asarray(self.extrinsics, dtype=np.float64).reshape(4, 4)
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))
        if self.intrinsics[0, 0] <= 0 or self.intrinsics[1, 1] <= 0:
            raise ConfigError("focal lengths must be positive")
        if self.image_size[0] < 1 or self.image_size[1] < 1:
            raise ConfigError("image_size must be at least 1x1")
        rot = self.extrinsics[:3, :3]
        if np.max(np.abs(rot.T @ rot - np.eye(3))) >= 1e-9:
            raise ConfigError("extrinsic rotation block must be orthonormal")

    @property
    def fx(self):
        return self.intrinsics[0, 0]

    @property
    def fy(self):
        return self.intrinsics[1, 1]

    @property
    def cx(self):
        return self.intrinsics[0, 2]

    @property
    def cy(self):
        return self.intrinsics[1, 2]


@dataclass
class FeatureMap:
    """One camera's 2D feature map, stored row-major (y, x, c)."""

    camera_id: str
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ConfigError("feature map must be (h, w, c)")

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]


@dataclass
class FeatureMapSet:
    """Feature maps for every camera of the rig, in rig order."""

    maps: list

    def __post_init__(self):
        if self.maps:
            c = self.maps[0].channels
            if any(m.channels != c for m in self.maps):
                raise ConfigError("all feature maps must share the channel count")

    @property
    def channels(self):
        return self.maps[0].channels if self.maps else 0

    def by_camera(self, cam_id):
        for m in self.maps:
            if m.camera_id == cam_id:
                return m
        raise DataError(f"no feature map for camera {cam_id!r}")


@dataclass
class ProjectedReference:
    """Image projections of flattened reference points, per camera.

    ``valid[c, p]`` marks point p visible in camera c; ``pixels[c, p]`` is
    its feature-map coordinate. ``point_voxel`` maps flat point rows to rows
    of ``voxel_keys``.
    """

    voxel_keys: np.ndarray  # (V, 3)
    point_voxel: np.ndarray  # (P,)
    cam_ids: list
    valid: np.ndarray  # (n_cam, P) bool
    pixels: np.ndarray  # (n_cam, P, 2)

    def projections_of(self, flat_point: int):
        """(cam_id, pixel) pairs for one flat point row, in rig order."""
        return [
            (self.cam_ids[c], self.pixels[c, flat_point].copy())
            for c in range(len(self.cam_ids))
            if self.valid[c, flat_point]
        ]


def project_batch(points: np.ndarray, cam: CameraModel, feat_size=None):
    """Project world points into one camera.

    ``feat_size`` is the (width, height) of the sampled feature map; image
    coordinates are rescaled accordingly. Defaults to full image resolution.
    Returns (valid (n,) bool, pixels (n, 2)).
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    wc, hc = feat_size if feat_size is not None else cam.image_size
    cam_pts = pts @ cam.extrinsics[:3, :3].T + cam.extrinsics[:3, 3]
    z = cam_pts[:, 2]
    valid = z > NEAR_PLANE
    zsafe = np.where(valid, z, 1.0)
    u = cam.fx * cam_pts[:, 0] / zsafe + cam.cx
    v = cam.fy * cam_pts[:, 1] / zsafe + cam.cy
    sx = wc / cam.image_size[0]
    sy = hc / cam.image_size[1]
    px = np.stack([u * sx, v * sy], axis=1)
    valid &= (
        (px[:, 0] >= 0.0)
        & (px[:, 0] <= wc - 1.0)
        & (px[:, 1] >= 0.0)
        & (px[:, 1] <= hc - 1.0)
    )
    return valid, px


def project(point, cam: CameraModel, feat_size=None):
    """Project one world point; returns the pixel or None when invisible."""
    valid, px = project_batch(np.asarray(point).reshape(1, 3), cam, feat_size)
    return px[0] if valid[0] else None


def project_all(refs, rig, feat_sizes=None) -> ProjectedReference:
    """Project every reference point into every camera of the rig.

    ``feat_sizes`` is an optional list of (width, height) per camera, e.g.
    the shapes of the encoded feature maps.
    """
    if not rig:
        raise ConfigError("camera rig must not be empty")
    keys, point_voxel, positions, _, _ = refs.flatten()
    n_cam = len(rig)
    n_pts = len(positions)
    valid = np.zeros((n_cam, n_pts), dtype=bool)
    pixels = np.zeros((n_cam, n_pts, 2), dtype=np.float64)
    for c, cam in enumerate(rig):
        fs = feat_sizes[c] if feat_sizes is not None else None
        valid[c], pixels[c] = project_batch(positions, cam, fs)
    return ProjectedReference(
        voxel_keys=keys,
        point_voxel=point_voxel,
        cam_ids=[cam.cam_id for cam in rig],
        valid=valid,
        pixels=pixels,
    )


def bilinear(fmap: FeatureMap, pixel) -> np.ndarray:
    """Sample a feature map with 4-neighbor bilinear interpolation (clamped)."""
    return bilinear_batch(fmap.data, np.asarray(pixel).reshape(1, 2))[0]


def bilinear_batch(data: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    h, w = data.shape[:2]
    p = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    x = np.clip(p[:, 0], 0.0, w - 1.0)
    y = np.clip(p[:, 1], 0.0, h - 1.0)
    x0 = np.clip(np.floor(x).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(y).astype(np.int64), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    v00 = data[y0, x0]
    v10 = data[y0, x1]
    v01 = data[y1, x0]
    v11 = data[y1, x1]
    return (
        v00 * (1 - fx) * (1 - fy)
        + v10 * fx * (1 - fy)
        + v01 * (1 - fx) * fy
        + v11 * fx * fy
    )


def rig_to_json(rig) -> dict:
    return {
        "cameras": [
            {
                "id": cam.cam_id,
                "width": cam.image_size[0],
                "height": cam.image_size[1],
                "intrinsics": [float(v) for v in cam.intrinsics.ravel()],
                "extrinsics": [float(v) for v in cam.extrinsics.ravel()],
            }
            for cam in rig
        ]
    }


def rig_from_json(obj) -> list:
    try:
        return [
            CameraModel(
                cam_id=str(c["id"]),
                intrinsics=np.asarray(c["intrinsics"]).reshape(3, 3),
                extrinsics=np.asarray(c["extrinsics"]).reshape(4, 4),
                image_size=(c["width"], c["height"]),
            )
            for c in obj["cameras"]
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed camera rig JSON: {exc}") from exc


def save_rig(path, rig) -> None:
    with open(path, "w") as fh:
        json.dump(rig_to_json(rig), fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_rig(path) -> list:
    with open(path) as fh:
        return rig_from_json(json.load(fh))


def look_at_extrinsics(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera transform looking from ``eye`` toward ``target``.

    Camera convention: +z forward, +x right, +y down.
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    nr = np.linalg.norm(right)
    if nr < 1e-12:
        raise ConfigError("view direction parallel to up vector")
    right /= nr
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    ext = np.eye(4)
    ext[:3, :3] = rot
    ext[:3, 3] = -rot @ eye
    return ext
