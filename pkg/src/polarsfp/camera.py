"""Pinhole camera model and coordinate-frame conventions.

Two frames are used throughout the package:

* the *optical* frame: x right, y down, z along the optical axis into the scene.
  Depth maps, point clouds and scene geometry live here.
* the *view* frame: x right, y down, z pointing back toward the camera. Surface
  normals, viewing directions and angles of polarization live here, so that a
  fronto-parallel surface has normal (0, 0, 1) and the orthographic viewing
  direction is (0, 0, 1). It is the optical frame with z negated.
"""

import json
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial.transform import Rotation

from polarsfp.errors import ConfigurationError

CAMERA_KEYS = {"fx", "fy", "cx", "cy", "width", "height", "rotation_axis_angle", "translation"}


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics plus extrinsics mapping depth-camera coords to this camera.

    The extrinsics of a standalone camera are the identity.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation_axis_angle: tuple = (0.0, 0.0, 0.0)
    translation: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigurationError("focal lengths must be positive")
        if np.linalg.norm(self.rotation_axis_angle) >= np.pi:
            raise ConfigurationError("axis-angle magnitude must be below pi")
        object.__setattr__(self, "rotation_axis_angle", tuple(float(x) for x in self.rotation_axis_angle))
        object.__setattr__(self, "translation", tuple(float(x) for x in self.translation))

    @property
    def shape(self):
        return (self.height, self.width)

    @property
    def rotation(self):
        return Rotation.from_rotvec(self.rotation_axis_angle).as_matrix()

    @property
    def extrinsic_params(self):
        return np.array(self.rotation_axis_angle + self.translation)

    def with_extrinsics(self, params):
        params = np.asarray(params, dtype=float)
        return replace(self, rotation_axis_angle=tuple(params[:3]), translation=tuple(params[3:]))

    def pixel_grid(self):
        """Pixel-centre coordinates (u, v), each shaped (height, width)."""
        return np.meshgrid(np.arange(self.width, dtype=float), np.arange(self.height, dtype=float))

    def project(self, points):
        """Project optical-frame points (..., 3) to pixel coordinates (..., 2)."""
        z = points[..., 2]
        u = self.fx * points[..., 0] / z + self.cx
        v = self.fy * points[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1)

    def to_dict(self):
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "rotation_axis_angle": list(self.rotation_axis_angle),
            "translation": list(self.translation),
        }

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - CAMERA_KEYS
        if unknown:
            raise ConfigurationError(f"unknown camera keys: {sorted(unknown)}")
        return cls(
            fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
            width=int(d["width"]), height=int(d["height"]),
            rotation_axis_angle=tuple(d.get("rotation_axis_angle", (0.0, 0.0, 0.0))),
            translation=tuple(d.get("translation", (0.0, 0.0, 0.0))),
        )


def load_cameras(path):
    """Read a camera JSON file: either a single camera or {"depth": ..., "polar": ...}."""
    with open(path) as f:
        data = json.load(f)
    if "fx" in data:
        return CameraModel.from_dict(data)
    unknown = set(data) - {"depth", "polar"}
    if unknown:
        raise ConfigurationError(f"unknown camera blocks: {sorted(unknown)}")
    return {name: CameraModel.from_dict(block) for name, block in data.items()}


def optical_to_view(vectors):
    out = np.array(vectors, dtype=float, copy=True)
    out[..., 2] *= -1.0
    return out


view_to_optical = optical_to_view
