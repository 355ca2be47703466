# camera.py

from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from errors import ConfigurationError

ORTHONORMAL_TOLERANCE = 1e-6


class CameraView(BaseModel):
    """Pinhole camera: intrinsics in pixels plus a world->camera rigid transform."""

    model_config = ConfigDict(extra="forbid")

    id: str
    fx: float
    fy: float
    cx: float
    cy: float
    extrinsics: List[float]

    @field_validator("extrinsics")
    @classmethod
    def _check_rigid_transform(cls, value: List[float]) -> List[float]:
        if len(value) != 16:
            raise ValueError("extrinsics must hold 16 values (4x4 row-major)")
        matrix = np.asarray(value, dtype=np.float64).reshape(4, 4)
        if not np.all(np.isfinite(matrix)):
            raise ValueError("extrinsics must be finite")
        if np.max(np.abs(matrix[3] - np.array([0.0, 0.0, 0.0, 1.0]))) > ORTHONORMAL_TOLERANCE:
            raise ValueError("last extrinsics row must be [0, 0, 0, 1]")
        rotation = matrix[:3, :3]
        if np.max(np.abs(rotation @ rotation.T - np.eye(3))) > ORTHONORMAL_TOLERANCE:
            raise ValueError("extrinsic rotation block is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > ORTHONORMAL_TOLERANCE:
            raise ValueError("extrinsic rotation block must have det +1")
        return value

    @property
    def matrix(self) -> np.ndarray:
        return np.asarray(self.extrinsics, dtype=np.float64).reshape(4, 4)

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def check_intrinsics(self):
        if self.fx == 0 or self.fy == 0:
            raise ConfigurationError(f"camera {self.id}: degenerate intrinsics fx={self.fx}, fy={self.fy}")

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return (points - self.translation) @ self.rotation

    def project(self, points_cam: np.ndarray) -> np.ndarray:
        """Camera-frame points (N, 3) to pixel coordinates (N, 2) as (u, v)."""
        points_cam = np.atleast_2d(np.asarray(points_cam, dtype=np.float64))
        z = points_cam[:, 2]
        u = self.fx * points_cam[:, 0] / z + self.cx
        v = self.fy * points_cam[:, 1] / z + self.cy
        return np.stack([u, v], axis=1)

    def back_project(self, u: np.ndarray, v: np.ndarray, z: np.ndarray) -> np.ndarray:
        """Pixel coordinates plus depth along the optical axis to camera-frame points."""
        u, v, z = (np.asarray(a, dtype=np.float64) for a in (u, v, z))
        x = (u - self.cx) * z / self.fx
        y = (v - self.cy) * z / self.fy
        return np.stack([x, y, z], axis=-1)


class CameraRig(BaseModel):
    """Synchronized views sharing one image resolution (H, W)."""

    model_config = ConfigDict(extra="forbid")

    resolution: Tuple[int, int]
    views: List[CameraView]

    @field_validator("resolution")
    @classmethod
    def _check_resolution(cls, value: Tuple[int, int]) -> Tuple[int, int]:
        if value[0] <= 0 or value[1] <= 0:
            raise ValueError("resolution must be positive")
        return value

    @model_validator(mode="after")
    def _check_views(self) -> "CameraRig":
        if not self.views:
            raise ValueError("a rig needs at least one view")
        ids = [view.id for view in self.views]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate view ids: {ids}")
        return self

    @property
    def view_ids(self) -> List[str]:
        return [view.id for view in self.views]

    def view(self, view_id: str) -> CameraView:
        for view in self.views:
            if view.id == view_id:
                return view
        raise ConfigurationError(f"unknown view id {view_id!r}, rig has {self.view_ids}")

    def transfer(self, points: np.ndarray, from_view: str, to_view: str) -> np.ndarray:
        """Express camera-frame points of one view in another view's camera frame."""
        world = self.view(from_view).camera_to_world(points)
        return self.view(to_view).world_to_camera(world)


def rotation_about_y(angle_rad: float) -> np.ndarray:
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def default_rig(
    resolution: int = 64,
    focal_px: float = 80.0,
    distance_mm: float = 500.0,
    azimuth_deg: float = 60.0,
) -> CameraRig:
    """
    Two cameras looking at a working volume centred at (0, 0, distance_mm) in
    the view-1 frame (which doubles as the world frame). View 2 sits at the same
    distance, rotated by azimuth_deg about the vertical (y) axis through the
    volume centre.
    """
    centre = np.array([0.0, 0.0, distance_mm])
    orbit = rotation_about_y(np.radians(azimuth_deg))
    position = centre + orbit @ np.array([0.0, 0.0, -distance_mm])
    rotation = orbit.T
    second = np.eye(4)
    second[:3, :3] = rotation
    second[:3, 3] = -rotation @ position

    intrinsics = dict(fx=focal_px, fy=focal_px, cx=resolution / 2.0, cy=resolution / 2.0)
    return CameraRig(
        resolution=(resolution, resolution),
        views=[
            CameraView(id="view1", extrinsics=np.eye(4).reshape(-1).tolist(), **intrinsics),
            CameraView(id="view2", extrinsics=second.reshape(-1).tolist(), **intrinsics),
        ],
    )
