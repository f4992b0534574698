"""Cameras, per-pixel viewing rays, and the bounded viewing frustum.

Conventions (binding for the whole package):
  * images are indexed row-major, pixel (row, col) has its centre at the
    continuous image point (col + 0.5, row + 0.5);
  * ``Camera.rotation`` maps world coordinates into the camera frame,
    ``Camera.translation`` is the world origin expressed in that frame, so a
    world point x sits at ``rotation @ x + translation`` in camera space;
  * the camera looks down +z of its own frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractViolation

# Scale factor applied to the largest camera-to-point distance when deriving
# the frustum radius of a scene.
R_MAX_SCALE = 2.0


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a bounded viewing frustum of radius ``r_max``."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray
    translation: np.ndarray
    r_max: float

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if np.abs(R.T @ R - np.eye(3)).max() >= 1e-9:
            raise ContractViolation("camera rotation is not orthonormal")
        if not self.r_max > 0:
            raise ContractViolation("r_max must be > 0")
        if not (self.fx > 0 and self.fy > 0):
            raise ContractViolation("focal lengths must be > 0")
        if self.width <= 0 or self.height <= 0:
            raise ContractViolation("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ContractViolation("principal point must lie inside the image")

    @property
    def position(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        """Map (..., 3) world points into the camera frame."""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class PixelRay:
    """A unit viewing direction through one pixel centre, in world frame."""

    pixel: tuple
    direction: np.ndarray


def pixel_direction(cam: Camera, row: int, col: int) -> PixelRay:
    """Unit world-frame ray through the centre of pixel (row, col)."""
    if not (0 <= row < cam.height):
        raise IndexError(f"row {row} outside [0, {cam.height})")
    if not (0 <= col < cam.width):
        raise IndexError(f"col {col} outside [0, {cam.width})")
    v = np.array(
        [
            (col + 0.5 - cam.cx) / cam.fx,
            (row + 0.5 - cam.cy) / cam.fy,
            1.0,
        ]
    )
    d = cam.rotation.T @ v
    d /= np.linalg.norm(d)
    return PixelRay(pixel=(row, col), direction=d)


def pixel_directions(cam: Camera) -> np.ndarray:
    """Unit world-frame rays for every pixel, shape (height, width, 3)."""
    cols = (np.arange(cam.width) + 0.5 - cam.cx) / cam.fx
    rows = (np.arange(cam.height) + 0.5 - cam.cy) / cam.fy
    v = np.empty((cam.height, cam.width, 3))
    v[..., 0] = cols[None, :]
    v[..., 1] = rows[:, None]
    v[..., 2] = 1.0
    d = v @ cam.rotation
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return d


def compute_r_max(camera_positions, points, lambda_scale: float = R_MAX_SCALE) -> float:
    """Frustum radius: ``lambda_scale`` times the largest camera-to-point distance.

    One scene-level value shared by all cameras.
    """
    cams = np.atleast_2d(np.asarray(camera_positions, dtype=np.float64))
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if cams.size == 0 or pts.size == 0:
        raise ConfigError("compute_r_max needs at least one camera and one point")
    if not lambda_scale > 0:
        raise ConfigError("lambda_scale must be > 0")
    diffs = cams[:, None, :] - pts[None, :, :]
    return float(lambda_scale * np.sqrt((diffs**2).sum(axis=2)).max())


def save_cameras(path, cameras) -> None:
    """Write cameras as a plain-text table, one record per line.

    Field order: fx fy cx cy width height, the 9 rotation entries row-major,
    the 3 translation entries, r_max. Floats use repr so the table
    round-trips exactly.
    """
    lines = ["# aquasplat cameras v1"]
    for cam in cameras:
        vals = [cam.fx, cam.fy, cam.cx, cam.cy]
        fields = [repr(float(v)) for v in vals]
        fields += [str(cam.width), str(cam.height)]
        fields += [repr(float(v)) for v in cam.rotation.reshape(9)]
        fields += [repr(float(v)) for v in cam.translation]
        fields.append(repr(float(cam.r_max)))
        lines.append(" ".join(fields))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_cameras(path) -> list:
    """Read a camera table written by :func:`save_cameras`."""
    cameras = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 19:
                raise ConfigError(f"camera record has {len(parts)} fields, expected 19")
            fx, fy, cx, cy = (float(p) for p in parts[0:4])
            width, height = int(parts[4]), int(parts[5])
            rotation = np.array([float(p) for p in parts[6:15]]).reshape(3, 3)
            translation = np.array([float(p) for p in parts[15:18]])
            r_max = float(parts[18])
            cameras.append(
                Camera(
                    fx=fx,
                    fy=fy,
                    cx=cx,
                    cy=cy,
                    width=width,
                    height=height,
                    rotation=rotation,
                    translation=translation,
                    r_max=r_max,
                )
            )
    return cameras
