"""Ground-camera to satellite-map coordinate transforms.

Conventions
-----------
World frame: origin at the camera position assumed by the coarse initial
estimate, x axis parallel to the satellite image's v axis, y axis pointing
straight down, z axis parallel to the satellite image's u axis.  The ground
plane is the plane y = camera height.

Camera frame: pinhole with x right, y down, z forward.  A pose
``(dx, dz, theta)`` places the query camera through a yaw rotation about the
down axis with ``R(0) = I`` and a translation ``t = (dx, 0, dz)`` applied
inside the rotation::

    p_world = R(theta) @ (p_cam + t)

``t`` is therefore a camera-frame offset; at ``theta = 0`` it coincides with
the world-frame (lateral, longitudinal) offsets in meters.

Satellite frame: orthographic top-down raster with u along world z and v
along world x, ``alpha`` meters per pixel::

    u_s = z / alpha + u0,    v_s = x / alpha + v0

Integer pixel coordinates address pixel centers everywhere.  Downscaling a
camera or satellite frame by a power of two therefore remaps coordinates as
``u' = (u + 0.5) / 2**k - 0.5``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

# Rays with a smaller downward component are treated as horizon/sky: their
# ground-plane depth would exceed height / EPS_HORIZON and explode.
EPS_HORIZON = 1e-3

# Ground points farther than this from the camera are discarded; the
# satellite tile only covers on the order of a hundred meters.
MAX_GROUND_RANGE_M = 100.0


class DegenerateViewError(ValueError):
    """Raised when a pose projects no ground pixel onto the satellite tile."""


def wrap_angle(theta: float) -> float:
    """Wrap an angle in radians to (-pi, pi]."""
    return math.pi - (math.pi - theta) % (2.0 * math.pi)


@dataclass(frozen=True)
class Pose3DoF:
    """Planar camera pose: lateral offset ``dx`` and longitudinal offset
    ``dz`` in meters, azimuth ``theta`` in radians (stored wrapped to
    (-pi, pi])."""

    dx: float
    dz: float
    theta: float

    def __post_init__(self):
        if not (math.isfinite(self.dx) and math.isfinite(self.dz)
                and math.isfinite(self.theta)):
            raise ValueError(f"pose fields must be finite, got {self}")
        object.__setattr__(self, "dx", float(self.dx))
        object.__setattr__(self, "dz", float(self.dz))
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dz, self.theta], dtype=np.float64)

    def perturbed(self, delta) -> "Pose3DoF":
        """Pose with (d_dx, d_dz, d_theta) added; theta re-wrapped."""
        d = np.asarray(delta, dtype=np.float64)
        return Pose3DoF(self.dx + d[0], self.dz + d[1], self.theta + d[2])

    def world_position(self) -> np.ndarray:
        """Camera center in world coordinates, ``R(theta) @ t``."""
        rot, t = pose_to_rt(self)
        return rot @ t


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics plus camera height above the ground plane."""

    fx: float
    fy: float
    cx: float
    cy: float
    height: float  # meters above the ground plane
    width: int     # image width in pixels
    height_px: int  # image height in pixels

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.height <= 0:
            raise ValueError("camera height must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height_px):
            raise ValueError("principal point must lie inside the image")

    def downscaled(self, halvings: int) -> "CameraModel":
        """Camera for an image downsampled by ``2**halvings`` (pixel-center
        convention)."""
        f = 2 ** halvings
        return CameraModel(
            fx=self.fx / f,
            fy=self.fy / f,
            cx=(self.cx + 0.5) / f - 0.5,
            cy=(self.cy + 0.5) / f - 0.5,
            height=self.height,
            width=self.width // f,
            height_px=self.height_px // f,
        )

    def intrinsic_matrix(self) -> np.ndarray:
        return np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])


@dataclass(frozen=True)
class SatelliteFrame:
    """Satellite raster geometry: meters per pixel and the pixel that maps
    to the world origin."""

    alpha: float  # meters per pixel
    u0: float
    v0: float
    width: int
    height: int

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if not (0 <= self.u0 < self.width and 0 <= self.v0 < self.height):
            raise ValueError("frame center must lie inside the raster")

    @classmethod
    def centered(cls, alpha: float, width: int, height: int) -> "SatelliteFrame":
        """Frame with the world origin at the raster center."""
        return cls(alpha=alpha, u0=(width - 1) / 2.0, v0=(height - 1) / 2.0,
                   width=width, height=height)

    def downscaled(self, halvings: int) -> "SatelliteFrame":
        """Frame for a raster downsampled by ``2**halvings``.  ``alpha *
        width`` (metric coverage) is preserved."""
        f = 2 ** halvings
        return SatelliteFrame(
            alpha=self.alpha * f,
            u0=(self.u0 + 0.5) / f - 0.5,
            v0=(self.v0 + 0.5) / f - 0.5,
            width=self.width // f,
            height=self.height // f,
        )

    def with_center(self, u0: float, v0: float) -> "SatelliteFrame":
        return replace(self, u0=float(u0), v0=float(v0))


@dataclass(frozen=True)
class GroundPixelGeometry:
    """Per-pixel backprojection through the ground-plane constraint.

    ``ray`` is K^-1 [u, v, 1]^T, ``w`` the depth scale making the camera
    point w * ray land on the ground plane.  ``w`` is NaN where ``valid`` is
    False (rays at or above the horizon carry no ground intersection).
    """

    ray: np.ndarray    # (..., 3)
    w: np.ndarray      # (...)
    valid: np.ndarray  # (...) bool

    def camera_points(self) -> np.ndarray:
        """Ground points in the camera frame, NaN where invalid."""
        return self.w[..., None] * self.ray


def pose_to_rt(pose: Pose3DoF) -> tuple[np.ndarray, np.ndarray]:
    """Rotation (yaw about the world down-axis, R(0) = I) and translation
    (dx, 0, dz) realizing the pose."""
    c = math.cos(pose.theta)
    s = math.sin(pose.theta)
    rot = np.array([
        [c, 0.0, s],
        [0.0, 1.0, 0.0],
        [-s, 0.0, c],
    ])
    t = np.array([pose.dx, 0.0, pose.dz])
    return rot, t


def backproject_ground_pixel(cam: CameraModel, u_g, v_g) -> GroundPixelGeometry:
    """Backproject ground-image pixels onto the ground plane.

    Accepts scalars or arrays; broadcasting applies.  Pixels whose ray does
    not point below the horizon (ray_y <= EPS_HORIZON) are flagged invalid.
    """
    u = np.asarray(u_g, dtype=np.float64)
    v = np.asarray(v_g, dtype=np.float64)
    u, v = np.broadcast_arrays(u, v)
    ray = np.empty(u.shape + (3,), dtype=np.float64)
    ray[..., 0] = (u - cam.cx) / cam.fx
    ray[..., 1] = (v - cam.cy) / cam.fy
    ray[..., 2] = 1.0
    ray_y = ray[..., 1]
    valid = ray_y > EPS_HORIZON
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(valid, cam.height / ray_y, np.nan)
    return GroundPixelGeometry(ray=ray, w=w, valid=valid)


def backproject_grid(cam: CameraModel) -> GroundPixelGeometry:
    """Backproject every pixel of the camera's image grid."""
    v, u = np.meshgrid(np.arange(cam.height_px), np.arange(cam.width),
                       indexing="ij")
    return backproject_ground_pixel(cam, u, v)


def camera_points_to_satellite(pose: Pose3DoF, sat: SatelliteFrame,
                               points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map camera-frame points (..., 3) to satellite pixel coordinates at
    the given pose (no validity checks)."""
    rot, t = pose_to_rt(pose)
    world = (points + t) @ rot.T
    u_s = world[..., 2] / sat.alpha + sat.u0
    v_s = world[..., 0] / sat.alpha + sat.v0
    return u_s, v_s


def satellite_bounds_mask(sat: SatelliteFrame, u_s: np.ndarray,
                          v_s: np.ndarray) -> np.ndarray:
    """True where coordinates admit 4-neighbor bilinear interpolation."""
    return ((u_s >= 0.0) & (u_s <= sat.width - 1)
            & (v_s >= 0.0) & (v_s <= sat.height - 1))


def ground_to_satellite(pose: Pose3DoF, cam: CameraModel, sat: SatelliteFrame,
                        u_g, v_g) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project ground-image pixels to satellite pixel coordinates.

    Returns (u_s, v_s, valid).  Coordinates are NaN for above-horizon
    pixels; ``valid`` additionally requires the ground point to lie within
    MAX_GROUND_RANGE_M of the camera and the projection to fall inside the
    satellite raster with a bilinear margin.
    """
    geom = backproject_ground_pixel(cam, u_g, v_g)
    points = geom.camera_points()
    with np.errstate(invalid="ignore"):
        dist = np.linalg.norm(points, axis=-1)
        in_range = geom.valid & (dist <= MAX_GROUND_RANGE_M)
    u_s, v_s = camera_points_to_satellite(pose, sat, points)
    with np.errstate(invalid="ignore"):
        valid = in_range & satellite_bounds_mask(sat, u_s, v_s)
    return u_s, v_s, valid


def satellite_to_ground(pose: Pose3DoF, cam: CameraModel, sat: SatelliteFrame,
                        u_s, v_s) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of :func:`ground_to_satellite` for points on the ground plane.

    Returns (u_g, v_g, valid) where ``valid`` means the world point lies in
    front of the camera.
    """
    u = np.asarray(u_s, dtype=np.float64)
    v = np.asarray(v_s, dtype=np.float64)
    u, v = np.broadcast_arrays(u, v)
    rot, t = pose_to_rt(pose)
    world = np.empty(u.shape + (3,), dtype=np.float64)
    world[..., 0] = (v - sat.v0) * sat.alpha
    world[..., 1] = cam.height
    world[..., 2] = (u - sat.u0) * sat.alpha
    p_cam = world @ rot - t
    z_c = p_cam[..., 2]
    valid = z_c > 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        u_g = cam.fx * p_cam[..., 0] / z_c + cam.cx
        v_g = cam.fy * p_cam[..., 1] / z_c + cam.cy
    return u_g, v_g, valid


def jacobian_pixel_wrt_pose(pose: Pose3DoF, cam: CameraModel,
                            sat: SatelliteFrame, u_g, v_g) -> np.ndarray:
    """Derivative of the projected satellite coordinates with respect to
    (dx, dz, theta).

    Returns an array of shape (..., 2, 3); rows are (u_s, v_s), columns are
    the pose parameters in px/m, px/m, px/rad.  Rows are NaN for invalid
    (above-horizon) pixels.  The ground-plane depth w is fixed by the
    camera height, so only the rigid transform differentiates.
    """
    geom = backproject_ground_pixel(cam, u_g, v_g)
    points = geom.camera_points()
    jac = jacobian_from_camera_points(pose, sat, points)
    jac[~geom.valid] = np.nan
    return jac


def jacobian_from_camera_points(pose: Pose3DoF, sat: SatelliteFrame,
                                points: np.ndarray) -> np.ndarray:
    """Pose Jacobian given precomputed camera-frame ground points (..., 3)."""
    c = math.cos(pose.theta)
    s = math.sin(pose.theta)
    qx = points[..., 0] + pose.dx
    qz = points[..., 2] + pose.dz
    xw = c * qx + s * qz
    zw = -s * qx + c * qz
    inv_a = 1.0 / sat.alpha
    jac = np.empty(points.shape[:-1] + (2, 3), dtype=np.float64)
    jac[..., 0, 0] = -s * inv_a
    jac[..., 0, 1] = c * inv_a
    jac[..., 0, 2] = -xw * inv_a
    jac[..., 1, 0] = c * inv_a
    jac[..., 1, 1] = s * inv_a
    jac[..., 1, 2] = zw * inv_a
    return jac
