"""Bilinear sampling of satellite features at projected coordinates.

Produces the satellite feature map resampled into ground-view pixel
geometry for a hypothesized pose, together with the validity mask and the
spatial derivatives needed for the pose Jacobian chain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry
from .features import FeatureMap
from .geometry import CameraModel, GroundPixelGeometry, Pose3DoF, SatelliteFrame


class LevelMismatchError(ValueError):
    """Raised when inputs from different pyramid levels are combined."""


def _as_data(fmap) -> np.ndarray:
    data = fmap.data if isinstance(fmap, FeatureMap) else np.asarray(fmap)
    if data.ndim == 2:
        data = data[:, :, None]
    return data


def bilinear_sample(fmap, u, v) -> np.ndarray:
    """Sample (H, W[, C]) data at fractional coordinates with the standard
    4-neighbor bilinear blend.

    ``u`` indexes columns, ``v`` rows; both must lie in [0, dim - 1].
    Returns one channel vector per coordinate (scalar grids yield a single
    channel).
    """
    data = _as_data(fmap)
    h, w = data.shape[:2]
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if np.any((u < 0) | (u > w - 1) | (v < 0) | (v > h - 1)):
        raise ValueError("sample coordinates out of range")
    j = np.clip(np.floor(u).astype(np.intp), 0, w - 2)
    i = np.clip(np.floor(v).astype(np.intp), 0, h - 2)
    a = (u - j)[..., None]
    b = (v - i)[..., None]
    f00 = data[i, j]
    f01 = data[i, j + 1]
    f10 = data[i + 1, j]
    f11 = data[i + 1, j + 1]
    return ((1 - a) * (1 - b) * f00 + a * (1 - b) * f01
            + (1 - a) * b * f10 + a * b * f11)


def bilinear_gradient(fmap, u, v) -> tuple[np.ndarray, np.ndarray]:
    """Exact spatial derivative of the bilinear interpolant.

    Returns (df/du, df/dv), each shaped like the coordinates with a trailing
    channel axis.  The interpolant is piecewise bilinear, so the derivative
    is taken within the cell containing (u, v); on cell boundaries the
    lower-index cell wins.
    """
    data = _as_data(fmap)
    h, w = data.shape[:2]
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if np.any((u < 0) | (u > w - 1) | (v < 0) | (v > h - 1)):
        raise ValueError("sample coordinates out of range")
    j = np.clip(np.ceil(u).astype(np.intp) - 1, 0, w - 2)
    i = np.clip(np.ceil(v).astype(np.intp) - 1, 0, h - 2)
    a = (u - j)[..., None]
    b = (v - i)[..., None]
    f00 = data[i, j]
    f01 = data[i, j + 1]
    f10 = data[i + 1, j]
    f11 = data[i + 1, j + 1]
    du = (1 - b) * (f01 - f00) + b * (f11 - f10)
    dv = (1 - a) * (f10 - f00) + a * (f11 - f01)
    return du, dv


@dataclass(frozen=True)
class ProjectedFeatures:
    """Satellite features resampled into ground-view geometry.

    ``features`` is (H_g, W_g, C) with exact zeros at masked pixels;
    ``coords`` holds the satellite (u_s, v_s) used for sampling, NaN where
    the projection was invalid.
    """

    features: np.ndarray
    mask: np.ndarray
    coords: np.ndarray  # (H_g, W_g, 2)


def project_features(sat_level: FeatureMap, pose: Pose3DoF,
                     cam_level: CameraModel,
                     sat_frame_level: SatelliteFrame | None = None,
                     *, ground_geometry: GroundPixelGeometry | None = None
                     ) -> ProjectedFeatures:
    """Project the satellite feature map into the ground view at ``pose``.

    All inputs must describe the same pyramid level; the satellite frame
    defaults to the one carried by ``sat_level``.  ``ground_geometry`` may
    supply a precomputed backprojection of the ground pixel grid (it is
    pose-independent, so solvers cache it across iterations).
    """
    frame = sat_frame_level if sat_frame_level is not None else sat_level.frame
    if frame is None:
        raise LevelMismatchError("satellite level carries no frame")
    data = sat_level.data
    if (frame.width, frame.height) != (data.shape[1], data.shape[0]):
        raise LevelMismatchError(
            f"satellite frame {frame.width}x{frame.height} does not match "
            f"feature map {data.shape[1]}x{data.shape[0]}")
    if ground_geometry is None:
        ground_geometry = geometry.backproject_grid(cam_level)
    if ground_geometry.valid.shape != (cam_level.height_px, cam_level.width):
        raise LevelMismatchError("ground geometry does not match the camera grid")

    points = ground_geometry.camera_points()
    with np.errstate(invalid="ignore"):
        in_range = ground_geometry.valid & (
            np.linalg.norm(points, axis=-1) <= geometry.MAX_GROUND_RANGE_M)
    u_s, v_s = geometry.camera_points_to_satellite(pose, frame, points)
    with np.errstate(invalid="ignore"):
        mask = in_range & geometry.satellite_bounds_mask(frame, u_s, v_s)

    features = np.zeros(mask.shape + (data.shape[2],), dtype=np.float64)
    if np.any(mask):
        features[mask] = bilinear_sample(data, u_s[mask], v_s[mask])
    coords = np.full(mask.shape + (2,), np.nan)
    coords[mask, 0] = u_s[mask]
    coords[mask, 1] = v_s[mask]
    return ProjectedFeatures(features=features, mask=mask, coords=coords)
