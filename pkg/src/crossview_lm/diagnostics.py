"""Self-check routines: finite-difference Jacobian verification,
projection round trips and descent monotonicity.

These back the ``check`` CLI subcommand and the verification suite.  The
finite-difference oracle is only meaningful where the sampled cost surface
is smooth, so the stacked-Jacobian check restricts itself to residual rows
whose sampling point stays inside one bilinear cell and keeps its validity
across all perturbed poses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry
from .geometry import Pose3DoF
from .sampler import bilinear_gradient, bilinear_sample
from .solver import LevelData, SolveTrace, build_residual_system


def _column_rel_err(analytic: np.ndarray, fd: np.ndarray) -> float:
    """Max entrywise deviation, normalized per column by the largest
    analytic magnitude in that column (columns carry different units)."""
    scale = np.maximum(np.abs(analytic).max(axis=0), 1e-12)
    return float((np.abs(fd - analytic) / scale).max())


def jacobian_pixel_fd_check(pose: Pose3DoF, cam, sat, u_g, v_g,
                            step: float = 1e-5) -> float:
    """Compare the analytic per-pixel pose Jacobian against central finite
    differences of the projected coordinates.  Returns the max relative
    error over all entries (column-normalized)."""
    analytic = geometry.jacobian_pixel_wrt_pose(pose, cam, sat, u_g, v_g)
    analytic = analytic.reshape(-1, 3)
    cols = []
    for axis in range(3):
        delta = np.zeros(3)
        delta[axis] = step
        up, vp, _ = geometry.ground_to_satellite(pose.perturbed(delta), cam,
                                                 sat, u_g, v_g)
        um, vm, _ = geometry.ground_to_satellite(pose.perturbed(-delta), cam,
                                                 sat, u_g, v_g)
        du = (np.asarray(up) - np.asarray(um)) / (2 * step)
        dv = (np.asarray(vp) - np.asarray(vm)) / (2 * step)
        cols.append(np.stack([du.ravel(), dv.ravel()], axis=-1))
    fd = np.stack(cols, axis=-1).reshape(-1, 3)
    keep = np.all(np.isfinite(fd), axis=1) & np.all(np.isfinite(analytic), axis=1)
    return _column_rel_err(analytic[keep], fd[keep])


@dataclass(frozen=True)
class SystemJacobianCheck:
    max_rel_err: float
    rows_checked: int
    rows_total: int


def jacobian_system_fd_check(pose: Pose3DoF, level_data: LevelData,
                             step: float = 1e-4) -> SystemJacobianCheck:
    """Compare the stacked residual Jacobian against central finite
    differences of the full projection pipeline.

    Only rows whose sampling point keeps the same bilinear cell and
    validity across every perturbed pose are compared; across a cell
    boundary the interpolant has a derivative kink and finite differences
    are not a valid oracle.
    """
    system = build_residual_system(pose, level_data)
    frame = level_data.frame
    points = level_data.ground_geometry.camera_points()
    with np.errstate(invalid="ignore"):
        base_ok = level_data.ground_geometry.valid & (
            np.linalg.norm(points, axis=-1) <= geometry.MAX_GROUND_RANGE_M)

    poses = [pose]
    for axis in range(3):
        for sign in (1.0, -1.0):
            delta = np.zeros(3)
            delta[axis] = sign * step
            poses.append(pose.perturbed(delta))

    coords = []
    valid_all = base_ok.copy()
    for p in poses:
        u_s, v_s = geometry.camera_points_to_satellite(p, frame, points)
        with np.errstate(invalid="ignore"):
            valid_all &= geometry.satellite_bounds_mask(frame, u_s, v_s)
        coords.append((u_s, v_s))

    # Same bilinear cell across all evaluations.
    w, h = frame.width, frame.height
    same_cell = valid_all.copy()
    u0, v0 = coords[0]
    with np.errstate(invalid="ignore"):
        cell_u0 = np.clip(np.floor(np.nan_to_num(u0)), 0, w - 2)
        cell_v0 = np.clip(np.floor(np.nan_to_num(v0)), 0, h - 2)
        for u_s, v_s in coords[1:]:
            same_cell &= np.clip(np.floor(np.nan_to_num(u_s)), 0, w - 2) == cell_u0
            same_cell &= np.clip(np.floor(np.nan_to_num(v_s)), 0, h - 2) == cell_v0

    # Recompute the analytic rows on the kept subset (the stacked system's
    # row order is mask-dependent, so rebuilding is the simplest alignment).
    pts = points[same_cell]
    data = level_data.satellite.data

    def residual(idx: int) -> np.ndarray:
        u_s, v_s = coords[idx]
        return bilinear_sample(data, u_s[same_cell], v_s[same_cell])

    u_c, v_c = coords[0]
    du, dv = bilinear_gradient(data, u_c[same_cell], v_c[same_cell])
    jac_pix = geometry.jacobian_from_camera_points(pose, frame, pts)
    analytic = (du[:, :, None] * jac_pix[:, None, 0, :]
                + dv[:, :, None] * jac_pix[:, None, 1, :]).reshape(-1, 3)

    fd_cols = []
    for axis in range(3):
        plus = residual(1 + 2 * axis)
        minus = residual(2 + 2 * axis)
        fd_cols.append(((plus - minus) / (2 * step)).reshape(-1))
    fd = np.stack(fd_cols, axis=-1)
    return SystemJacobianCheck(
        max_rel_err=_column_rel_err(analytic, fd),
        rows_checked=analytic.shape[0],
        rows_total=system.jac.shape[0],
    )


def roundtrip_check(pose: Pose3DoF, cam, sat, rng: np.random.Generator,
                    n: int = 100) -> float:
    """Project random valid ground pixels to the tile and invert back;
    returns the max coordinate error in pixels."""
    u = rng.uniform(0, cam.width - 1, size=4 * n)
    v = rng.uniform(0, cam.height_px - 1, size=4 * n)
    u_s, v_s, valid = geometry.ground_to_satellite(pose, cam, sat, u, v)
    u, v, u_s, v_s = u[valid][:n], v[valid][:n], u_s[valid][:n], v_s[valid][:n]
    if u.size == 0:
        raise ValueError("no valid pixels to round-trip")
    u_back, v_back, ok = geometry.satellite_to_ground(pose, cam, sat, u_s, v_s)
    if not np.all(ok):
        raise ValueError("round trip left the camera frustum")
    return float(np.max(np.hypot(u_back - u, v_back - v)))


def monotonicity_violations(trace: SolveTrace) -> int:
    """Number of accepted steps that failed to strictly decrease the cost."""
    return sum(1 for a in trace.accepted_attempts()
               if not a.cost_after < a.cost_before)


def composition_check(pose: Pose3DoF, cam, sat, u_g, v_g) -> float:
    """Max deviation in pixels between the fused projection and the
    explicit backproject -> rigid transform -> orthographic composition."""
    u_s, v_s, valid = geometry.ground_to_satellite(pose, cam, sat, u_g, v_g)
    geom = geometry.backproject_ground_pixel(cam, u_g, v_g)
    rot, t = geometry.pose_to_rt(pose)
    p_cam = geom.camera_points()
    world = (p_cam + t) @ rot.T
    u_ref = world[..., 2] / sat.alpha + sat.u0
    v_ref = world[..., 0] / sat.alpha + sat.v0
    if not np.any(valid):
        raise ValueError("no valid pixels")
    return float(np.max(np.hypot((u_s - u_ref)[valid], (v_s - v_ref)[valid])))
