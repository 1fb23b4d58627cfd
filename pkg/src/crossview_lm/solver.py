"""Multi-level damped Levenberg-Marquardt pose refinement.

The residual stacks, over every unmasked ground pixel and channel, the
difference between the projected satellite features and the observed
ground features.  Each level runs a classic accept/reject LM loop: a step
is kept only if it decreases the summed squared residual (by a minimal
relative margin, so floor-level noise cannot be chased), with the damping
factor lowered on acceptance and raised on rejection.  Levels
are visited coarse to fine so early iterations see a wide, smooth cost
surface before fine levels sharpen the pose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .features import (FeatureExtractor, FeatureMap, FeaturePyramid,
                       default_extractor, extract_pyramid)
from .geometry import CameraModel, DegenerateViewError, Pose3DoF, SatelliteFrame, pose_to_rt
from .sampler import ProjectedFeatures, bilinear_gradient, project_features


class RankDeficientError(np.linalg.LinAlgError):
    """Raised when the damped normal equations are singular."""


@dataclass(frozen=True)
class LMConfig:
    """Solver configuration.

    The defaults visit three pyramid levels for at most five iterations
    each, so one coarse-to-fine sweep inspects at most fifteen candidate
    poses.  ``step_tol`` is the convergence threshold on the parameter step
    norm in mixed meter/radian units.
    """

    levels: tuple[int, ...] = (1, 2, 3)
    max_iters_per_level: int = 5
    lambda_init: float = 1e-2
    lambda_up: float = 10.0
    lambda_down: float = 0.1
    lambda_min: float = 1e-7
    lambda_max: float = 1e7
    step_tol: float = 1e-4
    outer_rounds: int = 1
    max_rejects_per_iter: int = 8
    # A tentative step must beat the current cost by this relative margin;
    # improvements below it are indistinguishable from the residual floor
    # and would let the solver wander after converging.
    min_rel_decrease: float = 1e-6

    def __post_init__(self):
        if not self.levels:
            raise ValueError("levels must be nonempty")
        if self.max_iters_per_level < 1 or self.outer_rounds < 1:
            raise ValueError("iteration counts must be positive")
        if not (0 < self.lambda_min <= self.lambda_max):
            raise ValueError("lambda bounds must satisfy 0 < min <= max")
        if not (self.lambda_up > 1.0 > self.lambda_down > 0.0):
            raise ValueError("need lambda_up > 1 > lambda_down > 0")
        if not 0.0 <= self.min_rel_decrease < 1.0:
            raise ValueError("min_rel_decrease must lie in [0, 1)")


@dataclass(frozen=True)
class LevelData:
    """Ground and satellite feature maps of one level plus the cached,
    pose-independent backprojection of the ground pixel grid."""

    ground: FeatureMap
    satellite: FeatureMap
    ground_geometry: geometry.GroundPixelGeometry

    @classmethod
    def for_level(cls, ground_pyramid: FeaturePyramid,
                  satellite_pyramid: FeaturePyramid, level: int) -> "LevelData":
        ground = ground_pyramid[level]
        satellite = satellite_pyramid[level]
        if ground.camera is None:
            raise ValueError("ground feature map carries no camera")
        if satellite.frame is None:
            raise ValueError("satellite feature map carries no frame")
        return cls(ground=ground, satellite=satellite,
                   ground_geometry=geometry.backproject_grid(ground.camera))

    @property
    def level(self) -> int:
        return self.ground.level

    @property
    def camera(self) -> CameraModel:
        return self.ground.camera

    @property
    def frame(self) -> SatelliteFrame:
        return self.satellite.frame

    def project(self, pose: Pose3DoF) -> ProjectedFeatures:
        return project_features(self.satellite, pose, self.camera,
                                ground_geometry=self.ground_geometry)


@dataclass(frozen=True)
class ResidualSystem:
    """Stacked residual and its pose derivatives at one pose and level."""

    e: np.ndarray          # (n_valid * C,)
    jac: np.ndarray        # (n_valid * C, 3)
    hessian: np.ndarray    # (3, 3), J^T J
    gradient: np.ndarray   # (3,), J^T e
    valid_count: int

    @property
    def cost(self) -> float:
        return float(self.e @ self.e)


def compute_cost(pose: Pose3DoF, level_data: LevelData) -> tuple[float, int]:
    """Summed squared residual over unmasked pixels; (inf, 0) if the pose
    projects no pixel onto the tile."""
    proj = level_data.project(pose)
    n = int(np.count_nonzero(proj.mask))
    if n == 0:
        return math.inf, 0
    diff = proj.features[proj.mask] - level_data.ground.data[proj.mask]
    return float(np.sum(diff * diff)), n


def build_residual_system(pose: Pose3DoF, level_data: LevelData) -> ResidualSystem:
    """Residual, Jacobian and Gauss-Newton system at ``pose``.

    Each row couples one (pixel, channel): the satellite feature map's
    spatial gradient at the projected coordinate, chained with the
    derivative of that coordinate with respect to the pose.
    """
    proj = level_data.project(pose)
    mask = proj.mask
    n = int(np.count_nonzero(mask))
    if n == 0:
        raise DegenerateViewError("degenerate view: no ground pixel projects onto the tile")
    e = (proj.features[mask] - level_data.ground.data[mask])  # (n, C)
    u_s = proj.coords[mask, 0]
    v_s = proj.coords[mask, 1]
    du, dv = bilinear_gradient(level_data.satellite.data, u_s, v_s)  # (n, C)
    points = level_data.ground_geometry.camera_points()[mask]
    jac_pix = geometry.jacobian_from_camera_points(pose, level_data.frame,
                                                   points)  # (n, 2, 3)
    rows = (du[:, :, None] * jac_pix[:, None, 0, :]
            + dv[:, :, None] * jac_pix[:, None, 1, :])  # (n, C, 3)
    jac = rows.reshape(-1, 3)
    e = e.reshape(-1)
    return ResidualSystem(e=e, jac=jac, hessian=jac.T @ jac,
                          gradient=jac.T @ e, valid_count=n)


def lm_step(system: ResidualSystem, lam: float) -> np.ndarray:
    """Solve the damped normal equations for the descent step.

    The damping is scaled by s = trace(H)/3 so ``lam`` is dimensionless
    with respect to feature units and mask size.  Raises
    :class:`RankDeficientError` when the damped matrix is singular (only
    possible as lam -> 0 with a rank-deficient H).
    """
    g = system.gradient
    if not np.any(g):
        return np.zeros(3)
    scale = float(np.trace(system.hessian)) / 3.0
    damped = system.hessian + (lam * scale) * np.eye(3)
    try:
        np.linalg.cholesky(damped)
        delta = np.linalg.solve(damped, -g)
    except np.linalg.LinAlgError as err:
        raise RankDeficientError("rank-deficient damped system") from err
    if not np.all(np.isfinite(delta)):
        raise RankDeficientError("rank-deficient damped system")
    return delta


@dataclass(frozen=True)
class LMAttempt:
    """One tentative LM step (several may share an iteration while the
    damping is being raised)."""

    sweep: int
    level: int
    iteration: int
    lam: float
    pose_before: Pose3DoF
    pose_after: Pose3DoF
    cost_before: float
    cost_after: float
    accepted: bool


@dataclass(frozen=True)
class Iterate:
    sweep: int
    level: int
    iteration: int
    pose: Pose3DoF


@dataclass
class SolveTrace:
    """Ordered record of every attempted step plus the outcome."""

    attempts: list[LMAttempt] = field(default_factory=list)
    final_pose: Pose3DoF | None = None
    termination: str = ""

    def iterates(self) -> list[Iterate]:
        """Pose at the end of each (sweep, level, iteration) group."""
        out: list[Iterate] = []
        for att in self.attempts:
            key = (att.sweep, att.level, att.iteration)
            pose = att.pose_after if att.accepted else att.pose_before
            if out and (out[-1].sweep, out[-1].level, out[-1].iteration) == key:
                out[-1] = Iterate(*key, pose)
            else:
                out.append(Iterate(*key, pose))
        return out

    def iterate_count(self, sweep: int | None = None) -> int:
        its = self.iterates()
        if sweep is not None:
            its = [i for i in its if i.sweep == sweep]
        return len(its)

    def accepted_attempts(self) -> list[LMAttempt]:
        return [a for a in self.attempts if a.accepted]

    @property
    def sweeps(self) -> tuple[int, ...]:
        return tuple(sorted({a.sweep for a in self.attempts}))


def solve_level(pose: Pose3DoF, level_data: LevelData, cfg: LMConfig, *,
                sweep: int = 0, trace: SolveTrace | None = None
                ) -> tuple[Pose3DoF, str]:
    """Run up to ``cfg.max_iters_per_level`` LM iterations on one level.

    Returns the refined pose and the termination reason ("converged",
    "max_iterations" or "stalled").  Attempts are appended to ``trace``.
    """
    lam = cfg.lambda_init
    termination = "max_iterations"
    for iteration in range(cfg.max_iters_per_level):
        system = build_residual_system(pose, level_data)
        cost_before = system.cost
        accepted = False
        delta_norm = None
        for _ in range(cfg.max_rejects_per_iter + 1):
            try:
                delta = lm_step(system, lam)
            except RankDeficientError:
                lam = min(lam * cfg.lambda_up, cfg.lambda_max)
                continue
            delta_norm = float(np.linalg.norm(delta))
            candidate = pose.perturbed(delta)
            cost_after, _ = compute_cost(candidate, level_data)
            accepted = cost_after < cost_before * (1.0 - cfg.min_rel_decrease)
            if trace is not None:
                trace.attempts.append(LMAttempt(
                    sweep=sweep, level=level_data.level, iteration=iteration,
                    lam=lam, pose_before=pose, pose_after=candidate,
                    cost_before=cost_before, cost_after=cost_after,
                    accepted=accepted))
            if accepted:
                pose = candidate
                lam = max(lam * cfg.lambda_down, cfg.lambda_min)
                break
            lam = min(lam * cfg.lambda_up, cfg.lambda_max)
            if delta_norm < cfg.step_tol:
                break
        if delta_norm is not None and delta_norm < cfg.step_tol:
            termination = "converged"
            break
        if not accepted:
            termination = "stalled"
            break
    return pose, termination


def solve_coarse_to_fine(pose_init: Pose3DoF, ground_pyramid: FeaturePyramid,
                         satellite_pyramid: FeaturePyramid, cfg: LMConfig = LMConfig()
                         ) -> tuple[Pose3DoF, SolveTrace]:
    """Refine a pose over the configured levels, coarse to fine.

    The pose is threaded through the levels in order; the whole sweep is
    repeated ``cfg.outer_rounds`` times.
    """
    for level in cfg.levels:
        if level not in ground_pyramid.maps or level not in satellite_pyramid.maps:
            raise ValueError(f"level {level} missing from the pyramids")
    level_data = {level: LevelData.for_level(ground_pyramid, satellite_pyramid, level)
                  for level in cfg.levels}
    trace = SolveTrace()
    pose = pose_init
    termination = "max_iterations"
    for sweep in range(cfg.outer_rounds):
        for level in cfg.levels:
            pose, termination = solve_level(pose, level_data[level], cfg,
                                            sweep=sweep, trace=trace)
    trace.final_pose = pose
    trace.termination = termination
    return pose, trace


def pose_supervision_loss(trace: SolveTrace, gt_pose: Pose3DoF) -> float:
    """Summed L1 distance between every recorded iterate and the reference
    pose, comparing rotation matrices entrywise and translation vectors.

    Diagnostic only; nothing differentiates through it.
    """
    iterates = trace.iterates()
    if not iterates:
        raise ValueError("empty trace")
    rot_gt, t_gt = pose_to_rt(gt_pose)
    total = 0.0
    for it in iterates:
        rot, t = pose_to_rt(it.pose)
        total += float(np.abs(rot - rot_gt).sum() + np.abs(t - t_gt).sum())
    return total


def refine_pose(ground_image, satellite_image, camera: CameraModel,
                frame: SatelliteFrame, init_pose: Pose3DoF,
                cfg: LMConfig = LMConfig(),
                ground_extractor: FeatureExtractor | None = None,
                satellite_extractor: FeatureExtractor | None = None
                ) -> tuple[Pose3DoF, SolveTrace]:
    """Convenience wrapper: extract both pyramids and run the solver.

    The two views get separate extractor instances by default (they may be
    configured differently per side).
    """
    ground_extractor = ground_extractor or default_extractor()
    satellite_extractor = satellite_extractor or default_extractor()
    ground_pyr = extract_pyramid(ground_image, ground_extractor, camera=camera,
                                 levels=tuple(sorted(set(cfg.levels))))
    sat_pyr = extract_pyramid(satellite_image, satellite_extractor, frame=frame,
                              levels=tuple(sorted(set(cfg.levels))))
    return solve_coarse_to_fine(init_pose, ground_pyr, sat_pyr, cfg)
