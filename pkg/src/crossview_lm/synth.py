"""Synthetic-scene oracle: textured tiles with exactly known ground views.

Ground views are rendered by sampling the satellite raster through the
same ground-plane projection the solver optimizes, so a scene's reference
pose is correct by construction and every end-to-end property can be
checked against it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import geometry
from .geometry import CameraModel, DegenerateViewError, Pose3DoF, SatelliteFrame
from .sampler import bilinear_sample

TEXTURE_STYLES = ("noise", "road-grid", "blobs")

# Half-width of the square region the reference pose must stay inside.
SEARCH_REGION_HALF_M = 20.0

DEFAULT_ALPHA = 0.20
DEFAULT_TILE_PX = 512


def default_camera(height: float = 1.65) -> CameraModel:
    """Forward-facing 1024x256 ground camera used by the synthetic scenes."""
    return CameraModel(fx=256.0, fy=256.0, cx=511.5, cy=127.5,
                       height=height, width=1024, height_px=256)


@dataclass(frozen=True)
class SynthScene:
    """A satellite raster plus the camera and reference pose that generated
    the ground view."""

    satellite: np.ndarray
    alpha: float
    camera: CameraModel
    gt_pose: Pose3DoF
    seed: int = 0

    def __post_init__(self):
        pos = self.gt_pose.world_position()
        if (abs(pos[0]) > SEARCH_REGION_HALF_M
                or abs(pos[2]) > SEARCH_REGION_HALF_M):
            raise ValueError("reference pose outside the search region")

    @property
    def frame(self) -> SatelliteFrame:
        h, w = self.satellite.shape[:2]
        return SatelliteFrame.centered(self.alpha, w, h)


def _octave_noise(rng: np.random.Generator, size: int,
                  sigmas=(4.0, 8.0, 24.0, 64.0),
                  weights=(0.25, 0.25, 0.30, 0.20)) -> np.ndarray:
    """Zero-mean, unit-std band-limited noise built from smoothed octaves."""
    total = np.zeros((size, size))
    for sigma, weight in zip(sigmas, weights):
        layer = ndimage.gaussian_filter(rng.standard_normal((size, size)),
                                        sigma=sigma, mode="wrap")
        std = layer.std()
        if std > 0:
            total += weight * layer / std
    return total / total.std()


def _world_grids(size: int, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """World (x, z) coordinates in meters of every satellite pixel center."""
    c = (size - 1) / 2.0
    v, u = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    x = (v - c) * alpha
    z = (u - c) * alpha
    return x, z


def make_satellite_texture(seed: int, style: str = "noise", *,
                           size: int = DEFAULT_TILE_PX,
                           alpha: float = DEFAULT_ALPHA,
                           orientation: float = 0.0,
                           contrast: float = 0.04) -> np.ndarray:
    """Deterministic grayscale tile in [0, 1].

    "noise" is smooth band-limited noise with dense gradients everywhere.
    "road-grid" draws high-contrast stripes running along ``orientation``
    (a heading in radians): content then barely varies in that direction,
    reproducing the along-road ambiguity of real streets.  "blobs"
    scatters smooth bumps on a flat background.
    """
    if style not in TEXTURE_STYLES:
        raise ValueError(f"unknown texture style {style!r}")
    rng = np.random.default_rng(seed)
    if style == "noise":
        tex = 0.5 + contrast * _octave_noise(rng, size)
    elif style == "road-grid":
        x, z = _world_grids(size, alpha)
        # Coordinate across the stripes: stripes run along the heading, so
        # the pattern varies only in the lateral direction.  Irregular
        # spacing avoids lane-aliased local minima.
        lateral = x * math.cos(orientation) - z * math.sin(orientation)
        extent = size * alpha / 2.0 * 1.5
        tex = np.full((size, size), 0.35)
        position = -extent + rng.uniform(0.0, 8.0)
        while position < extent:
            width = rng.uniform(1.0, 1.8)
            amp = rng.uniform(0.25, 0.4)
            tex += amp * np.exp(-0.5 * ((lateral - position) / width) ** 2)
            position += rng.uniform(6.0, 12.0)
        tex += 0.05 * contrast * _octave_noise(rng, size)
    else:  # blobs
        x, z = _world_grids(size, alpha)
        tex = np.full((size, size), 0.5)
        extent = size * alpha / 2.0
        for _ in range(60):
            cx, cz = rng.uniform(-extent, extent, size=2)
            radius = rng.uniform(2.0, 6.0)
            amp = rng.uniform(-0.2, 0.2)
            tex += amp * np.exp(-((x - cx) ** 2 + (z - cz) ** 2)
                                / (2.0 * radius ** 2))
    return np.clip(tex, 0.0, 1.0)


@dataclass(frozen=True)
class GroundRender:
    """Rendered ground view and the pixels that actually saw the tile."""

    image: np.ndarray
    mask: np.ndarray


def render_ground_view(scene: SynthScene) -> GroundRender:
    """Sample the satellite raster at every below-horizon ground pixel.

    Pixels above the horizon, beyond the range clamp or off-tile are filled
    with the texture mean so they carry no gradient structure.
    """
    cam = scene.camera
    u_s, v_s, valid = geometry.ground_to_satellite(
        scene.gt_pose, cam, scene.frame,
        *np.meshgrid(np.arange(cam.width), np.arange(cam.height_px)))
    if not np.any(valid):
        raise DegenerateViewError("reference pose sees none of the tile")
    image = np.full(valid.shape, float(scene.satellite.mean()))
    image[valid] = bilinear_sample(scene.satellite, u_s[valid], v_s[valid])[..., 0]
    return GroundRender(image=image, mask=valid)


@dataclass(frozen=True)
class Trial:
    scene: SynthScene
    init_pose: Pose3DoF


def make_scene(seed: int, style: str = "noise", *,
               size: int = DEFAULT_TILE_PX, alpha: float = DEFAULT_ALPHA,
               camera_height: float = 1.65,
               gt_half_extent_m: float = 10.0) -> SynthScene:
    """One reproducible scene: random texture and a random reference pose
    within ``gt_half_extent_m`` of the tile center, any heading."""
    rng = np.random.default_rng(seed)
    theta = rng.uniform(-math.pi, math.pi)
    # gt position in world coordinates; translate back to pose parameters
    # (the pose translation is a camera-frame offset).
    pos = rng.uniform(-gt_half_extent_m, gt_half_extent_m, size=2)
    rot = np.array([[math.cos(theta), math.sin(theta)],
                    [-math.sin(theta), math.cos(theta)]])
    dx, dz = rot.T @ pos
    texture_seed = int(rng.integers(0, 2 ** 31))
    texture = make_satellite_texture(texture_seed, style, size=size,
                                     alpha=alpha, orientation=theta)
    return SynthScene(satellite=texture, alpha=alpha,
                      camera=default_camera(camera_height),
                      gt_pose=Pose3DoF(dx, dz, theta), seed=seed)


def make_trial_set(n: int, seed: int, init_radius_m: float = 20.0,
                   init_angle_deg: float = 20.0, *, style: str = "noise",
                   gt_half_extent_m: float = 10.0) -> list[Trial]:
    """Reproducible batch of scenes with perturbed initial poses.

    Initial poses offset the reference pose by uniform draws from
    [-r, r]^2 x [-a, a].  Defaults match a forty-meter search region with
    twenty degrees of heading noise.
    """
    if n < 1:
        raise ValueError("need at least one trial")
    children = np.random.SeedSequence(seed).spawn(n)
    trials = []
    for child in children:
        rng = np.random.default_rng(child)
        scene_seed = int(rng.integers(0, 2 ** 31))
        scene = make_scene(scene_seed, style,
                           gt_half_extent_m=gt_half_extent_m)
        offset = np.array([
            rng.uniform(-init_radius_m, init_radius_m),
            rng.uniform(-init_radius_m, init_radius_m),
            math.radians(rng.uniform(-init_angle_deg, init_angle_deg)),
        ])
        trials.append(Trial(scene=scene,
                            init_pose=scene.gt_pose.perturbed(offset)))
    return trials
