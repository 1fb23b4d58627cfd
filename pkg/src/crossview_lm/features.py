"""Multi-scale, per-pixel-normalized feature pyramids.

Levels 1, 2, 3 hold feature maps at 1/8, 1/4 and 1/2 of the input image
resolution (level ``l`` is the input downsampled ``4 - l`` times).  The
per-level extractor is pluggable; the default ``grad3`` stacks intensity
with Sobel gradients of the smoothed grid, so matching is driven by
photometric structure rather than absolute gain.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import CameraModel, SatelliteFrame

NORM_EPS = 1e-12

PYRAMID_LEVELS = (1, 2, 3)


def to_grayscale(image) -> np.ndarray:
    """Convert an image array to a float grid in [0, 1].

    Integer inputs are scaled by their dtype range; RGB(A) is reduced with
    the 0.299/0.587/0.114 luma weights; float input passes through.
    """
    arr = np.asarray(image)
    if arr.size == 0:
        raise ValueError("empty image")
    if np.issubdtype(arr.dtype, np.integer):
        arr = arr.astype(np.float64) / float(np.iinfo(arr.dtype).max)
    else:
        arr = arr.astype(np.float64)
    if arr.ndim == 2:
        return arr
    if arr.ndim == 3 and arr.shape[2] == 1:
        return arr[:, :, 0]
    if arr.ndim == 3 and arr.shape[2] in (3, 4):
        return (0.299 * arr[..., 0] + 0.587 * arr[..., 1]
                + 0.114 * arr[..., 2])
    raise ValueError(f"unsupported image shape {arr.shape}")


def downsample_half(grid: np.ndarray) -> np.ndarray:
    """2x2 box average; output dimensions are floor(dim / 2)."""
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2:
        raise ValueError("expected a 2-d grid")
    h, w = g.shape
    if h < 2 or w < 2:
        raise ValueError(f"grid too small to downsample: {g.shape}")
    h2, w2 = h // 2, w // 2
    g = g[:2 * h2, :2 * w2]
    return 0.25 * (g[0::2, 0::2] + g[0::2, 1::2] + g[1::2, 0::2] + g[1::2, 1::2])


def l2_normalize_per_pixel(channels: np.ndarray) -> np.ndarray:
    """Normalize each pixel's channel vector to unit L2 norm.

    Pixels with norm <= NORM_EPS are left as exact zeros so that
    textureless regions contribute nothing downstream.
    """
    ch = np.asarray(channels, dtype=np.float64)
    norms = np.sqrt(np.sum(ch * ch, axis=-1, keepdims=True))
    safe = np.where(norms > NORM_EPS, norms, 1.0)
    out = ch / safe
    out[np.broadcast_to(norms <= NORM_EPS, out.shape)] = 0.0
    return out


class FeatureExtractor:
    """Deterministic, parameter-free per-level feature transform.

    Subclasses implement :meth:`channels`, mapping a 2-d grid to an
    (H, W, C) stack; pyramid construction normalizes per pixel afterwards.
    """

    name = "base"

    def channels(self, grid: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Poly3Extractor(FeatureExtractor):
    """Pointwise polynomial embedding (1, I, I^2) of the Gaussian-smoothed
    grid.

    Pointwise functions of intensity commute exactly with any geometric
    resampling, so features extracted from a warped image agree with
    warped features up to interpolation error alone.  After per-pixel
    normalization the embedding still separates intensities (the sphere
    direction varies monotonically with I), which per-pixel-normalized raw
    intensity would not.  This is the default extractor.
    """

    name = "poly3"

    def __init__(self, sigma: float = 1.0):
        self.sigma = sigma

    def channels(self, grid: np.ndarray) -> np.ndarray:
        smoothed = ndimage.gaussian_filter(grid, sigma=self.sigma,
                                           mode="nearest")
        return np.stack([np.ones_like(smoothed), smoothed, smoothed ** 2],
                        axis=-1)


class Grad3Extractor(FeatureExtractor):
    """Intensity plus horizontal/vertical Sobel gradients of the
    Gaussian-smoothed grid (three channels).

    Kept as a selectable alternative: gradient channels do not commute
    with anisotropic warps, which makes this extractor a poor choice for
    cross-view alignment (see Poly3Extractor), but it is useful as a
    texture statistic.
    """

    name = "grad3"

    def __init__(self, sigma: float = 1.0):
        self.sigma = sigma

    def channels(self, grid: np.ndarray) -> np.ndarray:
        smoothed = ndimage.gaussian_filter(grid, sigma=self.sigma,
                                           mode="nearest")
        # Sobel kernels scaled to unit gradient response per pixel step.
        gx = ndimage.sobel(smoothed, axis=1, mode="nearest") / 8.0
        gy = ndimage.sobel(smoothed, axis=0, mode="nearest") / 8.0
        return np.stack([smoothed, gx, gy], axis=-1)


def default_extractor() -> FeatureExtractor:
    """Fresh instance of the default per-view extractor."""
    return Poly3Extractor()


@dataclass(frozen=True)
class FeatureMap:
    """One pyramid level: (H, W, C) data plus the level's view geometry.

    Exactly one of ``camera`` (ground view) or ``frame`` (satellite view)
    is set, already rescaled to this level's resolution.
    """

    data: np.ndarray
    level: int
    camera: CameraModel | None = None
    frame: SatelliteFrame | None = None

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class FeaturePyramid:
    maps: dict[int, FeatureMap] = field(default_factory=dict)

    @property
    def levels(self) -> tuple[int, ...]:
        return tuple(sorted(self.maps))

    def __getitem__(self, level: int) -> FeatureMap:
        return self.maps[level]


def extract_pyramid(image, extractor: FeatureExtractor, *,
                    camera: CameraModel | None = None,
                    frame: SatelliteFrame | None = None,
                    levels: tuple[int, ...] = PYRAMID_LEVELS) -> FeaturePyramid:
    """Build the feature pyramid of an image.

    ``camera`` or ``frame`` describes the full-resolution view geometry and
    is rescaled onto every level.  The coarsest level must end up at least
    4x4 pixels.
    """
    if camera is not None and frame is not None:
        raise ValueError("pass a camera or a satellite frame, not both")
    gray = to_grayscale(image)
    max_halvings = 4 - min(levels)
    grids = {0: gray}
    g = gray
    for k in range(1, max_halvings + 1):
        g = downsample_half(g)
        grids[k] = g
    coarsest = grids[max_halvings]
    if min(coarsest.shape) < 4:
        raise ValueError(
            f"image {gray.shape} too small: coarsest level is {coarsest.shape}")
    maps = {}
    for level in levels:
        k = 4 - level
        data = l2_normalize_per_pixel(extractor.channels(grids[k]))
        maps[level] = FeatureMap(
            data=data,
            level=level,
            camera=camera.downscaled(k) if camera is not None else None,
            frame=frame.downscaled(k) if frame is not None else None,
        )
    return FeaturePyramid(maps)
