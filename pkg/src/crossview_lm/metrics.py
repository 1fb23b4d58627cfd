"""Pose-error decomposition and recall-at-threshold reporting.

Translation error is split into the component along the reference heading
(longitudinal, the driving direction) and the component perpendicular to
it (lateral); heading error is reported in degrees.  Recall tables count
the fraction of queries whose error falls strictly below each threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from statistics import mean, median
from typing import Sequence

import numpy as np

from .geometry import Pose3DoF

DISTANCE_THRESHOLDS_M = (1.0, 3.0, 5.0)
ANGLE_THRESHOLDS_DEG = (1.0, 3.0, 5.0)


def wrap_angle_deg(delta: float) -> float:
    """Wrap an angle in degrees to (-180, 180]."""
    if not math.isfinite(delta):
        raise ValueError("angle must be finite")
    return 180.0 - (180.0 - delta) % 360.0


@dataclass(frozen=True)
class PoseError:
    """Absolute error components of an estimated pose against a reference.

    ``lateral`` and ``longitudinal`` are in meters, measured perpendicular
    to and along the reference heading; ``azimuth`` is in degrees within
    [0, 180].
    """

    lateral: float
    longitudinal: float
    azimuth: float


def decompose_error(est: Pose3DoF, gt: Pose3DoF) -> PoseError:
    """Split the planar position error into the reference camera's
    lateral/longitudinal axes.

    The error vector between the two camera positions is expressed in the
    ground frame of the reference heading, so a shared rigid motion of both
    poses leaves the result unchanged.
    """
    diff = est.world_position() - gt.world_position()
    ex, ez = diff[0], diff[2]
    c = math.cos(gt.theta)
    s = math.sin(gt.theta)
    longitudinal = ex * s + ez * c          # along heading (sin, cos) in (x, z)
    lateral = ex * c - ez * s               # along (cos, -sin) in (x, z)
    azimuth = abs(wrap_angle_deg(math.degrees(est.theta - gt.theta)))
    return PoseError(lateral=abs(lateral), longitudinal=abs(longitudinal),
                     azimuth=azimuth)


def recall(errors: Sequence[float], threshold: float) -> float:
    """Percentage of errors strictly below the threshold."""
    errs = np.asarray(errors, dtype=np.float64)
    if errs.size == 0:
        raise ValueError("empty error list")
    return 100.0 * float(np.count_nonzero(errs < threshold)) / errs.size


@dataclass(frozen=True)
class RecallTable:
    """Recall percentages at increasing thresholds, plus mean/median of the
    underlying errors (the latter two are reporting extensions, not part of
    the recall protocol)."""

    thresholds: tuple[float, ...]
    values: tuple[float, ...]
    mean_error: float
    median_error: float

    @classmethod
    def from_errors(cls, errors: Sequence[float],
                    thresholds: Sequence[float]) -> "RecallTable":
        return cls(
            thresholds=tuple(thresholds),
            values=tuple(recall(errors, t) for t in thresholds),
            mean_error=float(mean(errors)),
            median_error=float(median(errors)),
        )


@dataclass(frozen=True)
class AggregateReport:
    """Recall tables for the three error axes."""

    lateral: RecallTable
    longitudinal: RecallTable
    azimuth: RecallTable


def aggregate_report(per_query: Sequence[PoseError]) -> AggregateReport:
    """Nine recall values (three axes at three thresholds) over a batch."""
    if not per_query:
        raise ValueError("empty error list")
    return AggregateReport(
        lateral=RecallTable.from_errors([e.lateral for e in per_query],
                                        DISTANCE_THRESHOLDS_M),
        longitudinal=RecallTable.from_errors([e.longitudinal for e in per_query],
                                             DISTANCE_THRESHOLDS_M),
        azimuth=RecallTable.from_errors([e.azimuth for e in per_query],
                                        ANGLE_THRESHOLDS_DEG),
    )
