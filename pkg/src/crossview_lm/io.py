"""Manifest parsing, image file I/O and report emission.

The manifest is a JSON file (schema_version 1) naming one satellite tile
and a list of ground-view queries::

    {
      "schema_version": 1,
      "satellite_path": "sat.png",
      "meters_per_pixel": 0.2,
      "satellite_center_px": [u0, v0],          // optional, defaults to center
      "queries": [
        {
          "ground_path": "ground_0000.png",
          "intrinsics": [fx, fy, cx, cy],
          "camera_height_m": 1.65,
          "init_pose": [dx_m, dz_m, theta_deg],
          "gt_pose": [dx_m, dz_m, theta_deg]     // optional
        }
      ]
    }

Angles are degrees at the file boundary and radians internally.  Paths are
resolved relative to the manifest's directory.  Reports are written as CSV
(fixed columns: query_id, dx, dz, theta_deg, lat_err_m, lon_err_m,
az_err_deg, iters, final_cost, wall_ms) and as JSON carrying the same rows
plus the aggregate recall tables.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .geometry import CameraModel, Pose3DoF
from .metrics import AggregateReport, PoseError

SCHEMA_VERSION = 1

CSV_COLUMNS = ("query_id", "dx", "dz", "theta_deg", "lat_err_m", "lon_err_m",
               "az_err_deg", "iters", "final_cost", "wall_ms")

_SUPPORTED_FORMATS = {"PNG", "PPM"}  # Pillow reports PGM/PBM under "PPM"


class ManifestError(ValueError):
    """Manifest violation with a machine-readable code and field path."""

    def __init__(self, code: str, field: str, message: str):
        super().__init__(f"{code} at {field}: {message}")
        self.code = code
        self.field = field
        self.message = message

    def to_json(self) -> dict:
        return {"error": self.code, "field": self.field,
                "message": self.message}


class ImageFormatError(ValueError):
    """Unsupported, undecodable or truncated image file."""


def load_image(path) -> np.ndarray:
    """Decode a PNG or PGM/PPM file to a float array in [0, 1].

    Grayscale files yield (H, W); color files (H, W, 3).  8- and 16-bit
    depths are supported and scaled by their dtype range.
    """
    path = Path(path)
    if not path.is_file():
        raise ImageFormatError(f"no such image file: {path}")
    try:
        with Image.open(path) as img:
            if img.format not in _SUPPORTED_FORMATS:
                raise ImageFormatError(
                    f"unsupported image format {img.format!r}: {path}")
            if img.mode in ("P", "PA", "LA", "RGBX", "CMYK"):
                img = img.convert("RGB")
            arr = np.asarray(img)
    except UnidentifiedImageError as err:
        raise ImageFormatError(f"cannot decode image: {path}") from err
    except (OSError, SyntaxError) as err:
        raise ImageFormatError(f"truncated image file: {path}") from err
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    if arr.dtype in (np.uint16, np.int32, np.uint32):
        # Pillow decodes 16-bit grayscale to mode "I" / "I;16".
        return arr.astype(np.float64) / 65535.0
    raise ImageFormatError(f"unsupported pixel depth {arr.dtype}: {path}")


def save_image(path, array: np.ndarray, *, bit_depth: int = 16) -> None:
    """Write a float array in [0, 1] as an 8- or 16-bit grayscale PNG/PGM."""
    arr = np.clip(np.asarray(array, dtype=np.float64), 0.0, 1.0)
    if bit_depth == 16:
        img = Image.fromarray(np.round(arr * 65535.0).astype(np.uint16))
    elif bit_depth == 8:
        img = Image.fromarray(np.round(arr * 255.0).astype(np.uint8))
    else:
        raise ValueError("bit_depth must be 8 or 16")
    img.save(Path(path))


@dataclass(frozen=True)
class QuerySpec:
    ground_path: Path
    camera: CameraModel  # width/height from the decoded ground image
    init_pose: Pose3DoF
    gt_pose: Pose3DoF | None


@dataclass(frozen=True)
class QueryManifest:
    satellite_path: Path
    meters_per_pixel: float
    satellite_center_px: tuple[float, float]  # full-resolution pixel coords
    queries: list[QuerySpec]


def _require(obj: dict, key: str, field: str):
    if key not in obj:
        raise ManifestError("missing-field", f"{field}.{key}",
                            "required field is absent")
    return obj[key]


def _as_number(value, field: str) -> float:
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        raise ManifestError("bad-type", field, "expected a number")
    if not math.isfinite(float(value)):
        raise ManifestError("bad-value", field, "must be finite")
    return float(value)


def _as_pose(value, field: str) -> Pose3DoF:
    if not isinstance(value, (list, tuple)) or len(value) != 3:
        raise ManifestError("bad-type", field,
                            "expected [dx_m, dz_m, theta_deg]")
    dx = _as_number(value[0], f"{field}[0]")
    dz = _as_number(value[1], f"{field}[1]")
    theta_deg = _as_number(value[2], f"{field}[2]")
    return Pose3DoF(dx, dz, math.radians(theta_deg))


def _image_size(path: Path, field: str) -> tuple[int, int]:
    try:
        with Image.open(path) as img:
            img.verify()
            return img.size  # (width, height)
    except FileNotFoundError:
        raise ManifestError("missing-file", field, f"no such file: {path}")
    except Exception as err:
        raise ManifestError("bad-image", field,
                            f"cannot decode {path}: {err}")


def load_manifest(path) -> QueryManifest:
    """Parse and fully validate a query manifest.

    Every referenced image must exist and decode; failures carry the
    offending field path.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError("missing-file", "manifest", f"no such file: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ManifestError("bad-json", "manifest", str(err))
    if not isinstance(raw, dict):
        raise ManifestError("bad-type", "manifest", "expected a JSON object")
    version = _require(raw, "schema_version", "manifest")
    if version != SCHEMA_VERSION:
        raise ManifestError("bad-version", "manifest.schema_version",
                            f"expected {SCHEMA_VERSION}, got {version!r}")

    base = path.parent
    sat_path = base / str(_require(raw, "satellite_path", "manifest"))
    sat_w, sat_h = _image_size(sat_path, "manifest.satellite_path")

    mpp = _as_number(_require(raw, "meters_per_pixel", "manifest"),
                     "manifest.meters_per_pixel")
    if mpp <= 0:
        raise ManifestError("bad-value", "manifest.meters_per_pixel",
                            "must be positive")

    center = raw.get("satellite_center_px")
    if center is None:
        u0, v0 = (sat_w - 1) / 2.0, (sat_h - 1) / 2.0
    else:
        if not isinstance(center, (list, tuple)) or len(center) != 2:
            raise ManifestError("bad-type", "manifest.satellite_center_px",
                                "expected [u0, v0]")
        u0 = _as_number(center[0], "manifest.satellite_center_px[0]")
        v0 = _as_number(center[1], "manifest.satellite_center_px[1]")
        if not (0 <= u0 < sat_w and 0 <= v0 < sat_h):
            raise ManifestError("bad-value", "manifest.satellite_center_px",
                                "center outside the satellite raster")

    queries_raw = _require(raw, "queries", "manifest")
    if not isinstance(queries_raw, list) or not queries_raw:
        raise ManifestError("bad-value", "manifest.queries",
                            "expected a nonempty list")
    queries = []
    for idx, q in enumerate(queries_raw):
        fieldbase = f"manifest.queries[{idx}]"
        if not isinstance(q, dict):
            raise ManifestError("bad-type", fieldbase, "expected an object")
        ground_path = base / str(_require(q, "ground_path", fieldbase))
        g_w, g_h = _image_size(ground_path, f"{fieldbase}.ground_path")
        intr = _require(q, "intrinsics", fieldbase)
        if not isinstance(intr, (list, tuple)) or len(intr) != 4:
            raise ManifestError("bad-type", f"{fieldbase}.intrinsics",
                                "expected [fx, fy, cx, cy]")
        fx = _as_number(intr[0], f"{fieldbase}.intrinsics[0]")
        fy = _as_number(intr[1], f"{fieldbase}.intrinsics[1]")
        cx = _as_number(intr[2], f"{fieldbase}.intrinsics[2]")
        cy = _as_number(intr[3], f"{fieldbase}.intrinsics[3]")
        height = _as_number(_require(q, "camera_height_m", fieldbase),
                            f"{fieldbase}.camera_height_m")
        try:
            camera = CameraModel(fx=fx, fy=fy, cx=cx, cy=cy, height=height,
                                 width=g_w, height_px=g_h)
        except ValueError as err:
            raise ManifestError("bad-value", f"{fieldbase}.intrinsics", str(err))
        init_pose = _as_pose(_require(q, "init_pose", fieldbase),
                             f"{fieldbase}.init_pose")
        gt_pose = (_as_pose(q["gt_pose"], f"{fieldbase}.gt_pose")
                   if q.get("gt_pose") is not None else None)
        queries.append(QuerySpec(ground_path=ground_path, camera=camera,
                                 init_pose=init_pose, gt_pose=gt_pose))
    return QueryManifest(satellite_path=sat_path, meters_per_pixel=mpp,
                         satellite_center_px=(u0, v0), queries=queries)


@dataclass(frozen=True)
class QueryResult:
    query_id: str
    pose: Pose3DoF
    error: PoseError | None
    iterations: int
    final_cost: float
    wall_ms: float


@dataclass(frozen=True)
class SolveReport:
    rows: list[QueryResult]
    aggregate: AggregateReport | None


def _row_record(row: QueryResult) -> dict:
    return {
        "query_id": row.query_id,
        "dx": f"{row.pose.dx:.9g}",
        "dz": f"{row.pose.dz:.9g}",
        "theta_deg": f"{math.degrees(row.pose.theta):.9g}",
        "lat_err_m": f"{row.error.lateral:.9g}" if row.error else "",
        "lon_err_m": f"{row.error.longitudinal:.9g}" if row.error else "",
        "az_err_deg": f"{row.error.azimuth:.9g}" if row.error else "",
        "iters": str(row.iterations),
        "final_cost": f"{row.final_cost:.9g}",
        "wall_ms": f"{row.wall_ms:.3f}",
    }


def write_report_csv(path, report: SolveReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in report.rows:
            writer.writerow(_row_record(row))


def _recall_record(table) -> dict:
    return {
        "thresholds": list(table.thresholds),
        "recall_pct": list(table.values),
        "mean_error": table.mean_error,
        "median_error": table.median_error,
    }


def write_report_json(path, report: SolveReport) -> None:
    doc = {"schema_version": SCHEMA_VERSION,
           "rows": [_row_record(r) for r in report.rows]}
    if report.aggregate is not None:
        doc["aggregate"] = {
            "lateral": _recall_record(report.aggregate.lateral),
            "longitudinal": _recall_record(report.aggregate.longitudinal),
            "azimuth": _recall_record(report.aggregate.azimuth),
        }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
