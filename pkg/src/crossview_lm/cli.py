"""Command-line surface: solve, eval, synth and check subcommands.

Reports are written under ``--out`` as ``report.csv`` / ``report.json``
(``check.*`` for diagnostics).  Batch solves parallelize across queries
with ``--jobs``; the CROSSVIEW_LM_THREADS environment variable overrides
the flag.  ``--deterministic`` forces single-process execution so repeated
runs emit byte-identical reports (wall-time aside).
"""

from __future__ import annotations

import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

from pathlib import Path

import click
import numpy as np

from . import diagnostics, io as cio, metrics, synth
from .features import default_extractor, extract_pyramid
from .geometry import DegenerateViewError, Pose3DoF, SatelliteFrame
from .io import ManifestError, QueryManifest, QueryResult, SolveReport
from .solver import LMConfig, solve_coarse_to_fine
from .synth import SynthScene, render_ground_view


def _fail(code: str, message: str, *, field: str = "", exit_code: int = 1):
    payload = {"error": code, "message": message}
    if field:
        payload["field"] = field
    click.echo(json.dumps(payload), err=True)
    sys.exit(exit_code)


def _parse_levels(text: str) -> tuple[int, ...]:
    try:
        levels = tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise click.BadParameter(f"cannot parse levels {text!r}")
    if not levels or any(l not in (1, 2, 3) for l in levels):
        raise click.BadParameter("levels must be a comma list drawn from 1,2,3")
    return levels


def _config_from_options(levels: str, iters: int, lambda_init: float) -> LMConfig:
    return LMConfig(levels=_parse_levels(levels), max_iters_per_level=iters,
                    lambda_init=lambda_init)


def _effective_jobs(jobs: int, deterministic: bool) -> int:
    env = os.environ.get("CROSSVIEW_LM_THREADS")
    if env is not None:
        try:
            jobs = int(env)
        except ValueError:
            _fail("bad-env", f"CROSSVIEW_LM_THREADS={env!r} is not an integer")
    if deterministic:
        return 1
    return max(1, jobs)


def _solve_one(manifest: QueryManifest, index: int, cfg: LMConfig) -> QueryResult:
    query = manifest.queries[index]
    sat_image = cio.load_image(manifest.satellite_path)
    sat_h, sat_w = sat_image.shape[:2]
    frame = SatelliteFrame(alpha=manifest.meters_per_pixel,
                           u0=manifest.satellite_center_px[0],
                           v0=manifest.satellite_center_px[1],
                           width=sat_w, height=sat_h)
    ground_image = cio.load_image(query.ground_path)
    start = time.perf_counter()
    sat_pyr = extract_pyramid(sat_image, default_extractor(), frame=frame,
                              levels=tuple(sorted(set(cfg.levels))))
    ground_pyr = extract_pyramid(ground_image, default_extractor(),
                                 camera=query.camera,
                                 levels=tuple(sorted(set(cfg.levels))))
    pose, trace = solve_coarse_to_fine(query.init_pose, ground_pyr, sat_pyr, cfg)
    wall_ms = 1000.0 * (time.perf_counter() - start)
    final_cost = trace.attempts[-1].cost_after if (
        trace.attempts and trace.attempts[-1].accepted) else (
        trace.attempts[-1].cost_before if trace.attempts else math.nan)
    error = (metrics.decompose_error(pose, query.gt_pose)
             if query.gt_pose is not None else None)
    return QueryResult(query_id=f"q{index:04d}", pose=pose, error=error,
                       iterations=trace.iterate_count(), final_cost=final_cost,
                       wall_ms=wall_ms)


def _solve_one_args(args) -> QueryResult:
    manifest_path, index, cfg = args
    return _solve_one(cio.load_manifest(manifest_path), index, cfg)


def _run_batch(manifest_path: Path, cfg: LMConfig, jobs: int) -> list[QueryResult]:
    manifest = cio.load_manifest(manifest_path)
    if jobs <= 1 or len(manifest.queries) == 1:
        return [_solve_one(manifest, i, cfg) for i in range(len(manifest.queries))]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        args = [(str(manifest_path), i, cfg) for i in range(len(manifest.queries))]
        return list(pool.map(_solve_one_args, args))


def _write_reports(out_dir: Path, report: SolveReport, report_format: str,
                   stem: str = "report") -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    if report_format in ("csv", "both"):
        cio.write_report_csv(out_dir / f"{stem}.csv", report)
    if report_format in ("json", "both"):
        cio.write_report_json(out_dir / f"{stem}.json", report)


_common_solver_options = [
    click.option("--manifest", "manifest_path", required=True,
                 type=click.Path(path_type=Path), help="Query manifest (JSON)."),
    click.option("--out", "out_dir", required=True,
                 type=click.Path(path_type=Path), help="Report directory."),
    click.option("--jobs", default=1, show_default=True,
                 help="Parallel workers across queries."),
    click.option("--levels", default="1,2,3", show_default=True,
                 help="Pyramid levels, coarse to fine."),
    click.option("--iters", default=5, show_default=True,
                 help="Max iterations per level."),
    click.option("--lambda-init", default=1e-2, show_default=True,
                 help="Initial damping factor."),
    click.option("--deterministic", is_flag=True,
                 help="Single-process mode with reproducible reports."),
    click.option("--report-format", default="both", show_default=True,
                 type=click.Choice(["csv", "json", "both"])),
]


def _with_options(options):
    def wrap(fn):
        for opt in reversed(options):
            fn = opt(fn)
        return fn
    return wrap


@click.group()
def main():
    """Refine coarse ground-camera poses against a satellite tile."""


@main.command()
@_with_options(_common_solver_options)
def solve(manifest_path, out_dir, jobs, levels, iters, lambda_init,
          deterministic, report_format):
    """Refine every query in the manifest (reference poses optional)."""
    cfg = _config_from_options(levels, iters, lambda_init)
    try:
        rows = _run_batch(manifest_path, cfg, _effective_jobs(jobs, deterministic))
    except ManifestError as err:
        _fail(err.code, err.message, field=err.field)
    except DegenerateViewError as err:
        _fail("degenerate-view", str(err))
    _write_reports(out_dir, SolveReport(rows=rows, aggregate=None), report_format)
    click.echo(f"solved {len(rows)} queries -> {out_dir}")


@main.command(name="eval")
@_with_options(_common_solver_options)
def eval_cmd(manifest_path, out_dir, jobs, levels, iters, lambda_init,
             deterministic, report_format):
    """Refine and score every query (reference poses required)."""
    cfg = _config_from_options(levels, iters, lambda_init)
    try:
        manifest = cio.load_manifest(manifest_path)
    except ManifestError as err:
        _fail(err.code, err.message, field=err.field)
    missing = [i for i, q in enumerate(manifest.queries) if q.gt_pose is None]
    if missing:
        _fail("missing-gt", "GT required for eval",
              field=f"manifest.queries[{missing[0]}].gt_pose")
    try:
        rows = _run_batch(manifest_path, cfg, _effective_jobs(jobs, deterministic))
    except DegenerateViewError as err:
        _fail("degenerate-view", str(err))
    aggregate = metrics.aggregate_report([r.error for r in rows])
    _write_reports(out_dir, SolveReport(rows=rows, aggregate=aggregate),
                   report_format)
    lateral = aggregate.lateral.values
    click.echo(f"evaluated {len(rows)} queries -> {out_dir} "
               f"(lateral recall@1/3/5m: "
               f"{lateral[0]:.1f}/{lateral[1]:.1f}/{lateral[2]:.1f})")


@main.command(name="synth")
@click.option("--n", default=10, show_default=True, help="Number of queries.")
@click.option("--seed", default=0, show_default=True)
@click.option("--style", default="noise", show_default=True,
              type=click.Choice(list(synth.TEXTURE_STYLES)))
@click.option("--radius", default=5.0, show_default=True,
              help="Init offset half-range in meters.")
@click.option("--angle", default=10.0, show_default=True,
              help="Init heading noise half-range in degrees.")
@click.option("--out", "out_dir", required=True,
              type=click.Path(path_type=Path), help="Dataset directory.")
def synth_cmd(n, seed, style, radius, angle, out_dir):
    """Write a synthetic dataset (one tile, n queries) plus its manifest."""
    if n < 1:
        _fail("bad-value", "--n must be at least 1")
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    texture_seed = int(rng.integers(0, 2 ** 31))
    texture = synth.make_satellite_texture(texture_seed, style)
    cio.save_image(out_dir / "satellite.png", texture)
    camera = synth.default_camera()
    queries = []
    for i in range(n):
        theta = rng.uniform(-math.pi, math.pi)
        pos = rng.uniform(-10.0, 10.0, size=2)
        c, s = math.cos(theta), math.sin(theta)
        dx = c * pos[0] - s * pos[1]
        dz = s * pos[0] + c * pos[1]
        gt = Pose3DoF(dx, dz, theta)
        scene = SynthScene(satellite=texture, alpha=synth.DEFAULT_ALPHA,
                           camera=camera, gt_pose=gt, seed=seed)
        render = render_ground_view(scene)
        ground_name = f"ground_{i:04d}.png"
        cio.save_image(out_dir / ground_name, render.image)
        init = gt.perturbed([
            rng.uniform(-radius, radius),
            rng.uniform(-radius, radius),
            math.radians(rng.uniform(-angle, angle)),
        ])
        queries.append({
            "ground_path": ground_name,
            "intrinsics": [camera.fx, camera.fy, camera.cx, camera.cy],
            "camera_height_m": camera.height,
            "init_pose": [init.dx, init.dz, math.degrees(init.theta)],
            "gt_pose": [gt.dx, gt.dz, math.degrees(gt.theta)],
        })
    manifest = {
        "schema_version": cio.SCHEMA_VERSION,
        "satellite_path": "satellite.png",
        "meters_per_pixel": synth.DEFAULT_ALPHA,
        "queries": queries,
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    click.echo(f"wrote {n} queries -> {out_dir}")


@main.command(name="check")
@click.option("--manifest", "manifest_path", type=click.Path(path_type=Path),
              help="Run diagnostics on the first manifest query.")
@click.option("--seed", type=int, default=None,
              help="Run diagnostics on a synthetic scene instead.")
@click.option("--out", "out_dir", required=True,
              type=click.Path(path_type=Path))
def check_cmd(manifest_path, seed, out_dir):
    """Verify Jacobians, projection round trips and descent monotonicity."""
    if (manifest_path is None) == (seed is None):
        _fail("bad-usage", "pass exactly one of --manifest or --seed")
    cfg = LMConfig()
    if seed is not None:
        scene = synth.make_scene(seed)
        render = render_ground_view(scene)
        ground_image, satellite, camera = render.image, scene.satellite, scene.camera
        frame = scene.frame
        init_pose = scene.gt_pose.perturbed([2.0, -1.5, math.radians(4.0)])
        pose_for_jac = scene.gt_pose.perturbed([0.8, -0.5, math.radians(2.0)])
    else:
        try:
            manifest = cio.load_manifest(manifest_path)
        except ManifestError as err:
            _fail(err.code, err.message, field=err.field)
        query = manifest.queries[0]
        satellite = cio.load_image(manifest.satellite_path)
        ground_image = cio.load_image(query.ground_path)
        camera = query.camera
        frame = SatelliteFrame(alpha=manifest.meters_per_pixel,
                               u0=manifest.satellite_center_px[0],
                               v0=manifest.satellite_center_px[1],
                               width=satellite.shape[1],
                               height=satellite.shape[0])
        init_pose = pose_for_jac = query.init_pose

    sat_pyr = extract_pyramid(satellite, default_extractor(), frame=frame)
    ground_pyr = extract_pyramid(ground_image, default_extractor(), camera=camera)
    from .solver import LevelData
    level_data = LevelData.for_level(ground_pyr, sat_pyr, cfg.levels[-1])
    try:
        jac_check = diagnostics.jacobian_system_fd_check(pose_for_jac, level_data)

        rng = np.random.default_rng(0 if seed is None else seed)
        pixel_jac_err = diagnostics.jacobian_pixel_fd_check(
            pose_for_jac, camera, frame,
            rng.uniform(0, camera.width - 1, size=200),
            rng.uniform(camera.height_px * 0.6, camera.height_px - 1, size=200))
        roundtrip_err = diagnostics.roundtrip_check(pose_for_jac, camera, frame,
                                                    rng)
        _, trace = solve_coarse_to_fine(init_pose, ground_pyr, sat_pyr, cfg)
    except DegenerateViewError as err:
        _fail("degenerate-view", str(err))
    violations = diagnostics.monotonicity_violations(trace)

    results = {
        "jacobian_fd_max_rel_err": jac_check.max_rel_err,
        "jacobian_fd_rows_checked": jac_check.rows_checked,
        "pixel_jacobian_fd_max_rel_err": pixel_jac_err,
        "roundtrip_max_err_px": roundtrip_err,
        "monotonicity_violations": violations,
    }
    ok = (jac_check.max_rel_err < 1e-3 and pixel_jac_err < 1e-5
          and roundtrip_err < 1e-6 and violations == 0)
    results["ok"] = ok

    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "check.json", "w") as fh:
        json.dump(results, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out_dir / "check.csv", "w") as fh:
        fh.write("key,value\n")
        for key in sorted(results):
            fh.write(f"{key},{results[key]}\n")
    for key in sorted(results):
        click.echo(f"{key}: {results[key]}")
    if not ok:
        _fail("check-failed", "one or more diagnostics out of tolerance")


if __name__ == "__main__":
    main()
