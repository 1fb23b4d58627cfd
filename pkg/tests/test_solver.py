import math

import numpy as np
import pytest

from crossview_lm import (DegenerateViewError, LMConfig, Pose3DoF,
                          RankDeficientError, decompose_error,
                          make_scene, pose_supervision_loss,
                          solve_coarse_to_fine)
from crossview_lm.features import FeaturePyramid
from crossview_lm.solver import (LMAttempt, LevelData, ResidualSystem,
                                 SolveTrace, build_residual_system,
                                 compute_cost, lm_step, solve_level)
from crossview_lm.synth import SynthScene, default_camera

from conftest import build_pyramids


def system_from_rows(jac, e):
    jac = np.asarray(jac, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    return ResidualSystem(e=e, jac=jac, hessian=jac.T @ jac,
                          gradient=jac.T @ e, valid_count=len(e))


def constant_scene(value=0.5):
    return SynthScene(satellite=np.full((512, 512), value), alpha=0.2,
                      camera=default_camera(), gt_pose=Pose3DoF(0, 0, 0))


class TestConfig:
    def test_default_budget_is_three_levels_by_five_iterations(self):
        cfg = LMConfig()
        assert cfg.levels == (1, 2, 3)
        assert cfg.max_iters_per_level == 5
        assert len(cfg.levels) * cfg.max_iters_per_level == 15
        assert cfg.lambda_init == 1e-2
        assert (cfg.lambda_up, cfg.lambda_down) == (10.0, 0.1)
        assert (cfg.lambda_min, cfg.lambda_max) == (1e-7, 1e7)
        assert cfg.step_tol == 1e-4
        assert cfg.outer_rounds == 1

    def test_invalid_configurations_rejected(self):
        with pytest.raises(ValueError):
            LMConfig(levels=())
        with pytest.raises(ValueError):
            LMConfig(max_iters_per_level=0)
        with pytest.raises(ValueError):
            LMConfig(lambda_min=1.0, lambda_max=0.1)
        with pytest.raises(ValueError):
            LMConfig(lambda_up=0.5)
        with pytest.raises(ValueError):
            LMConfig(min_rel_decrease=1.5)


class TestLMStep:
    def test_undamped_linear_residual_one_step(self):
        system = system_from_rows(np.eye(3), [-5.0, 0.0, 0.0])
        np.testing.assert_allclose(lm_step(system, 0.0), [5.0, 0.0, 0.0])

    def test_unit_damping_halves_step(self):
        system = system_from_rows(np.eye(3), [-5.0, 0.0, 0.0])
        np.testing.assert_allclose(lm_step(system, 1.0), [2.5, 0.0, 0.0])

    def test_zero_gradient_zero_step(self):
        system = system_from_rows(np.eye(3), [0.0, 0.0, 0.0])
        np.testing.assert_array_equal(lm_step(system, 123.0), np.zeros(3))

    def test_rank_deficient_raises(self):
        system = system_from_rows([[1.0, 0.0, 0.0]], [1.0])
        with pytest.raises(RankDeficientError):
            lm_step(system, 0.0)

    def test_gauss_newton_feature_gain_invariance(self):
        rng = np.random.default_rng(0)
        jac = rng.normal(size=(40, 3))
        e = rng.normal(size=40)
        base = lm_step(system_from_rows(jac, e), 0.0)
        scaled = lm_step(system_from_rows(7.0 * jac, 7.0 * e), 0.0)
        assert np.abs(scaled - base).max() < 1e-9 * np.abs(base).max()

    def test_large_damping_approaches_gradient_descent(self):
        rng = np.random.default_rng(1)
        jac = rng.normal(size=(40, 3))
        e = rng.normal(size=40)
        system = system_from_rows(jac, e)
        scale = np.trace(system.hessian) / 3.0
        delta = lm_step(system, 1e6 / scale)
        descent = -system.gradient
        cosang = (delta @ descent) / (np.linalg.norm(delta)
                                      * np.linalg.norm(descent))
        assert math.acos(min(1.0, cosang)) < 1e-3


class TestResidualSystem:
    def test_reference_pose_residual_floor(self):
        for seed in (0, 1, 2):
            scene = make_scene(seed)
            ground_pyr, sat_pyr = build_pyramids(scene)
            for level in (1, 2, 3):
                ld = LevelData.for_level(ground_pyr, sat_pyr, level)
                system = build_residual_system(scene.gt_pose, ld)
                assert system.cost / system.valid_count < 1e-3

    def test_flat_fields_zero_system(self):
        scene = constant_scene()
        ground_pyr, sat_pyr = build_pyramids(scene)
        ld = LevelData.for_level(ground_pyr, sat_pyr, 2)
        system = build_residual_system(scene.gt_pose, ld)
        assert np.abs(system.e).max() < 1e-12
        assert np.abs(system.jac).max() < 1e-12
        np.testing.assert_allclose(system.hessian, 0.0, atol=1e-12)

    def test_degenerate_view_raises(self, default_scene,
                                    default_scene_pyramids):
        ground_pyr, sat_pyr = default_scene_pyramids
        ld = LevelData.for_level(ground_pyr, sat_pyr, 2)
        off_tile = Pose3DoF(500.0, 500.0, 0.0)
        with pytest.raises(DegenerateViewError):
            build_residual_system(off_tile, ld)
        cost, count = compute_cost(off_tile, ld)
        assert count == 0 and math.isinf(cost)

    def test_hessian_positive_semidefinite(self, default_scene,
                                           default_scene_pyramids):
        ground_pyr, sat_pyr = default_scene_pyramids
        rng = np.random.default_rng(3)
        for level in (1, 2, 3):
            ld = LevelData.for_level(ground_pyr, sat_pyr, level)
            for _ in range(5):
                pose = default_scene.gt_pose.perturbed([
                    rng.uniform(-3, 3), rng.uniform(-3, 3),
                    rng.uniform(-0.2, 0.2)])
                system = build_residual_system(pose, ld)
                eigs = np.linalg.eigvalsh(system.hessian)
                assert eigs.min() >= -1e-9 * np.trace(system.hessian)

    def test_jacobian_matches_full_pipeline_finite_differences(self):
        from crossview_lm.diagnostics import jacobian_system_fd_check
        rng = np.random.default_rng(4)
        for seed in range(5):
            scene = make_scene(200 + seed)
            ground_pyr, sat_pyr = build_pyramids(scene)
            level = 1 + seed % 3
            ld = LevelData.for_level(ground_pyr, sat_pyr, level)
            pose = scene.gt_pose.perturbed([
                rng.uniform(-2, 2), rng.uniform(-2, 2),
                rng.uniform(-0.1, 0.1)])
            check = jacobian_system_fd_check(pose, ld)
            assert check.rows_checked > 0.5 * check.rows_total
            assert check.max_rel_err < 1e-3


class TestSolveLevel:
    def test_reference_start_converges_with_one_accepted_step(self):
        """Known red: states the idealized already-converged contract.

        Features extracted from the rendered ground view differ from the
        warped satellite features by a small floor (interpolation,
        blur-grid mismatch, far-field aliasing), so the cost minimum sits
        a few centimeters from the reference pose.  Starting there, the
        solver legitimately accepts 2-5 micro-steps (relative cost
        improvements of 1e-8..1e-6) while walking to that minimum, instead
        of the single step this test demands.  The walk is bounded by
        ~0.04 m and does not affect the acceptance-level recovery
        tolerances.
        """
        scene = make_scene(7)
        ground_pyr, sat_pyr = build_pyramids(scene)
        ld = LevelData.for_level(ground_pyr, sat_pyr, 3)
        trace = SolveTrace()
        pose, termination = solve_level(scene.gt_pose, ld, LMConfig(),
                                        trace=trace)
        last = trace.attempts[-1]
        from crossview_lm.geometry import wrap_angle
        delta = math.hypot(
            math.hypot(last.pose_after.dx - last.pose_before.dx,
                       last.pose_after.dz - last.pose_before.dz),
            wrap_angle(last.pose_after.theta - last.pose_before.theta))
        assert len(trace.accepted_attempts()) <= 1
        assert delta < LMConfig().step_tol

    def test_two_meter_lateral_offset_recovered_on_finest_level(self):
        recovered = 0
        n = 100
        for seed in range(n):
            scene = make_scene(900 + seed)
            ground_pyr, sat_pyr = build_pyramids(scene, levels=(3,))
            ld = LevelData.for_level(ground_pyr, sat_pyr, 3)
            init = scene.gt_pose.perturbed([2.0, 0.0, 0.0])
            pose, _ = solve_level(init, ld, LMConfig(), trace=SolveTrace())
            err = decompose_error(pose, scene.gt_pose)
            recovered += err.lateral < 0.3
        assert recovered >= 90

    def test_accepted_steps_strictly_decrease_cost(self, default_scene,
                                                   default_scene_pyramids):
        ground_pyr, sat_pyr = default_scene_pyramids
        ld = LevelData.for_level(ground_pyr, sat_pyr, 2)
        trace = SolveTrace()
        init = default_scene.gt_pose.perturbed([2.5, -1.5, 0.1])
        solve_level(init, ld, LMConfig(), trace=trace)
        accepted = trace.accepted_attempts()
        assert accepted
        for att in accepted:
            assert att.cost_after < att.cost_before


class TestCoarseToFine:
    def test_flat_scene_reference_start_stays_put(self):
        scene = constant_scene()
        ground_pyr, sat_pyr = build_pyramids(scene)
        pose, trace = solve_coarse_to_fine(scene.gt_pose, ground_pyr, sat_pyr,
                                           LMConfig())
        drift = np.linalg.norm(pose.as_array() - scene.gt_pose.as_array())
        assert drift < LMConfig().step_tol
        assert trace.termination == "converged"

    def test_budget_capped_at_fifteen_iterates_per_sweep(self, default_scene,
                                                         default_scene_pyramids):
        ground_pyr, sat_pyr = default_scene_pyramids
        init = default_scene.gt_pose.perturbed([4.0, -4.0, 0.15])
        cfg = LMConfig(outer_rounds=2)
        _, trace = solve_coarse_to_fine(init, ground_pyr, sat_pyr, cfg)
        assert trace.sweeps == (0, 1)
        for sweep in trace.sweeps:
            assert trace.iterate_count(sweep) <= 15

    def test_missing_level_rejected(self, default_scene,
                                    default_scene_pyramids):
        ground_pyr, sat_pyr = default_scene_pyramids
        small = FeaturePyramid({2: ground_pyr[2], 3: ground_pyr[3]})
        with pytest.raises(ValueError):
            solve_coarse_to_fine(default_scene.gt_pose, small, sat_pyr,
                                 LMConfig())

    def test_deterministic_traces(self, default_scene,
                                  default_scene_pyramids):
        ground_pyr, sat_pyr = default_scene_pyramids
        init = default_scene.gt_pose.perturbed([3.0, 2.0, -0.1])
        pose_a, trace_a = solve_coarse_to_fine(init, ground_pyr, sat_pyr,
                                               LMConfig())
        pose_b, trace_b = solve_coarse_to_fine(init, ground_pyr, sat_pyr,
                                               LMConfig())
        assert pose_a == pose_b
        assert len(trace_a.attempts) == len(trace_b.attempts)
        for a, b in zip(trace_a.attempts, trace_b.attempts):
            assert a == b


def manual_trace(poses):
    trace = SolveTrace()
    for i, pose in enumerate(poses):
        trace.attempts.append(LMAttempt(
            sweep=0, level=1, iteration=i, lam=1e-2,
            pose_before=pose, pose_after=pose,
            cost_before=1.0, cost_after=0.5, accepted=True))
    trace.final_pose = poses[-1]
    return trace


class TestSupervisionLoss:
    def test_perfect_trace_zero_loss(self):
        gt = Pose3DoF(1.0, -2.0, 0.3)
        assert pose_supervision_loss(manual_trace([gt, gt, gt]), gt) == 0.0

    def test_translation_l1(self):
        gt = Pose3DoF(0.0, 0.0, 0.0)
        est = Pose3DoF(1.0, 2.0, 0.0)  # t differs by (1, 0, 2)
        assert pose_supervision_loss(manual_trace([est]), gt) == pytest.approx(3.0)

    def test_nonnegative_and_zero_only_at_gt(self):
        gt = Pose3DoF(0.5, 0.5, 0.1)
        rng = np.random.default_rng(5)
        for _ in range(20):
            est = Pose3DoF(rng.uniform(-3, 3), rng.uniform(-3, 3),
                           rng.uniform(-1, 1))
            loss = pose_supervision_loss(manual_trace([est]), gt)
            assert loss >= 0.0
            if est != gt:
                assert loss > 0.0

    def test_empty_trace_rejected(self):
        with pytest.raises(ValueError):
            pose_supervision_loss(SolveTrace(), Pose3DoF(0, 0, 0))

    def test_counts_every_level_and_iteration(self):
        gt = Pose3DoF(0.0, 0.0, 0.0)
        est = Pose3DoF(1.0, 0.0, 0.0)
        trace = SolveTrace()
        for level in (1, 2):
            trace.attempts.append(LMAttempt(
                sweep=0, level=level, iteration=0, lam=1e-2,
                pose_before=est, pose_after=est,
                cost_before=1.0, cost_after=0.5, accepted=True))
        assert pose_supervision_loss(trace, gt) == pytest.approx(2.0)
