import math

import numpy as np
import pytest

from worldloop.camera import CameraPose, Trajectory, quat_from_axis_angle
from worldloop.metrics import (CategoryReport, InterBenchRecord, MetricError,
                               Sim3, aggregate, aligned_rpe, dynamic_average,
                               interbench_overall, read_records_csv,
                               report_to_json, rpe, umeyama_align)


def random_trajectory(rng, n=12):
    poses = []
    for _ in range(n):
        poses.append(CameraPose(rng.standard_normal(4), rng.standard_normal(3) * 2))
    return Trajectory(poses)


class TestUmeyama:
    def test_identity_on_equal_inputs(self):
        rng = np.random.default_rng(0)
        traj = random_trajectory(rng)
        sim = umeyama_align(traj, traj)
        assert sim.scale == pytest.approx(1.0, abs=1e-9)
        np.testing.assert_allclose(np.abs(sim.rotation[0]), 1.0, atol=1e-9)
        np.testing.assert_allclose(sim.translation, 0.0, atol=1e-9)

    def test_recovers_known_transform(self):
        rng = np.random.default_rng(1)
        est = random_trajectory(rng)
        applied = Sim3(2.0, quat_from_axis_angle(np.array([0, 0, 1.0]),
                                                 math.pi / 2),
                       np.array([1.0, 2.0, 3.0]))
        gt = applied.apply(est)
        sim = umeyama_align(est, gt)
        assert sim.scale == pytest.approx(2.0, abs=1e-8)
        np.testing.assert_allclose(sim.translation, [1, 2, 3], atol=1e-8)
        dq = min(np.abs(sim.rotation - applied.rotation).max(),
                 np.abs(sim.rotation + applied.rotation).max())
        assert dq < 1e-8

    def test_hundred_random_recoveries(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            est = random_trajectory(rng, n=int(rng.integers(3, 20)))
            sim_true = Sim3(float(rng.uniform(0.2, 4.0)),
                            rng.standard_normal(4),
                            rng.standard_normal(3) * 3)
            gt = sim_true.apply(est)
            sim = umeyama_align(est, gt)
            for a, b in zip(est.poses, gt.poses):
                np.testing.assert_allclose(sim.apply_point(a.position),
                                           b.position, atol=1e-8)

    def test_invariant_to_point_ordering(self):
        rng = np.random.default_rng(3)
        est = random_trajectory(rng, 8)
        sim_true = Sim3(1.5, rng.standard_normal(4), rng.standard_normal(3))
        gt = sim_true.apply(est)
        order = rng.permutation(8)
        est_p = Trajectory([est.poses[i] for i in order])
        gt_p = Trajectory([gt.poses[i] for i in order])
        a = umeyama_align(est, gt)
        b = umeyama_align(est_p, gt_p)
        assert a.scale == pytest.approx(b.scale, abs=1e-10)
        np.testing.assert_allclose(a.translation, b.translation, atol=1e-10)

    def test_collinear_rejected(self):
        poses = [CameraPose.identity(), CameraPose(np.array([1.0, 0, 0, 0]),
                                                   np.array([1.0, 0, 0])),
                 CameraPose(np.array([1.0, 0, 0, 0]), np.array([2.0, 0, 0]))]
        with pytest.raises(MetricError):
            umeyama_align(Trajectory(poses), Trajectory(poses))

    def test_length_mismatch_rejected(self):
        rng = np.random.default_rng(4)
        with pytest.raises(MetricError):
            umeyama_align(random_trajectory(rng, 5), random_trajectory(rng, 6))


class TestRpe:
    def test_zero_on_equal(self):
        rng = np.random.default_rng(5)
        traj = random_trajectory(rng)
        res = rpe(traj, traj, 1)
        assert res.trans_rmse == 0.0
        assert res.rot_rmse == pytest.approx(0.0, abs=1e-7)
        assert len(res.trans_residuals) == len(traj) - 1

    def test_cumulative_drift_closed_form(self):
        # gt walks +x; est adds a cumulative 0.01 forward (+z) drift per frame,
        # so every delta=1 relative pose differs by exactly 0.01 translation.
        n = 30
        gt, est = [], []
        for i in range(n):
            gt.append(CameraPose(np.array([1.0, 0, 0, 0]),
                                 np.array([0.1 * i, 0.0, 0.0])))
            est.append(CameraPose(np.array([1.0, 0, 0, 0]),
                                  np.array([0.1 * i, 0.0, 0.01 * i])))
        res = rpe(Trajectory(est), Trajectory(gt), 1)
        assert res.trans_rmse == pytest.approx(0.01, abs=1e-9)
        assert res.rot_rmse == pytest.approx(0.0, abs=1e-9)

    def test_alignment_absorbs_global_sim3(self):
        rng = np.random.default_rng(6)
        gt = random_trajectory(rng, 15)
        est = Trajectory([CameraPose(p.rotation,
                                     p.position + rng.standard_normal(3) * 0.01)
                          for p in gt.poses])
        base = aligned_rpe(est, gt, 1)
        warp = Sim3(3.0, rng.standard_normal(4), rng.standard_normal(3) * 5)
        warped = aligned_rpe(warp.apply(est), gt, 1)
        assert warped.trans_rmse == pytest.approx(base.trans_rmse, abs=1e-7)
        assert warped.rot_rmse == pytest.approx(base.rot_rmse, abs=1e-7)

    def test_delta_bounds(self):
        rng = np.random.default_rng(7)
        traj = random_trajectory(rng, 5)
        with pytest.raises(MetricError):
            rpe(traj, traj, 0)
        with pytest.raises(MetricError):
            rpe(traj, traj, 5)


class TestDynamicAverage:
    def test_identical_frames_zero(self):
        frame = np.ones((4, 4))
        assert dynamic_average([frame, frame, frame]) == 0.0

    def test_alternating_constant_offset(self):
        rng = np.random.default_rng(8)
        a = rng.standard_normal((6, 3))
        c = 0.37
        frames = [a, a + c, a, a + c]
        assert dynamic_average(frames) == pytest.approx(c, abs=1e-12)

    def test_matches_two_loop_reference(self):
        rng = np.random.default_rng(9)
        frames = [rng.standard_normal((5, 2)) for _ in range(7)]
        total = 0.0
        for i in range(6):
            acc = 0.0
            for val in np.ravel(np.abs(frames[i + 1] - frames[i])):
                acc += val
            total += acc / frames[0].size
        assert dynamic_average(frames) == pytest.approx(total / 6, rel=1e-12)

    def test_requires_two_frames(self):
        with pytest.raises(MetricError):
            dynamic_average([np.zeros((2, 2))])

    def test_custom_backend(self):
        frames = [np.zeros(3), np.ones(3)]
        assert dynamic_average(frames, backend=lambda a, b: 42.0) == 42.0


class TestInterBench:
    def test_gating_rejected_at_construction(self):
        with pytest.raises(MetricError):
            InterBenchRecord(trigger=0, align=3, fluency=0, scope=0,
                             end_state=0, physics=0)

    def test_ordinal_scale_enforced(self):
        with pytest.raises(MetricError):
            InterBenchRecord(trigger=1, align=2, fluency=0, scope=0,
                             end_state=0, physics=0)

    def test_all_zero_record(self):
        rec = InterBenchRecord(0, 0, 0, 0, 0, 0)
        assert interbench_overall(rec) == 0.0

    def test_maximum_record(self):
        rec = InterBenchRecord(1, 5, 5, 5, 5, 5)
        assert interbench_overall(rec) == 5.0

    def test_published_environmental_row(self):
        # hand arithmetic: (5*0.962 + 4.342 + 4.247 + 4.578 + 4.688 + 3.893)/6
        got = interbench_overall((0.962, 4.342, 4.247, 4.578, 4.688, 3.893))
        assert got == pytest.approx(4.4263, abs=5e-4)

    def test_monotone_in_every_dimension(self):
        base = (0.5, 2.0, 2.0, 2.0, 2.0, 2.0)
        v0 = interbench_overall(base)
        for i in range(6):
            bumped = list(base)
            bumped[i] += 0.25
            assert interbench_overall(tuple(bumped)) > v0

    def test_aggregate_single_record(self):
        rec = InterBenchRecord(1, 3, 5, 1, 3, 5)
        reports, glob = aggregate([rec], ["actor"])
        assert reports[0].align == 3.0
        assert reports[0].overall == interbench_overall(rec)
        assert glob.overall == reports[0].overall

    def test_aggregate_two_records_means(self):
        recs = [InterBenchRecord(1, 5, 5, 5, 5, 5),
                InterBenchRecord(0, 0, 0, 0, 0, 0)]
        reports, _ = aggregate(recs, ["env", "env"])
        assert reports[0].trigger == 0.5
        assert reports[0].align == 2.5

    def test_global_is_mean_of_category_overalls(self):
        recs = [InterBenchRecord(1, 5, 3, 1, 3, 5),
                InterBenchRecord(1, 1, 1, 1, 1, 1),
                InterBenchRecord(0, 0, 0, 0, 0, 0)]
        reports, glob = aggregate(recs, ["a", "b", "c"])
        want = np.mean([r.overall for r in reports])
        assert glob.overall == pytest.approx(want, rel=1e-12)

    def test_csv_round_trip_and_report(self):
        text = ("video_id,category,trigger,align,fluency,scope,end_state,physics\n"
                "v1,env,1,5,3,5,5,3\n"
                "v2,env,0,0,0,0,0,0\n"
                "v3,actor,1,3,3,1,5,1\n")
        records, categories, ids = read_records_csv(text)
        assert ids == ["v1", "v2", "v3"]
        reports, glob = aggregate(records, categories)
        payload = report_to_json(reports, glob)
        assert '"actor"' in payload and '"global"' in payload

    def test_csv_rejects_gating_violation(self):
        text = ("video_id,category,trigger,align,fluency,scope,end_state,physics\n"
                "v1,env,0,5,0,0,0,0\n")
        with pytest.raises(MetricError):
            read_records_csv(text)
