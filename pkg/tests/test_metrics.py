"""Evaluation metric contracts, pinned against hand-computed values."""

import numpy as np
import pytest

from fidmark.cloud import PointCloud
from fidmark.errors import EmptyCloud, LengthMismatch
from fidmark.geom import Pose, so3_exp
from fidmark.metrics import (
    chamfer_and_recall,
    overlap_rate,
    registration_recall,
    relative_to_anchor,
    rmse,
)


def _cloud(xyz):
    xyz = np.asarray(xyz, dtype=float)
    return PointCloud(xyz, np.zeros(len(xyz)))


class TestRmse:
    def test_identical_pose_lists_give_zero(self, rng):
        poses = [Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3))
                 for _ in range(6)]
        rmse_t, rmse_r = rmse(poses, poses)
        assert rmse_t == 0.0
        assert rmse_r == 0.0

    def test_constant_translation_offset(self, rng):
        truth = [Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3))
                 for _ in range(5)]
        off = np.array([0.1, 0.0, 0.0])
        est = [Pose(p.rotation, p.translation + off) for p in truth]
        rmse_t, rmse_r = rmse(est, truth)
        assert rmse_t == pytest.approx(0.1, abs=1e-12)
        assert rmse_r == pytest.approx(0.0, abs=1e-12)

    def test_mixed_translation_errors(self):
        truth = [Pose.identity(), Pose.identity()]
        est = [
            Pose(np.eye(3), np.array([0.1, 0.0, 0.0])),
            Pose(np.eye(3), np.array([0.0, 0.2, 0.0])),
        ]
        rmse_t, _ = rmse(est, truth)
        assert rmse_t == pytest.approx(np.sqrt((0.01 + 0.04) / 2), abs=1e-12)
        assert rmse_t == pytest.approx(0.15811, abs=1e-5)

    def test_rotation_error_is_geodesic_angle(self, rng):
        truth = [Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3))]
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = 0.3
        est = [Pose(so3_exp(angle * axis) @ truth[0].rotation,
                    truth[0].translation)]
        _, rmse_r = rmse(est, truth)
        assert rmse_r == pytest.approx(angle, abs=1e-12)

    def test_length_mismatch_raises(self):
        with pytest.raises(LengthMismatch):
            rmse([Pose.identity()], [Pose.identity(), Pose.identity()])
        with pytest.raises(LengthMismatch):
            rmse([], [])

    def test_consistent_permutation_preserves_value(self, rng):
        truth = [Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3))
                 for _ in range(7)]
        est = [Pose(so3_exp(rng.normal(size=3) * 0.01) @ p.rotation,
                    p.translation + rng.normal(size=3) * 0.01) for p in truth]
        perm = rng.permutation(len(truth))
        base = rmse(est, truth)
        shuffled = rmse([est[i] for i in perm], [truth[i] for i in perm])
        assert shuffled[0] == pytest.approx(base[0], abs=1e-12)
        assert shuffled[1] == pytest.approx(base[1], abs=1e-12)


class TestRelativeToAnchor:
    def test_anchor_becomes_identity_and_relatives_survive_gauge(self, rng):
        poses = [Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3))
                 for _ in range(4)]
        gauge = Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3))
        moved = [gauge @ p for p in poses]
        rel_a = relative_to_anchor(poses)
        rel_b = relative_to_anchor(moved)
        assert np.allclose(rel_a[0].matrix(), np.eye(4), atol=1e-12)
        for p, q in zip(rel_a, rel_b):
            assert np.allclose(p.matrix(), q.matrix(), atol=1e-9)


class TestChamferRecall:
    def test_single_point_pair(self):
        x = _cloud([[0.0, 0.0, 0.0]])
        y = _cloud([[1.0, 0.0, 0.0]])
        cd, recall = chamfer_and_recall(x, y, thr=0.25)
        assert cd == pytest.approx(2.0, abs=1e-12)
        assert recall == 0.0

    def test_identical_clouds(self, rng):
        x = _cloud(rng.normal(size=(40, 3)))
        cd, recall = chamfer_and_recall(x, x, thr=0.25)
        assert cd == 0.0
        assert recall == 1.0

    def test_cd_is_symmetric(self, rng):
        x = _cloud(rng.normal(size=(25, 3)))
        y = _cloud(rng.normal(size=(31, 3)))
        cd_xy, _ = chamfer_and_recall(x, y, thr=0.1)
        cd_yx, _ = chamfer_and_recall(y, x, thr=0.1)
        assert cd_xy == pytest.approx(cd_yx, abs=1e-12)

    def test_mean_variant_scales_each_direction(self):
        x = _cloud([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
        y = _cloud([[1.0, 0.0, 0.0]])
        cd_sum, _ = chamfer_and_recall(x, y, thr=0.5)
        cd_mean, _ = chamfer_and_recall(x, y, thr=0.5, mean=True)
        assert cd_sum == pytest.approx(1.0 + 1.0 + 1.0, abs=1e-12)
        assert cd_mean == pytest.approx((1.0 + 1.0) / 2 + 1.0 / 1, abs=1e-12)

    def test_empty_cloud_raises(self):
        x = _cloud([[0.0, 0.0, 0.0]])
        empty = PointCloud.empty()
        with pytest.raises(EmptyCloud):
            chamfer_and_recall(x, empty, thr=0.1)
        with pytest.raises(EmptyCloud):
            chamfer_and_recall(empty, x, thr=0.1)

    def test_nonpositive_threshold_rejected(self):
        x = _cloud([[0.0, 0.0, 0.0]])
        with pytest.raises(ValueError):
            chamfer_and_recall(x, x, thr=0.0)


class TestRegistrationRecall:
    def test_all_within(self):
        runs = [(0.01, 0.01), (0.02, 0.03)]
        assert registration_recall(runs, 0.05, 0.05) == 1.0

    def test_three_of_four(self):
        runs = [(0.01, 0.01), (0.02, 0.02), (0.03, 0.01), (0.09, 0.01)]
        assert registration_recall(runs, 0.05, 0.05) == 0.75

    def test_boundary_equality_counts_as_failure(self):
        runs = [(0.05, 0.01)]
        assert registration_recall(runs, 0.05, 0.05) == 0.0
        runs = [(0.01, 0.05)]
        assert registration_recall(runs, 0.05, 0.05) == 0.0

    def test_empty_runs_rejected(self):
        with pytest.raises(ValueError):
            registration_recall([], 0.05, 0.05)


class TestOverlapRate:
    def test_identical_clouds_overlap_fully(self, rng):
        a = _cloud(rng.normal(size=(30, 3)))
        assert overlap_rate(a, a) == 1.0

    def test_distant_clouds_do_not_overlap(self, rng):
        a = _cloud(rng.normal(size=(30, 3)) * 0.1)
        b = _cloud(rng.normal(size=(30, 3)) * 0.1 + np.array([10.0, 0.0, 0.0]))
        assert overlap_rate(a, b, tau=0.05) == 0.0

    def test_asymmetric_direction(self):
        a = _cloud([[0.0, 0.0, 0.0]])
        b = _cloud([[0.0, 0.0, 0.0], [5.0, 0.0, 0.0]])
        assert overlap_rate(a, b, tau=0.05, symmetric=False) == 1.0
        assert overlap_rate(b, a, tau=0.05, symmetric=False) == 0.5
        assert overlap_rate(a, b, tau=0.05) == pytest.approx(0.75)

    def test_empty_raises(self):
        a = _cloud([[0.0, 0.0, 0.0]])
        with pytest.raises(EmptyCloud):
            overlap_rate(a, PointCloud.empty())
