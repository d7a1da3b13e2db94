import numpy as np
import numpy.testing as npt
import pytest

from clickseg.errors import InputError
from clickseg.evaluation import (
    Converged,
    EvalRecord,
    evaluate_instance,
    first_click,
    iou,
    miou_at_k,
    next_click,
    summarize,
)
from clickseg.geom import PointCloud


class TestIoU:
    def test_identity(self):
        m = np.array([True, False, True])
        assert iou(m, m) == 1.0

    def test_disjoint(self):
        assert iou(np.array([True, False]), np.array([False, True])) == 0.0

    def test_hand_counted(self):
        pred = np.array([1, 1, 0, 0], dtype=bool)
        gt = np.array([1, 0, 1, 0], dtype=bool)
        npt.assert_allclose(iou(pred, gt), 1 / 3)

    def test_both_empty(self):
        z = np.zeros(5, dtype=bool)
        assert iou(z, z) == 1.0

    def test_symmetry(self):
        rng = np.random.default_rng(0)
        a, b = rng.random(50) < 0.5, rng.random(50) < 0.5
        assert iou(a, b) == iou(b, a)

    def test_length_mismatch(self):
        with pytest.raises(InputError):
            iou(np.zeros(3, dtype=bool), np.zeros(4, dtype=bool))


class TestNextClick:
    def _line_cloud(self, n=30):
        pts = np.zeros((n, 3))
        pts[:, 0] = np.arange(n) * 0.3
        return PointCloud(pts)

    def test_single_false_negative(self):
        cloud = self._line_cloud(5)
        gt = np.array([1, 1, 0, 0, 0], dtype=bool)
        pred = np.array([1, 0, 0, 0, 0], dtype=bool)
        c = next_click(pred, gt, cloud, radius=0.5)
        npt.assert_array_equal(c.position, cloud.positions[1])
        assert c.sign == 1

    def test_single_false_positive(self):
        cloud = self._line_cloud(5)
        gt = np.array([1, 0, 0, 0, 0], dtype=bool)
        pred = np.array([1, 1, 0, 0, 0], dtype=bool)
        c = next_click(pred, gt, cloud, radius=0.5)
        npt.assert_array_equal(c.position, cloud.positions[1])
        assert c.sign == -1

    def test_largest_component_wins(self):
        # two FN components: indices 5..14 (size 10) and 20..22 (size 3)
        cloud = self._line_cloud(30)
        gt = np.zeros(30, dtype=bool)
        gt[5:15] = True
        gt[20:23] = True
        pred = np.zeros(30, dtype=bool)
        c = next_click(pred, gt, cloud, radius=0.5)
        idx = int(np.flatnonzero(np.all(cloud.positions == c.position, axis=1))[0])
        assert 5 <= idx < 15
        assert c.sign == 1

    def test_converged_signal(self):
        cloud = self._line_cloud(4)
        gt = np.array([1, 0, 1, 0], dtype=bool)
        with pytest.raises(Converged):
            next_click(gt.copy(), gt, cloud)

    def test_random_error_policy(self):
        cloud = self._line_cloud(10)
        gt = np.zeros(10, dtype=bool)
        gt[:5] = True
        pred = np.zeros(10, dtype=bool)
        c = next_click(pred, gt, cloud, policy="random-error", seed=3)
        idx = int(np.flatnonzero(np.all(cloud.positions == c.position, axis=1))[0])
        assert idx < 5 and c.sign == 1
        c2 = next_click(pred, gt, cloud, policy="random-error", seed=3)
        npt.assert_array_equal(c.position, c2.position)

    def test_unknown_policy(self):
        cloud = self._line_cloud(4)
        with pytest.raises(InputError):
            next_click(np.zeros(4, bool), np.ones(4, bool), cloud, policy="nope")


class TestFirstClick:
    def test_interior_most(self):
        # foreground strip 0..9 along a line; interior-most point is farthest
        # from the background that starts at index 10
        pts = np.zeros((20, 3))
        pts[:, 0] = np.arange(20) * 1.0
        cloud = PointCloud(pts)
        gt = np.zeros(20, dtype=bool)
        gt[:10] = True
        c = first_click(gt, cloud)
        npt.assert_array_equal(c.position, cloud.positions[0])
        assert c.sign == 1

    def test_all_foreground_falls_back_to_centroid(self):
        rng = np.random.default_rng(1)
        cloud = PointCloud(rng.uniform(0, 2, size=(30, 3)))
        c = first_click(np.ones(30, dtype=bool), cloud)
        centroid = cloud.positions.mean(axis=0)
        d = np.linalg.norm(cloud.positions - centroid, axis=1)
        npt.assert_array_equal(c.position, cloud.positions[np.argmin(d)])


class _ConstantModel:
    """Stub model: predicts a fixed mask regardless of clicks."""

    class config:
        voxel_size = 0.5

    def __init__(self, mask):
        self.mask = np.asarray(mask, dtype=bool)

    def prepare_scene(self, cloud):
        return None

    def segment(self, cloud, clicks, cache=None, **kw):
        from types import SimpleNamespace

        return SimpleNamespace(binary_mask=self.mask)


class _PerfectModel(_ConstantModel):
    def __init__(self, gt):
        super().__init__(gt)


class TestEvaluateInstance:
    def _setup(self):
        pts = np.zeros((12, 3))
        pts[:, 0] = np.arange(12) * 0.4
        cloud = PointCloud(pts)
        gt = np.zeros(12, dtype=bool)
        gt[:6] = True
        return cloud, gt

    def test_single_k_single_click(self):
        cloud, gt = self._setup()
        rec = evaluate_instance(_PerfectModel(gt), cloud, gt, [1])
        assert rec.clicks_used == 1
        assert rec.iou_at == {1: 1.0}

    def test_convergence_carry_forward(self):
        cloud, gt = self._setup()
        rec = evaluate_instance(_PerfectModel(gt), cloud, gt, [1, 3, 5])
        assert rec.iou_at == {1: 1.0, 3: 1.0, 5: 1.0}
        assert rec.clicks_used == 1

    def test_constant_model_foreground_fraction(self):
        cloud, gt = self._setup()
        all_fg = _ConstantModel(np.ones(12, dtype=bool))
        rec = evaluate_instance(all_fg, cloud, gt, [1, 2])
        npt.assert_allclose(rec.iou_at[1], 0.5)  # fg fraction
        all_bg = _ConstantModel(np.zeros(12, dtype=bool))
        rec = evaluate_instance(all_bg, cloud, gt, [1, 2])
        npt.assert_allclose(rec.iou_at[1], 0.0)


class TestMiou:
    def _rec(self, cat, kind, val, inst=0):
        return EvalRecord(inst, cat, kind, {3: val}, 3)

    def test_single_category_mean(self):
        records = [self._rec("a", "thing", 0.5), self._rec("a", "thing", 0.7)]
        npt.assert_allclose(miou_at_k(records, 3), 0.6)

    def test_two_level_average(self):
        records = [self._rec("a", "thing", 0.5), self._rec("a", "thing", 0.7),
                   self._rec("b", "thing", 0.9)]
        npt.assert_allclose(miou_at_k(records, 3), 0.75)

    def test_constant(self):
        records = [self._rec("a", "thing", 0.4), self._rec("b", "stuff", 0.4)]
        npt.assert_allclose(miou_at_k(records, 3), 0.4)

    def test_duplicate_instances_invariant(self):
        base = [self._rec("a", "thing", 0.5), self._rec("b", "stuff", 0.9)]
        dup = base + [self._rec("a", "thing", 0.5)] * 5
        npt.assert_allclose(miou_at_k(base, 3), miou_at_k(dup, 3))

    def test_kind_splits(self):
        records = [self._rec("a", "thing", 0.4), self._rec("b", "stuff", 0.8)]
        s = summarize(records, [3])
        npt.assert_allclose(s["thing"]["3"], 0.4)
        npt.assert_allclose(s["stuff"]["3"], 0.8)
        npt.assert_allclose(s["overall"]["3"], 0.6)

    def test_empty_records(self):
        with pytest.raises(InputError):
            miou_at_k([], 3)
