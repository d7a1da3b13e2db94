import numpy as np
import numpy.testing as npt
import pytest

from clickseg import autodiff as ad
from clickseg.errors import InputError, ProtocolError
from clickseg.geom import FourierEmbeddingConfig, PointCloud, fourier_embed
from clickseg.queries import (
    Click,
    QueryParams,
    build_query_set,
    clicks_from_json,
    clicks_to_json,
    encode_click_query,
    sample_augmentation_queries,
)


def make_params(d=8, bands=2, seed=0):
    rng = np.random.default_rng(seed)
    cfg = FourierEmbeddingConfig(num_bands=bands, max_frequency=4.0)
    return QueryParams(
        v_pos=ad.Tensor(rng.normal(size=d), requires_grad=True),
        v_neg=ad.Tensor(rng.normal(size=d), requires_grad=True),
        proj_w=ad.Tensor(rng.normal(size=(cfg.out_dim, d)), requires_grad=True),
        proj_b=ad.Tensor(rng.normal(size=d), requires_grad=True),
        fourier=cfg,
    )


FOUR_POINTS = PointCloud(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [10, 0, 0]], dtype=float))


class TestEncodeClickQuery:
    def test_positive_content_is_v_pos(self):
        p = make_params()
        p.v_pos = ad.Tensor(np.eye(8)[0], requires_grad=True)
        q = encode_click_query(Click([1.0, 2.0, 3.0], 1), p)
        npt.assert_array_equal(q.content, np.eye(8)[0])
        assert q.kind == "positive"

    def test_negative_same_position_same_pos_embed(self):
        p = make_params()
        qp = encode_click_query(Click([1.0, 2.0, 3.0], 1), p)
        qn = encode_click_query(Click([1.0, 2.0, 3.0], -1), p)
        npt.assert_array_equal(qp.pos_embed, qn.pos_embed)
        npt.assert_array_equal(qn.content, p.v_neg.data)
        assert qn.kind == "negative"

    def test_period_shift_matches_band1_components(self):
        p = make_params()
        f1 = p.fourier.frequencies[0]
        a = np.array([0.3, 0.4, 0.5])
        b = a + np.array([1.0 / f1, 0.0, 0.0])
        ea, eb = fourier_embed(a, p.fourier), fourier_embed(b, p.fourier)
        npt.assert_allclose(ea[0:2], eb[0:2], atol=1e-12)

    def test_bad_click_rejected(self):
        with pytest.raises(InputError):
            Click([np.inf, 0, 0], 1)
        with pytest.raises(InputError):
            Click([0, 0, 0], 2)


class TestAugmentationQueries:
    def test_m_zero_empty(self):
        assert sample_augmentation_queries(FOUR_POINTS, 0, make_params()) == []

    def test_single_query_at_point_zero(self):
        qs = sample_augmentation_queries(FOUR_POINTS, 1, make_params())
        assert len(qs) == 1
        npt.assert_array_equal(qs[0].position, FOUR_POINTS.positions[0])
        npt.assert_array_equal(qs[0].content, np.zeros(8))
        assert qs[0].kind == "augmentation"

    def test_fps_order(self):
        qs = sample_augmentation_queries(FOUR_POINTS, 3, make_params())
        expected = FOUR_POINTS.positions[[0, 3, 1]]
        npt.assert_array_equal(np.stack([q.position for q in qs]), expected)

    def test_m_exceeds_n(self):
        with pytest.raises(InputError):
            sample_augmentation_queries(FOUR_POINTS, 5, make_params())


class TestBuildQuerySet:
    CLICKS = [Click([0, 0, 0], 1), Click([1, 0, 0], -1)]

    def _cloud(self, n=300, seed=0):
        rng = np.random.default_rng(seed)
        return PointCloud(rng.uniform(0, 5, size=(n, 3)))

    def test_counts_and_order(self):
        qs = build_query_set(self.CLICKS, self._cloud(), 128, make_params())
        assert qs.n_total == 130
        assert qs.kinds[:2] == ["positive", "negative"]
        assert qs.count("augmentation") == 128

    def test_double_augmentation(self):
        qs = build_query_set(self.CLICKS, self._cloud(), 256, make_params())
        assert qs.n_total == 258

    def test_determinism(self):
        a = build_query_set(self.CLICKS, self._cloud(), 64, make_params())
        b = build_query_set(self.CLICKS, self._cloud(), 64, make_params())
        npt.assert_array_equal(a.content_matrix, b.content_matrix)
        npt.assert_array_equal(a.pos_embed_matrix, b.pos_embed_matrix)
        npt.assert_array_equal(a.positions, b.positions)

    def test_empty_clicks_rejected(self):
        with pytest.raises(ProtocolError):
            build_query_set([], self._cloud(), 8, make_params())

    def test_aug_positions_subset_of_cloud(self):
        cloud = self._cloud(100, seed=3)
        qs = build_query_set(self.CLICKS, cloud, 32, make_params())
        aug = np.stack([q.position for q in qs.queries if q.kind == "augmentation"])
        for pos in aug:
            assert np.any(np.all(cloud.positions == pos, axis=1))

    def test_click_content_exact(self):
        p = make_params()
        qs = build_query_set(self.CLICKS, self._cloud(), 16, p)
        npt.assert_array_equal(qs.queries[0].content, p.v_pos.data)
        npt.assert_array_equal(qs.queries[1].content, p.v_neg.data)
        for q in qs.queries[2:]:
            npt.assert_array_equal(q.content, np.zeros(8))


def test_fps_spread_beats_uniform_sampling():
    """Mean min-pairwise-distance of FPS picks exceeds uniform picks."""
    rng = np.random.default_rng(7)
    p = make_params()
    m = 12
    fps_mins, rand_mins = [], []

    def min_pair(pts):
        d = np.linalg.norm(pts[:, None] - pts[None, :], axis=2)
        return np.min(d[np.triu_indices(len(pts), 1)])

    for trial in range(100):
        cloud = PointCloud(rng.uniform(0, 10, size=(150, 3)))
        qs = sample_augmentation_queries(cloud, m, p)
        fps_mins.append(min_pair(np.stack([q.position for q in qs])))
        idx = rng.choice(150, size=m, replace=False)
        rand_mins.append(min_pair(cloud.positions[idx]))
    assert np.mean(fps_mins) > np.mean(rand_mins)


def test_click_json_round_trip():
    clicks = [Click([0.5, -1.25, 3.0], 1), Click([2.0, 0.0, 1.0], -1)]
    text = clicks_to_json(clicks)
    back = clicks_from_json(text)
    assert len(back) == 2
    npt.assert_array_equal(back[0].position, clicks[0].position)
    assert back[1].sign == -1
    with pytest.raises(InputError):
        clicks_from_json('[{"pos": [1, 2], "sign": 1}]')
