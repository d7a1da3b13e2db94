import numpy as np
import numpy.testing as npt
import pytest

from clickseg import autodiff as ad
from clickseg.encoder import EncoderParams, encode, encode_features, pooled_stats
from clickseg.errors import ConfigError
from clickseg.geom import PointCloud, voxelize

from fd import finite_diff, rel_error


def make_params(rng, pooled_dim, d, rounds, knn_k=2, zero=False):
    def w(shape):
        return ad.Tensor(np.zeros(shape) if zero else rng.normal(size=shape) * 0.3,
                         requires_grad=True)

    return EncoderParams(
        pool_w0=w((pooled_dim, d)), pool_b0=w((d,)),
        pool_w1=w((d, d)), pool_b1=w((d,)),
        agg_w=[w((d, d)) for _ in range(rounds)],
        agg_b=[w((d,)) for _ in range(rounds)],
        knn_k=knn_k, rounds=rounds,
    )


def hand_encode(stats, nbrs, p):
    """Independent numpy recomputation of the encoder forward pass."""
    h = np.maximum(stats @ p.pool_w0.data + p.pool_b0.data, 0.0) @ p.pool_w1.data + p.pool_b1.data
    for r in range(p.rounds):
        agg = h[nbrs].mean(axis=1)
        h = h + agg @ p.agg_w[r].data + p.agg_b[r].data
    return h


def test_single_voxel_matches_mlp_of_stats():
    rng = np.random.default_rng(0)
    cloud = PointCloud(np.array([[0.1, 0.2, 0.3], [0.15, 0.25, 0.35]]),
                       np.array([[0.5], [0.7]]))
    grid = voxelize(cloud, 1.0)
    assert grid.n_voxels == 1
    p = make_params(rng, pooled_dim=1 + 3 + 1, d=8, rounds=2, knn_k=4)
    out = encode(cloud, grid, p)
    assert out.features.shape == (1, 8)
    stats = pooled_stats(cloud, grid)
    expected = hand_encode(stats, np.array([[0]]), p)
    npt.assert_allclose(out.features, expected, rtol=1e-12)


def test_zero_weights_bias_only():
    rng = np.random.default_rng(1)
    pts = rng.uniform(0, 3, size=(60, 3))
    cloud = PointCloud(pts)
    grid = voxelize(cloud, 1.0)
    p = make_params(rng, pooled_dim=4, d=6, rounds=1, zero=True)
    p.pool_b1 = ad.Tensor(np.full(6, 2.0), requires_grad=True)
    out = encode(cloud, grid, p)
    # bias propagates identically everywhere (agg of constant + zero W)
    npt.assert_allclose(out.features, 2.0)


def test_two_voxel_hand_rolled():
    rng = np.random.default_rng(2)
    cloud = PointCloud(np.array([[0.2, 0.5, 0.5], [1.7, 0.5, 0.5], [1.9, 0.5, 0.5]]))
    grid = voxelize(cloud, 1.0)
    assert grid.n_voxels == 2
    p = make_params(rng, pooled_dim=4, d=5, rounds=1, knn_k=2)
    out = encode(cloud, grid, p)
    stats = pooled_stats(cloud, grid)
    nbrs = np.array([[0, 1], [1, 0]])
    npt.assert_allclose(out.features, hand_encode(stats, nbrs, p), rtol=1e-12)


def test_point_permutation_invariance():
    rng = np.random.default_rng(3)
    pts = rng.uniform(0, 4, size=(200, 3))
    ch = rng.uniform(0, 1, size=(200, 2))
    p = make_params(rng, pooled_dim=2 + 3 + 1, d=16, rounds=2, knn_k=4)
    cloud = PointCloud(pts, ch)
    out1 = encode(cloud, voxelize(cloud, 0.8), p).features
    perm = rng.permutation(200)
    cloud2 = PointCloud(pts[perm], ch[perm])
    out2 = encode(cloud2, voxelize(cloud2, 0.8), p).features
    npt.assert_allclose(out1, out2, atol=1e-6)


def test_locality_with_no_rounds():
    rng = np.random.default_rng(4)
    pts = np.array([[0.5, 0.5, 0.5], [0.6, 0.4, 0.5], [3.5, 3.5, 3.5]])
    p = make_params(rng, pooled_dim=4, d=6, rounds=0)
    cloud = PointCloud(pts)
    f1 = encode(cloud, voxelize(cloud, 1.0), p).features
    pts2 = pts.copy()
    pts2[2] += 0.2  # stays in its own voxel
    cloud2 = PointCloud(pts2)
    f2 = encode(cloud2, voxelize(cloud2, 1.0), p).features
    # voxel 0 (points 0 and 1) untouched; the perturbed voxel differs
    npt.assert_array_equal(f1[0], f2[0])
    assert not np.array_equal(f1[1], f2[1])


def test_shape_mismatch_raises():
    rng = np.random.default_rng(5)
    cloud = PointCloud(np.zeros((3, 3)), np.ones((3, 2)))
    grid = voxelize(cloud, 1.0)
    p = make_params(rng, pooled_dim=4, d=4, rounds=0)  # expects 0 channels
    with pytest.raises(ConfigError):
        encode(cloud, grid, p)


def test_encoder_gradients_match_finite_differences():
    rng = np.random.default_rng(6)
    pts = rng.uniform(0, 2, size=(25, 3))
    ch = rng.uniform(0, 1, size=(25, 1))
    cloud = PointCloud(pts, ch)
    grid = voxelize(cloud, 0.7)
    p = make_params(rng, pooled_dim=5, d=6, rounds=2, knn_k=3)
    target = rng.normal(size=(grid.n_voxels, 6))

    tensors = {
        "pool_w0": p.pool_w0, "pool_b0": p.pool_b0,
        "pool_w1": p.pool_w1, "pool_b1": p.pool_b1,
        "agg_w0": p.agg_w[0], "agg_b0": p.agg_b[0],
        "agg_w1": p.agg_w[1], "agg_b1": p.agg_b[1],
    }
    out = encode_features(cloud, grid, p)
    loss = ad.tsum(ad.mul(ad.sub(out, ad.Tensor(target)), ad.sub(out, ad.Tensor(target))))
    loss.backward()

    for name, t in tensors.items():
        orig = t.data.copy()

        def f(x, t=t):
            t.data = x.astype(np.float64)
            with ad.no_grad():
                o = encode_features(cloud, grid, p).data
            return float(np.sum((o - target) ** 2))

        fd_grad = finite_diff(f, orig, 1e-5)
        t.data = orig
        assert rel_error(t.grad, fd_grad, floor=1e-5) < 1e-4, name
