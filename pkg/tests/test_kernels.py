"""The numba and numpy kernel paths must agree exactly, not approximately."""

import numpy as np
import numpy.testing as npt
import pytest

from clickseg import kernels

pytestmark = pytest.mark.skipif(
    not kernels.using_numba(), reason="numba path disabled; nothing to compare"
)


def test_fps_paths_identical():
    rng = np.random.default_rng(0)
    for _ in range(10):
        pts = rng.integers(0, 5, size=(rng.integers(2, 200), 3)).astype(np.float64)
        k = int(rng.integers(1, len(pts) + 1))
        npt.assert_array_equal(
            kernels._fps_numba(pts, k, 0), kernels.fps_numpy(pts, k, 0)
        )


def test_knn_paths_identical():
    rng = np.random.default_rng(1)
    for _ in range(10):
        pts = rng.uniform(0, 3, size=(rng.integers(2, 150), 3))
        k = int(rng.integers(1, min(8, len(pts)) + 1))
        npt.assert_array_equal(kernels._knn_numba(pts, k), kernels.knn_numpy(pts, k))


def test_min_dist_paths_identical():
    rng = np.random.default_rng(2)
    q = rng.normal(size=(700, 3))
    r = rng.normal(size=(333, 3))
    d1, i1 = kernels._min_dist_numba(q, r)
    d2, i2 = kernels.min_dist_numpy(q, r)
    npt.assert_array_equal(i1, i2)
    npt.assert_array_equal(d1, d2)


def test_radius_components_paths_identical():
    rng = np.random.default_rng(3)
    for _ in range(5):
        pts = rng.uniform(0, 4, size=(rng.integers(1, 400), 3))
        a = kernels._radius_components_numba(pts, 0.5)
        b = kernels.radius_components_numpy(pts, 0.5)
        npt.assert_array_equal(a, b)


def test_radius_components_two_clusters():
    pts = np.array(
        [[0, 0, 0], [0.3, 0, 0], [0.6, 0, 0], [5, 0, 0], [5.3, 0, 0]], dtype=float
    )
    labels = kernels.radius_components(pts, 0.5)
    npt.assert_array_equal(labels, [0, 0, 0, 1, 1])


def test_scatter_add_paths_identical():
    rng = np.random.default_rng(4)
    src = rng.normal(size=(500, 16))
    idx = rng.integers(0, 40, size=500)
    out1 = np.zeros((40, 16))
    out2 = np.zeros((40, 16))
    kernels._scatter_add_rows_numba(out1, idx, src)
    kernels.scatter_add_rows_numpy(out2, idx, src)
    npt.assert_array_equal(out1, out2)
