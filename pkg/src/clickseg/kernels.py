"""Hot geometry kernels with numba-accelerated and pure-numpy implementations.

Every public function dispatches to a numba ``@njit`` kernel when numba is
available, and to a vectorized numpy fallback otherwise. Setting the
environment variable ``CLICKSEG_NUMBA=0`` forces the numpy path. Both paths
use the same arithmetic (same accumulation order, strict comparisons for
tie-breaking) so results are identical, not merely close.

``benchmarks/bench_kernels.py`` times the two paths against each other.
"""

import os

import numpy as np

try:
    from numba import njit

    _HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAS_NUMBA = False

NUMBA_ENABLED = _HAS_NUMBA and os.environ.get("CLICKSEG_NUMBA", "1") != "0"


def using_numba() -> bool:
    """True when the numba kernel path is active."""
    return NUMBA_ENABLED


# ---------------------------------------------------------------------------
# Farthest point sampling
# ---------------------------------------------------------------------------


def fps_numpy(positions, k, start_index=0):
    positions = np.ascontiguousarray(positions, dtype=np.float64)
    n = positions.shape[0]
    out = np.empty(k, dtype=np.int64)
    mind = np.full(n, np.inf)
    out[0] = start_index
    last = start_index
    for j in range(1, k):
        d = positions - positions[last]
        dsq = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]
        np.minimum(mind, dsq, out=mind)
        mind[last] = -1.0  # exclude selected points from future argmax
        last = int(np.argmax(mind))
        out[j] = last
    return out


if _HAS_NUMBA:

    @njit(cache=True)
    def _fps_numba(positions, k, start_index):
        n = positions.shape[0]
        out = np.empty(k, dtype=np.int64)
        mind = np.full(n, np.inf)
        out[0] = start_index
        last = start_index
        for j in range(1, k):
            px = positions[last, 0]
            py = positions[last, 1]
            pz = positions[last, 2]
            for i in range(n):
                dx = positions[i, 0] - px
                dy = positions[i, 1] - py
                dz = positions[i, 2] - pz
                dsq = dx * dx + dy * dy + dz * dz
                if dsq < mind[i]:
                    mind[i] = dsq
            mind[last] = -1.0
            best = 0
            bestd = mind[0]
            for i in range(1, n):
                if mind[i] > bestd:
                    bestd = mind[i]
                    best = i
            out[j] = best
            last = best
        return out


def fps(positions, k, start_index=0):
    """Greedy farthest point sampling.

    Returns k point indices; the first equals start_index, each later one
    maximizes the minimum distance to the already-selected set. Ties break
    toward the lowest index.
    """
    if NUMBA_ENABLED:
        return _fps_numba(
            np.ascontiguousarray(positions, dtype=np.float64), k, start_index
        )
    return fps_numpy(positions, k, start_index)


# ---------------------------------------------------------------------------
# Brute-force k nearest neighbors (self first)
# ---------------------------------------------------------------------------


def knn_numpy(points, k):
    points = np.ascontiguousarray(points, dtype=np.float64)
    n = points.shape[0]
    out = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        d = points - points[i]
        dsq = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]
        dsq[i] = -1.0  # self sorts first
        out[i] = np.argsort(dsq, kind="stable")[:k]
    return out


if _HAS_NUMBA:

    @njit(cache=True)
    def _knn_numba(points, k):
        n = points.shape[0]
        out = np.empty((n, k), dtype=np.int64)
        nd = np.empty(k, dtype=np.float64)
        ni = np.empty(k, dtype=np.int64)
        for i in range(n):
            cnt = 0
            for j in range(n):
                dx = points[j, 0] - points[i, 0]
                dy = points[j, 1] - points[i, 1]
                dz = points[j, 2] - points[i, 2]
                dsq = dx * dx + dy * dy + dz * dz
                if j == i:
                    dsq = -1.0
                if cnt < k:
                    pos = cnt
                    while pos > 0 and nd[pos - 1] > dsq:
                        nd[pos] = nd[pos - 1]
                        ni[pos] = ni[pos - 1]
                        pos -= 1
                    nd[pos] = dsq
                    ni[pos] = j
                    cnt += 1
                elif dsq < nd[k - 1]:
                    pos = k - 1
                    while pos > 0 and nd[pos - 1] > dsq:
                        nd[pos] = nd[pos - 1]
                        ni[pos] = ni[pos - 1]
                        pos -= 1
                    nd[pos] = dsq
                    ni[pos] = j
            for c in range(k):
                out[i, c] = ni[c]
        return out


def knn(points, k):
    """For each point the k nearest points (self first, ties by lowest index)."""
    if NUMBA_ENABLED:
        return _knn_numba(np.ascontiguousarray(points, dtype=np.float64), k)
    return knn_numpy(points, k)


# ---------------------------------------------------------------------------
# Minimum distance from each query point to a reference set
# ---------------------------------------------------------------------------


def min_dist_numpy(queries, refs, chunk=512):
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    refs = np.ascontiguousarray(refs, dtype=np.float64)
    n = queries.shape[0]
    dsq = np.empty(n, dtype=np.float64)
    idx = np.empty(n, dtype=np.int64)
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        d = queries[s:e, None, :] - refs[None, :, :]
        dd = d[:, :, 0] * d[:, :, 0] + d[:, :, 1] * d[:, :, 1] + d[:, :, 2] * d[:, :, 2]
        idx[s:e] = np.argmin(dd, axis=1)
        dsq[s:e] = dd[np.arange(e - s), idx[s:e]]
    return dsq, idx


if _HAS_NUMBA:

    @njit(cache=True)
    def _min_dist_numba(queries, refs):
        n = queries.shape[0]
        m = refs.shape[0]
        dsq = np.empty(n, dtype=np.float64)
        idx = np.empty(n, dtype=np.int64)
        for i in range(n):
            best = np.inf
            bi = -1
            qx = queries[i, 0]
            qy = queries[i, 1]
            qz = queries[i, 2]
            for j in range(m):
                dx = qx - refs[j, 0]
                dy = qy - refs[j, 1]
                dz = qz - refs[j, 2]
                d = dx * dx + dy * dy + dz * dz
                if d < best:
                    best = d
                    bi = j
            dsq[i] = best
            idx[i] = bi
        return dsq, idx


def min_dist_to_set(queries, refs):
    """Squared distance and index of the nearest reference point per query.

    Ties break toward the lowest reference index.
    """
    if NUMBA_ENABLED:
        return _min_dist_numba(
            np.ascontiguousarray(queries, dtype=np.float64),
            np.ascontiguousarray(refs, dtype=np.float64),
        )
    return min_dist_numpy(queries, refs)


# ---------------------------------------------------------------------------
# Connected components on a radius graph
# ---------------------------------------------------------------------------


def radius_components_numpy(points, radius):
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components

    points = np.ascontiguousarray(points, dtype=np.float64)
    n = points.shape[0]
    if n == 0:
        return np.empty(0, dtype=np.int64)
    from scipy.spatial import cKDTree

    pairs = cKDTree(points).query_pairs(radius, output_type="ndarray")
    if pairs.size:
        data = np.ones(len(pairs), dtype=np.int8)
        graph = coo_matrix((data, (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    else:
        graph = coo_matrix((n, n), dtype=np.int8)
    _, labels = connected_components(graph, directed=False)
    return _canonical_labels(labels.astype(np.int64))


def _canonical_labels(labels):
    """Relabel components in order of first appearance."""
    uniq, first = np.unique(labels, return_index=True)
    ranks = np.argsort(np.argsort(first))
    remap = np.empty(uniq.max() + 1, dtype=np.int64)
    remap[uniq] = ranks
    return remap[labels]


if _HAS_NUMBA:

    @njit(cache=True)
    def _radius_components_numba(points, radius):
        n = points.shape[0]
        labels = np.full(n, -1, dtype=np.int64)
        if n == 0:
            return labels
        r2 = radius * radius
        cell = np.empty((n, 3), dtype=np.int64)
        for i in range(n):
            for d in range(3):
                cell[i, d] = np.int64(np.floor(points[i, d] / radius))
        minc = np.empty(3, dtype=np.int64)
        dims = np.empty(3, dtype=np.int64)
        for d in range(3):
            mn = cell[0, d]
            mx = cell[0, d]
            for i in range(1, n):
                if cell[i, d] < mn:
                    mn = cell[i, d]
                if cell[i, d] > mx:
                    mx = cell[i, d]
            minc[d] = mn
            dims[d] = mx - mn + 1
        cid = np.empty(n, dtype=np.int64)
        for i in range(n):
            cid[i] = (
                (cell[i, 0] - minc[0]) * dims[1] + (cell[i, 1] - minc[1])
            ) * dims[2] + (cell[i, 2] - minc[2])
        order = np.argsort(cid)
        sorted_cid = cid[order]
        stack = np.empty(n, dtype=np.int64)
        next_label = 0
        for seed in range(n):
            if labels[seed] >= 0:
                continue
            labels[seed] = next_label
            stack[0] = seed
            top = 1
            while top > 0:
                top -= 1
                i = stack[top]
                for ox in range(-1, 2):
                    for oy in range(-1, 2):
                        for oz in range(-1, 2):
                            nc = (
                                (cell[i, 0] + ox - minc[0]) * dims[1]
                                + (cell[i, 1] + oy - minc[1])
                            ) * dims[2] + (cell[i, 2] + oz - minc[2])
                            lo = np.searchsorted(sorted_cid, nc)
                            hi = np.searchsorted(sorted_cid, nc + 1)
                            for s in range(lo, hi):
                                j = order[s]
                                if labels[j] >= 0:
                                    continue
                                dx = points[j, 0] - points[i, 0]
                                dy = points[j, 1] - points[i, 1]
                                dz = points[j, 2] - points[i, 2]
                                if dx * dx + dy * dy + dz * dz <= r2:
                                    labels[j] = next_label
                                    stack[top] = j
                                    top += 1
            next_label += 1
        return labels


def radius_components(points, radius):
    """Component label per point; points within `radius` are connected.

    Labels are numbered in order of first appearance, so the output is
    deterministic and identical across kernel paths.
    """
    if NUMBA_ENABLED:
        labels = _radius_components_numba(
            np.ascontiguousarray(points, dtype=np.float64), float(radius)
        )
        return labels
    return radius_components_numpy(points, radius)


# ---------------------------------------------------------------------------
# Row scatter-add (gather backward / segment pooling)
# ---------------------------------------------------------------------------


def scatter_add_rows_numpy(out, idx, src):
    np.add.at(out, idx, src)
    return out


if _HAS_NUMBA:

    @njit(cache=True)
    def _scatter_add_rows_numba(out, idx, src):
        n = idx.shape[0]
        c = src.shape[1]
        for i in range(n):
            t = idx[i]
            for j in range(c):
                out[t, j] += src[i, j]
        return out


def scatter_add_rows(out, idx, src):
    """out[idx[i], :] += src[i, :], accumulating in ascending row order."""
    if NUMBA_ENABLED:
        return _scatter_add_rows_numba(out, np.ascontiguousarray(idx), src)
    return scatter_add_rows_numpy(out, idx, src)
