"""Stand-in voxel feature encoder.

Maps a point cloud to per-voxel descriptors: an MLP over pooled per-voxel
point statistics, followed by R rounds of mean aggregation over voxel
k-nearest-neighborhoods with residual connections. Any callable with the
same (cloud, grid) -> features contract can replace it.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError
from .geom import PointCloud, VoxelGrid, voxel_knn


@dataclass
class VoxelFeatures:
    """Per-voxel D-dimensional descriptors aligned with a VoxelGrid."""

    features: np.ndarray  # (N', D)
    grid: VoxelGrid
    feature_dim: int


@dataclass
class EncoderParams:
    """Pooling MLP weights plus one linear map per aggregation round."""

    pool_w0: ad.Tensor
    pool_b0: ad.Tensor
    pool_w1: ad.Tensor
    pool_b1: ad.Tensor
    agg_w: list  # length R, each (D, D)
    agg_b: list
    knn_k: int
    rounds: int


def pooled_stats(cloud: PointCloud, grid: VoxelGrid) -> np.ndarray:
    """Per-voxel [mean channels, mean normalized offset, log point count]."""
    seg = grid.point_to_voxel
    nv = grid.n_voxels
    counts = np.bincount(seg, minlength=nv).astype(np.float64)
    offsets = (cloud.positions - grid.voxel_centers[seg]) / grid.voxel_size
    mean_off = np.zeros((nv, 3))
    np.add.at(mean_off, seg, offsets)
    mean_off /= counts[:, None]
    cols = []
    if cloud.channels.shape[1]:
        mean_ch = np.zeros((nv, cloud.channels.shape[1]))
        np.add.at(mean_ch, seg, cloud.channels)
        mean_ch /= counts[:, None]
        cols.append(mean_ch)
    cols.append(mean_off)
    cols.append(np.log(counts)[:, None])
    return np.concatenate(cols, axis=1)


def encode_features(cloud: PointCloud, grid: VoxelGrid, params: EncoderParams, dtype=np.float64) -> ad.Tensor:
    """Differentiable encode; returns the (N', D) feature tensor."""
    stats = pooled_stats(cloud, grid).astype(dtype)
    if stats.shape[1] != params.pool_w0.data.shape[0]:
        raise ConfigError(
            f"pooled stats have {stats.shape[1]} columns but pooling MLP "
            f"expects {params.pool_w0.data.shape[0]}"
        )
    h = ad.linear(ad.relu(ad.linear(ad.Tensor(stats), params.pool_w0, params.pool_b0)),
                  params.pool_w1, params.pool_b1)
    if params.rounds:
        nbr = voxel_knn(grid, min(params.knn_k, grid.n_voxels))
        flat = nbr.ravel()
        k = nbr.shape[1]
        nv = grid.n_voxels
        d = h.data.shape[1]
        for r in range(params.rounds):
            gathered = ad.reshape(ad.gather_rows(h, flat), (nv, k, d))
            agg = ad.tmean(gathered, axis=1)
            h = ad.add(h, ad.linear(agg, params.agg_w[r], params.agg_b[r]))
    return h


def encode(cloud: PointCloud, grid: VoxelGrid, params: EncoderParams, dtype=np.float64) -> VoxelFeatures:
    """Non-differentiable public entry point."""
    with ad.no_grad():
        feats = encode_features(cloud, grid, params, dtype).data
    return VoxelFeatures(features=feats, grid=grid, feature_dim=feats.shape[1])
