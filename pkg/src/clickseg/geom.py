"""Deterministic geometry: voxelization, FPS, Fourier embeddings, voxel kNN."""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import InputError


@dataclass
class PointCloud:
    """N points with xyz positions plus optional extra channels in [0, 1]."""

    positions: np.ndarray  # (N, 3) float64, meters
    channels: np.ndarray = None  # (N, C-3) float64

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise InputError(f"positions must be (N, 3), got {self.positions.shape}")
        if self.positions.shape[0] < 1:
            raise InputError("point cloud must contain at least one point")
        if not np.all(np.isfinite(self.positions)):
            raise InputError("positions contain non-finite values")
        if self.channels is None:
            self.channels = np.zeros((self.positions.shape[0], 0), dtype=np.float64)
        else:
            self.channels = np.asarray(self.channels, dtype=np.float64)
            if self.channels.ndim != 2 or self.channels.shape[0] != self.positions.shape[0]:
                raise InputError(
                    f"channels must be (N, C-3) with N={self.positions.shape[0]}, "
                    f"got {self.channels.shape}"
                )
            if not np.all(np.isfinite(self.channels)):
                raise InputError("channels contain non-finite values")

    @property
    def n_points(self) -> int:
        return self.positions.shape[0]


@dataclass
class VoxelGrid:
    """Occupied voxel lattice with a total point-to-voxel map.

    The lattice origin is fixed at world (0, 0, 0); voxels are listed in
    lexicographic (x, y, z) lattice order.
    """

    voxel_size: float
    voxel_coords: np.ndarray  # (N', 3) int64 lattice indices
    point_to_voxel: np.ndarray  # (N,) int64 into [0, N')
    voxel_centers: np.ndarray  # (N', 3) float64

    @property
    def n_voxels(self) -> int:
        return self.voxel_coords.shape[0]


@dataclass
class FourierEmbeddingConfig:
    """sin/cos embedding over 3 axes with log-spaced frequencies 1..max."""

    num_bands: int = 16
    max_frequency: float = 10.0  # cycles per meter
    out_dim: int = None

    def __post_init__(self):
        if self.num_bands < 1:
            raise InputError("num_bands must be positive")
        if self.max_frequency <= 0:
            raise InputError("max_frequency must be positive")
        expected = 2 * 3 * self.num_bands
        if self.out_dim is None:
            self.out_dim = expected
        elif self.out_dim != expected:
            raise InputError(
                f"out_dim must equal 2*3*num_bands = {expected}, got {self.out_dim}"
            )

    @property
    def frequencies(self) -> np.ndarray:
        if self.num_bands == 1:
            return np.array([1.0])
        return np.geomspace(1.0, self.max_frequency, self.num_bands)


def voxelize(cloud: PointCloud, voxel_size: float) -> VoxelGrid:
    """Partition points into the occupied cells of a fixed-origin lattice.

    Cell index of a point is floor(position / voxel_size) per axis; centers
    are cell midpoints. Occupied cells come out in lexicographic order.
    """
    if voxel_size <= 0:
        raise InputError(f"voxel_size must be positive, got {voxel_size}")
    lattice = np.floor(cloud.positions / voxel_size).astype(np.int64)
    coords, inverse = np.unique(lattice, axis=0, return_inverse=True)
    centers = (coords.astype(np.float64) + 0.5) * voxel_size
    return VoxelGrid(
        voxel_size=float(voxel_size),
        voxel_coords=coords,
        point_to_voxel=inverse.astype(np.int64).ravel(),
        voxel_centers=centers,
    )


def farthest_point_sample(positions, k: int, start_index: int = 0) -> np.ndarray:
    """Greedy max-min sampling of k indices, deterministic (ties: lowest index)."""
    positions = np.asarray(positions, dtype=np.float64)
    m = positions.shape[0]
    if not 1 <= k <= m:
        raise InputError(f"k must be in [1, {m}], got {k}")
    if not 0 <= start_index < m:
        raise InputError(f"start_index must be in [0, {m}), got {start_index}")
    return kernels.fps(positions, k, start_index)


def fourier_embed(position, config: FourierEmbeddingConfig) -> np.ndarray:
    """Embed 3D position(s) as [sin(2*pi*f*x), cos(2*pi*f*x)] per axis and band.

    Accepts a single (3,) position or an (N, 3) batch; output is (out_dim,)
    or (N, out_dim), axis-major then band-major with sin before cos.
    """
    pos = np.asarray(position, dtype=np.float64)
    single = pos.ndim == 1
    if single:
        pos = pos[None, :]
    if pos.shape[1] != 3:
        raise InputError(f"position must have 3 components, got shape {pos.shape}")
    if not np.all(np.isfinite(pos)):
        raise InputError("position contains non-finite values")
    ang = 2.0 * np.pi * pos[:, :, None] * config.frequencies[None, None, :]
    parts = np.stack([np.sin(ang), np.cos(ang)], axis=-1)  # (N, 3, B, 2)
    out = parts.reshape(pos.shape[0], config.out_dim)
    return out[0] if single else out


def voxel_knn(grid: VoxelGrid, k: int) -> np.ndarray:
    """k nearest voxel centers per voxel, self first, ties by lowest index."""
    if not 1 <= k <= grid.n_voxels:
        raise InputError(f"k must be in [1, {grid.n_voxels}], got {k}")
    return kernels.knn(grid.voxel_centers, k)
