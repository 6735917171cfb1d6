"""Point clouds, sparse voxel sets, and the coordinate-key algebra.

Voxel coordinates are hashed by offsetting each signed index into [0, 2^21)
and bit-packing 21 bits per axis into one int64 key. The map is injective
for indices within +-2^20, which makes coordinate-set intersection an O(1)
hash operation.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, ContractError, RangeError

COORD_LIMIT = 1 << 20
_OFFSET = 1 << 20


class VoxelCoord(NamedTuple):
    ix: int
    iy: int
    iz: int


@dataclass(frozen=True)
class GridConfig:
    """Voxel size (meters per axis) and the axis-aligned spatial range."""

    voxel_size: tuple[float, float, float]
    x_range: tuple[float, float]
    y_range: tuple[float, float]
    z_range: tuple[float, float]

    def __post_init__(self):
        if any(s <= 0 for s in self.voxel_size):
            raise ConfigError(f"voxel size must be positive, got {self.voxel_size}")
        for name, (lo, hi) in (("x", self.x_range), ("y", self.y_range),
                               ("z", self.z_range)):
            if not lo < hi:
                raise ConfigError(f"{name}_range {lo}..{hi} is not well-ordered")

    @property
    def origin(self) -> np.ndarray:
        return np.array([self.x_range[0], self.y_range[0], self.z_range[0]])

    @property
    def sizes(self) -> np.ndarray:
        return np.array(self.voxel_size)

    @property
    def dims(self) -> tuple[int, int, int]:
        spans = (self.x_range[1] - self.x_range[0],
                 self.y_range[1] - self.y_range[0],
                 self.z_range[1] - self.z_range[0])
        return tuple(int(np.ceil(s / v)) for s, v in zip(spans, self.voxel_size))

    def coords_of(self, xyz: np.ndarray) -> np.ndarray:
        """Integer grid indices of metric points (no range filtering)."""
        return np.floor((xyz - self.origin) / self.sizes).astype(np.int64)

    def centers_of(self, coords: np.ndarray) -> np.ndarray:
        """Metric centers of integer voxel coordinates."""
        return self.origin + (np.asarray(coords, dtype=np.float64) + 0.5) * self.sizes

    def in_range(self, coords: np.ndarray) -> np.ndarray:
        dims = self.dims
        c = np.asarray(coords)
        ok = np.ones(len(c), dtype=bool)
        for axis in range(3):
            ok &= (c[:, axis] >= 0) & (c[:, axis] < dims[axis])
        return ok


@dataclass
class PointCloud:
    """Points as an [N, 4] float array with columns x, y, z, intensity."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 4)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ContractError(f"point cloud must be [N, 4], got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ContractError("point cloud contains non-finite values")
        self.points = pts

    def __len__(self) -> int:
        return len(self.points)

    # -- CSV form: header `x,y,z,intensity`, one point per row --------------

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w") as f:
            f.write("x,y,z,intensity\n")
            for row in self.points:
                f.write(",".join(repr(float(v)) for v in row) + "\n")

    @classmethod
    def from_csv(cls, path: str | Path) -> "PointCloud":
        with open(path) as f:
            header = f.readline().strip()
            if header != "x,y,z,intensity":
                raise ContractError(f"unexpected point cloud header {header!r}")
            data = np.loadtxt(f, delimiter=",", ndmin=2) if f else np.zeros((0, 4))
        if data.size == 0:
            data = np.zeros((0, 4))
        return cls(data)

    # -- binary form: packed little-endian float32, same column order -------

    def to_binary(self, path: str | Path) -> None:
        Path(path).write_bytes(
            np.ascontiguousarray(self.points, dtype="<f4").tobytes())

    @classmethod
    def from_binary(cls, path: str | Path) -> "PointCloud":
        raw = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
        if raw.size % 4:
            raise ContractError("binary point file length is not a multiple of 16 bytes")
        return cls(raw.reshape(-1, 4).astype(np.float64))


@dataclass
class SparseVoxelSet:
    """Occupied voxels: integer coords plus one feature vector per voxel.

    Features may be a plain array (raw encodings) or a Tensor participating
    in a recorded computation. Coordinates are unique within a set.
    """

    coords: np.ndarray
    features: "np.ndarray | Tensor"
    grid: GridConfig

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        n = len(self.coords)
        feat_len = self.features.data.shape[0] if isinstance(self.features, Tensor) \
            else np.asarray(self.features).shape[0]
        if feat_len != n:
            raise ContractError(f"{n} coords but {feat_len} feature rows")
        if n and len(np.unique(hash_coords(self.coords))) != n:
            raise ContractError("duplicate voxel coordinates in set")

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def feature_data(self) -> np.ndarray:
        return self.features.data if isinstance(self.features, Tensor) \
            else np.asarray(self.features)

    def with_features(self, features) -> "SparseVoxelSet":
        return SparseVoxelSet(self.coords, features, self.grid)


RAW_FEATURE_DIM = 5  # mean xyz offset from voxel center, mean intensity, log1p(count)


def voxelize(cloud: PointCloud, grid: GridConfig) -> SparseVoxelSet:
    """Aggregate points into per-cell features.

    Each occupied cell yields (mean offset of its points from the cell
    center, mean intensity, log(1 + point count)). Points outside the grid
    range are dropped; the result is ordered by coordinate hash key, so it
    is invariant to input point order.
    """
    pts = cloud.points
    if len(pts) == 0:
        return SparseVoxelSet(np.zeros((0, 3), dtype=np.int64),
                              np.zeros((0, RAW_FEATURE_DIM)), grid)
    coords = grid.coords_of(pts[:, :3])
    keep = grid.in_range(coords)
    pts, coords = pts[keep], coords[keep]
    if len(pts) == 0:
        return SparseVoxelSet(np.zeros((0, 3), dtype=np.int64),
                              np.zeros((0, RAW_FEATURE_DIM)), grid)

    keys = hash_coords(coords)
    uniq_keys, inverse, counts = np.unique(keys, return_inverse=True,
                                           return_counts=True)
    n = len(uniq_keys)
    sums = np.zeros((n, 4))
    np.add.at(sums, inverse, pts)
    means = sums / counts[:, None]

    # one representative coord per unique key (hash is injective)
    first_idx = np.full(n, len(pts), dtype=np.int64)
    np.minimum.at(first_idx, inverse, np.arange(len(pts)))
    uniq_coords = coords[first_idx]

    offsets = means[:, :3] - grid.centers_of(uniq_coords)
    feats = np.concatenate(
        [offsets, means[:, 3:4], np.log1p(counts)[:, None]], axis=1)
    return SparseVoxelSet(uniq_coords, feats, grid)


def hash_coord(coord: VoxelCoord | tuple[int, int, int]) -> int:
    """Injective int64 key of one voxel coordinate (21 bits per axis)."""
    return int(hash_coords(np.asarray(coord, dtype=np.int64).reshape(1, 3))[0])


def hash_coords(coords: np.ndarray) -> np.ndarray:
    """Vectorized coordinate keys; raises RangeError outside +-2^20."""
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if c.size and (np.abs(c) > COORD_LIMIT).any():
        bad = c[(np.abs(c) > COORD_LIMIT).any(axis=1)][0]
        raise RangeError(f"voxel index {tuple(bad)} outside +-{COORD_LIMIT}")
    shifted = c + _OFFSET
    return (shifted[:, 0] << 42) | (shifted[:, 1] << 21) | shifted[:, 2]


def unhash_key(key: int) -> VoxelCoord:
    mask = (1 << 21) - 1
    return VoxelCoord(int((key >> 42) & mask) - _OFFSET,
                      int((key >> 21) & mask) - _OFFSET,
                      int(key & mask) - _OFFSET)


def intersect_coords(a: SparseVoxelSet, b: SparseVoxelSet) -> np.ndarray:
    """Coordinates present in both sets, sorted by hash key (canonical order)."""
    if a.grid != b.grid:
        raise ConfigError("cannot intersect voxel sets with different grid configs")
    if len(a) == 0 or len(b) == 0:
        return np.zeros((0, 3), dtype=np.int64)
    ka = hash_coords(a.coords)
    kb = hash_coords(b.coords)
    common = np.intersect1d(ka, kb)  # sorted, unique
    return np.array([unhash_key(int(k)) for k in common], dtype=np.int64).reshape(-1, 3)
