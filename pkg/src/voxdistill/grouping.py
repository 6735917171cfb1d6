"""Dynamic voxel grouping: window partitioning and masked sequence batches.

Voxels are bucketed by floor-dividing their coordinates by a window size,
ordered inside each bucket along the Morton (Z-order) curve of their local
coordinates, chunked to a maximum sequence length, and padded with masked
slots. The result feeds both sequence encoders; `scatter_back` inverts it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, gather_rows, mul, scatter_add_rows
from .errors import ContractError
from .voxelgrid import GridConfig, SparseVoxelSet, hash_coords


def morton_encode(coords: np.ndarray) -> np.ndarray:
    """Z-order key of non-negative integer triples (21 bits per axis)."""
    c = np.asarray(coords, dtype=np.uint64).reshape(-1, 3)
    return (_part1by2(c[:, 0]) | (_part1by2(c[:, 1]) << np.uint64(1))
            | (_part1by2(c[:, 2]) << np.uint64(2)))


def _part1by2(v: np.ndarray) -> np.ndarray:
    """Spread the low 21 bits of v so consecutive bits land 3 apart."""
    v = v & np.uint64(0x1FFFFF)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


@dataclass
class VoxelGroupBatch:
    """Padded voxel sequences plus the bookkeeping to invert the grouping.

    sequences        [G, L, D] features, zeros at masked slots
    mask             [G, L] booleans, True for real voxels
    origin_index     [G, L] row index into the source set, -1 at padding
    coords_per_slot  [G, L, 3] voxel coords, zeros at padding
    """

    sequences: Tensor
    mask: np.ndarray
    origin_index: np.ndarray
    coords_per_slot: np.ndarray
    window: int
    source_coords: np.ndarray
    grid: GridConfig

    @property
    def num_groups(self) -> int:
        return self.mask.shape[0]

    @property
    def seq_len(self) -> int:
        return self.mask.shape[1]

    @property
    def mask_f(self) -> np.ndarray:
        """Mask as floats shaped for feature broadcasting."""
        return self.mask.astype(np.float64)[:, :, None]

    def local_coords(self) -> np.ndarray:
        """Per-slot coords relative to their window origin, in [0, window)."""
        buckets = np.floor_divide(self.coords_per_slot, self.window)
        return self.coords_per_slot - buckets * self.window


@dataclass
class DistanceMatrix:
    """Per-group pairwise Euclidean distances in voxel-index units."""

    values: np.ndarray  # [G, L, L]


def group_voxels(vset: SparseVoxelSet, window: int, max_len: int) -> VoxelGroupBatch:
    """Partition a voxel set into Morton-ordered window sequences.

    Buckets longer than max_len split into consecutive groups, so every
    source voxel lands in exactly one (group, slot).
    """
    if window < 1 or max_len < 1:
        raise ContractError("window and max_len must be >= 1")
    n = len(vset)
    coords = vset.coords
    feats = vset.features if isinstance(vset.features, Tensor) else Tensor(vset.features)
    d = feats.data.shape[1]

    if n == 0:
        return VoxelGroupBatch(Tensor(np.zeros((0, max_len, d))),
                               np.zeros((0, max_len), dtype=bool),
                               np.full((0, max_len), -1, dtype=np.int64),
                               np.zeros((0, max_len, 3), dtype=np.int64),
                               window, coords, vset.grid)

    buckets = np.floor_divide(coords, window)
    bucket_keys = hash_coords(buckets)
    local = coords - buckets * window
    morton = morton_encode(local)
    order = np.lexsort((np.arange(n), morton, bucket_keys))

    sorted_keys = bucket_keys[order]
    starts = np.flatnonzero(np.r_[True, sorted_keys[1:] != sorted_keys[:-1]])
    ends = np.r_[starts[1:], n]

    slots: list[np.ndarray] = []
    for s, e in zip(starts, ends):
        run = order[s:e]
        for off in range(0, len(run), max_len):
            slots.append(run[off:off + max_len])

    g = len(slots)
    origin = np.full((g, max_len), -1, dtype=np.int64)
    mask = np.zeros((g, max_len), dtype=bool)
    for gi, run in enumerate(slots):
        origin[gi, :len(run)] = run
        mask[gi, :len(run)] = True

    coords_per_slot = np.zeros((g, max_len, 3), dtype=np.int64)
    coords_per_slot[mask] = coords[origin[mask]]

    gather_idx = np.where(mask, origin, 0)
    sequences = mul(gather_rows(feats, gather_idx),
                    mask.astype(np.float64)[:, :, None])
    return VoxelGroupBatch(sequences, mask, origin, coords_per_slot,
                           window, coords, vset.grid)


def scatter_back(batch: VoxelGroupBatch, updated: Tensor) -> SparseVoxelSet:
    """Write per-slot features back onto the source voxels."""
    updated = updated if isinstance(updated, Tensor) else Tensor(updated)
    g, l = batch.mask.shape
    if updated.data.shape[:2] != (g, l):
        raise ContractError(
            f"updated block shape {updated.data.shape} does not match batch ({g}, {l})")
    n = len(batch.source_coords)
    masked = mul(updated, batch.mask_f)
    idx = np.where(batch.mask, batch.origin_index, 0)
    feats = scatter_add_rows(masked, idx, max(n, 1))
    if n == 0:
        feats = Tensor(np.zeros((0, updated.data.shape[-1])))
    return SparseVoxelSet(batch.source_coords, feats, batch.grid)


def pairwise_distances(batch: VoxelGroupBatch) -> DistanceMatrix:
    """Euclidean slot-to-slot distances per group; padding entries are
    meaningless and must be masked by the consumer."""
    c = batch.coords_per_slot.astype(np.float64)
    diff = c[:, :, None, :] - c[:, None, :, :]
    return DistanceMatrix(np.sqrt((diff * diff).sum(axis=-1)))
