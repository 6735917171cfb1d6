"""Foreground voxel segmentation and confidence-gated feature diffusion.

Voxels classified above a confidence threshold spread their features into
the surrounding k x k ring of BEV neighbors (same z level), densifying the
evidence around likely objects before detection. Newly created voxels take
the mean feature of their contributing sources.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import math

import numpy as np

from .autodiff import (
    Tensor,
    add,
    affine,
    clamp,
    concat,
    gather_rows,
    log,
    mul,
    neg,
    power,
    reduce_mean,
    reshape,
    scatter_add_rows,
    sigmoid,
    silu,
    sub,
)
from .boxes import Box3D
from .errors import ContractError, EmptyInputError
from .optim import ParamStore
from .voxelgrid import SparseVoxelSet, hash_coords

PROB_CLAMP = 1e-7


@dataclass
class SegOutput:
    """Per-voxel foreground probabilities (clamped into the open interval)."""

    probs: Tensor   # [N]
    logits: Tensor  # [N]


def init_seg_params(store: ParamStore, d: int, rng: np.random.Generator,
                    prefix: str = "seg.", prior: float = 0.3) -> None:
    store.add(prefix + "w1", rng.normal(0.0, 1.0 / math.sqrt(d), (d, d)))
    store.add(prefix + "b1", np.zeros(d))
    store.add(prefix + "w2", rng.normal(0.0, 1.0 / math.sqrt(d), (d, 1)))
    # bias set so the initial foreground rate matches the prior
    store.add(prefix + "b2", np.full(1, math.log(prior / (1.0 - prior))))


def seg_forward(features: Tensor, p: Mapping[str, Tensor],
                prefix: str = "seg.") -> SegOutput:
    """Two-affine MLP with silu, one sigmoid probability per voxel."""
    h = silu(affine(features, p[prefix + "w1"], p[prefix + "b1"]))
    logits = reshape(affine(h, p[prefix + "w2"], p[prefix + "b2"]),
                     (features.data.shape[0],))
    probs = clamp(sigmoid(logits), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return SegOutput(probs=probs, logits=logits)


def label_voxels(vset: SparseVoxelSet, boxes: Sequence[Box3D]) -> np.ndarray:
    """1 where the voxel center lies inside any box, else 0."""
    labels = np.zeros(len(vset), dtype=np.int64)
    if len(vset) == 0:
        return labels
    centers = vset.grid.centers_of(vset.coords)
    for box in boxes:
        labels |= box.contains_points(centers).astype(np.int64)
    return labels


def binary_focal_loss(probs: Tensor, labels: np.ndarray,
                      alpha: float, gamma: float) -> Tensor:
    """Elementwise focal terms; alpha weights positives, negatives are unweighted.

    With gamma=0 and alpha=1 this is exactly binary cross-entropy.
    """
    y = np.asarray(labels, dtype=np.float64)
    pos = neg(mul(mul(power(sub(1.0, probs), gamma), log(probs)), alpha))
    negt = neg(mul(power(probs, gamma), log(sub(1.0, probs))))
    return add(mul(pos, y), mul(negt, 1.0 - y))


def focal_seg_loss(out: SegOutput, labels: np.ndarray,
                   alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Mean focal loss over all valid voxels."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise EmptyInputError("segmentation loss over zero voxels")
    if labels.size != out.probs.data.shape[0]:
        raise ContractError(
            f"{labels.size} labels for {out.probs.data.shape[0]} voxels")
    return reduce_mean(binary_focal_loss(out.probs, labels, alpha, gamma))


def diffuse(vset: SparseVoxelSet, out: SegOutput, threshold: float,
            k: int) -> SparseVoxelSet:
    """Insert k x k BEV neighbors (same z) around confident voxels.

    Existing voxels keep their features; each new voxel takes the mean of
    every source voxel diffusing into it. Raising the threshold never
    increases the output size, and coords stay unique.
    """
    if k < 1 or k % 2 == 0:
        raise ContractError(f"diffusion kernel must be odd and >= 1, got {k}")
    n = len(vset)
    probs = out.probs.data
    sources = np.flatnonzero(probs > threshold)
    if len(sources) == 0 or k == 1:
        return vset

    half = k // 2
    offsets = [(dx, dy) for dx in range(-half, half + 1)
               for dy in range(-half, half + 1) if (dx, dy) != (0, 0)]
    existing = set(hash_coords(vset.coords).tolist())

    src_coords = vset.coords[sources]
    cand_coords = []
    cand_src = []
    for dx, dy in offsets:
        shifted = src_coords + np.array([dx, dy, 0], dtype=np.int64)
        cand_coords.append(shifted)
        cand_src.append(sources)
    cand_coords = np.concatenate(cand_coords, axis=0)
    cand_src = np.concatenate(cand_src, axis=0)

    ok = vset.grid.in_range(cand_coords)
    keys = np.full(len(cand_coords), -1, dtype=np.int64)
    keys[ok] = hash_coords(cand_coords[ok])
    fresh = ok & ~np.isin(keys, list(existing))
    if not fresh.any():
        return vset
    cand_coords, cand_src, keys = cand_coords[fresh], cand_src[fresh], keys[fresh]

    new_keys, slot_of = np.unique(keys, return_inverse=True)
    first = np.full(len(new_keys), len(keys), dtype=np.int64)
    np.minimum.at(first, slot_of, np.arange(len(keys)))
    new_coords = cand_coords[first]
    counts = np.bincount(slot_of, minlength=len(new_keys)).astype(np.float64)

    feats = vset.features if isinstance(vset.features, Tensor) else Tensor(vset.features)
    contrib = gather_rows(feats, cand_src)
    summed = scatter_add_rows(contrib, slot_of, len(new_keys))
    new_feats = mul(summed, 1.0 / counts[:, None])

    return SparseVoxelSet(np.concatenate([vset.coords, new_coords], axis=0),
                          concat([feats, new_feats], axis=0), vset.grid)
