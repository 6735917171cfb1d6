"""Sparse voxel detection head: targets, losses, decoding, NMS, and BEV AP.

Classification and regression run directly on per-voxel features. Target
assignment is center-based and single-positive: each ground-truth box
claims the nearest occupied voxel within a radius (measured in voxel
units). Regression channels are (center offset in voxel units, log
extents, sin yaw, cos yaw), eight in total.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .autodiff import (
    Tensor,
    absolute,
    affine,
    clamp,
    gather_rows,
    mul,
    reduce_mean,
    reduce_sum,
    sigmoid,
    silu,
    sub,
)
from .boxes import Box3D, bev_iou
from .errors import ContractError
from .optim import ParamStore
from .segmentation import PROB_CLAMP, binary_focal_loss
from .voxelgrid import SparseVoxelSet

REG_CHANNELS = 8


@dataclass
class DetOutput:
    class_logits: Tensor  # [N, C]
    regression: Tensor    # [N, 8]

    def class_scores(self) -> Tensor:
        return clamp(sigmoid(self.class_logits), PROB_CLAMP, 1.0 - PROB_CLAMP)


@dataclass
class Targets:
    class_target: np.ndarray  # [N, C] one-hot heatmap, single positive per box
    reg_target: np.ndarray    # [N, 8]
    positive: np.ndarray      # [N] bool
    dropped: int              # boxes with no claimable voxel in radius


class ScoredBox(NamedTuple):
    box: Box3D
    score: float


def init_head_params(store: ParamStore, d: int, num_classes: int,
                     rng: np.random.Generator, prefix: str = "head.",
                     prior: float = 0.01) -> None:
    s = 1.0 / math.sqrt(d)
    store.add(prefix + "w1", rng.normal(0.0, s, (d, d)))
    store.add(prefix + "b1", np.zeros(d))
    store.add(prefix + "w2", rng.normal(0.0, s, (d, d)))
    store.add(prefix + "b2", np.zeros(d))
    store.add(prefix + "cls.w", rng.normal(0.0, s, (d, num_classes)))
    store.add(prefix + "cls.b",
              np.full(num_classes, math.log(prior / (1.0 - prior))))
    store.add(prefix + "reg.w", rng.normal(0.0, s, (d, REG_CHANNELS)))
    store.add(prefix + "reg.b", np.zeros(REG_CHANNELS))


def head_forward(features: Tensor, p: Mapping[str, Tensor],
                 prefix: str = "head.") -> DetOutput:
    """Shared two-affine trunk, then separate class and regression branches."""
    h = silu(affine(features, p[prefix + "w1"], p[prefix + "b1"]))
    h = silu(affine(h, p[prefix + "w2"], p[prefix + "b2"]))
    return DetOutput(
        class_logits=affine(h, p[prefix + "cls.w"], p[prefix + "cls.b"]),
        regression=affine(h, p[prefix + "reg.w"], p[prefix + "reg.b"]),
    )


def encode_box(box: Box3D, voxel_center: np.ndarray,
               voxel_size: np.ndarray) -> np.ndarray:
    offset = (box.center - voxel_center) / voxel_size
    return np.array([*offset,
                     math.log(box.length), math.log(box.width), math.log(box.height),
                     math.sin(box.yaw), math.cos(box.yaw)])


def decode_box(reg: np.ndarray, voxel_center: np.ndarray,
               voxel_size: np.ndarray, cls: int) -> Box3D:
    center = voxel_center + reg[:3] * voxel_size
    return Box3D(center[0], center[1], center[2],
                 math.exp(reg[3]), math.exp(reg[4]), math.exp(reg[5]),
                 math.atan2(reg[6], reg[7]), cls)


def assign_targets(vset: SparseVoxelSet, boxes: Sequence[Box3D],
                   num_classes: int, radius: float = 2.0) -> Targets:
    """One positive voxel per box: the nearest occupied voxel within radius.

    Distances are Euclidean in voxel-index units. A box whose nearest
    in-radius voxel is already claimed (or that has none) is dropped and
    counted.
    """
    n = len(vset)
    class_target = np.zeros((n, num_classes))
    reg_target = np.zeros((n, REG_CHANNELS))
    positive = np.zeros(n, dtype=bool)
    dropped = 0
    if n == 0:
        return Targets(class_target, reg_target, positive, len(list(boxes)))
    centers = vset.grid.centers_of(vset.coords)
    sizes = vset.grid.sizes
    for box in boxes:
        if box.cls >= num_classes:
            raise ContractError(f"class id {box.cls} out of range")
        d = np.linalg.norm((centers - box.center) / sizes, axis=1)
        idx = int(np.argmin(d))
        if d[idx] > radius or positive[idx]:
            dropped += 1
            continue
        positive[idx] = True
        class_target[idx, box.cls] = 1.0
        reg_target[idx] = encode_box(box, centers[idx], sizes)
    return Targets(class_target, reg_target, positive, dropped)


def det_losses(out: DetOutput, targets: Targets,
               alpha: float = 0.25, gamma: float = 2.0) -> tuple[Tensor, Tensor]:
    """Focal heatmap loss (normalized by positives) and L1 regression loss."""
    if targets.class_target.shape != out.class_logits.data.shape:
        raise ContractError("targets not aligned with head output")
    scores = out.class_scores()
    focal = binary_focal_loss(scores, targets.class_target, alpha, gamma)
    num_pos = int(targets.positive.sum())
    l_cls = mul(reduce_sum(focal), 1.0 / max(1, num_pos))
    if num_pos == 0:
        return l_cls, Tensor(0.0)
    pos_idx = np.flatnonzero(targets.positive)
    pred = gather_rows(out.regression, pos_idx)
    l_reg = reduce_mean(absolute(sub(pred, targets.reg_target[pos_idx])))
    return l_cls, l_reg


def decode_and_nms(out: DetOutput, vset: SparseVoxelSet,
                   score_threshold: float, iou_threshold: float) -> list[ScoredBox]:
    """Thresholded per-voxel decode followed by greedy per-class BEV NMS."""
    if not (0.0 <= score_threshold <= 1.0 and 0.0 <= iou_threshold <= 1.0):
        raise ContractError("thresholds must lie in [0, 1]")
    if len(vset) == 0:
        return []
    scores = 1.0 / (1.0 + np.exp(-out.class_logits.data))
    best_cls = scores.argmax(axis=1)
    best_score = scores[np.arange(len(scores)), best_cls]
    keep = np.flatnonzero(best_score > score_threshold)
    centers = vset.grid.centers_of(vset.coords)
    sizes = vset.grid.sizes
    candidates = [ScoredBox(decode_box(out.regression.data[i], centers[i], sizes,
                                       int(best_cls[i])), float(best_score[i]))
                  for i in keep]
    return nms_bev(candidates, iou_threshold)


def nms_bev(candidates: Sequence[ScoredBox], iou_threshold: float) -> list[ScoredBox]:
    """Greedy suppression per class, descending score. Ties break on index."""
    order = sorted(range(len(candidates)),
                   key=lambda i: (-candidates[i].score, i))
    kept: list[ScoredBox] = []
    for i in order:
        cand = candidates[i]
        if any(k.box.cls == cand.box.cls
               and bev_iou(k.box, cand.box) > iou_threshold for k in kept):
            continue
        kept.append(cand)
    return kept


def eval_bev_ap(predictions: Sequence[Sequence[ScoredBox]],
                gts: Sequence[Sequence[Box3D]],
                iou_threshold: float) -> tuple[dict[int, float], float]:
    """11-point interpolated AP per class over score-ranked matches.

    Returns (per-class AP for classes with ground truth, mean over them).
    """
    classes = sorted({b.cls for scene in gts for b in scene})
    per_class: dict[int, float] = {}
    for cls in classes:
        entries = []
        for scene_idx, scene in enumerate(predictions):
            for box_idx, sb in enumerate(scene):
                if sb.box.cls == cls:
                    entries.append((-sb.score, scene_idx, box_idx, sb.box))
        entries.sort(key=lambda e: e[:3])
        gt_boxes = {i: [b for b in scene if b.cls == cls]
                    for i, scene in enumerate(gts)}
        total_gt = sum(len(v) for v in gt_boxes.values())
        matched = {i: np.zeros(len(v), dtype=bool) for i, v in gt_boxes.items()}
        tp = np.zeros(len(entries))
        fp = np.zeros(len(entries))
        for rank, (_, scene_idx, _, box) in enumerate(entries):
            best_iou, best_j = 0.0, -1
            for j, gt in enumerate(gt_boxes.get(scene_idx, [])):
                if matched[scene_idx][j]:
                    continue
                iou = bev_iou(box, gt)
                if iou >= iou_threshold and iou > best_iou:
                    best_iou, best_j = iou, j
            if best_j >= 0:
                matched[scene_idx][best_j] = True
                tp[rank] = 1.0
            else:
                fp[rank] = 1.0
        if total_gt == 0:
            continue
        cum_tp = np.cumsum(tp)
        cum_fp = np.cumsum(fp)
        recall = cum_tp / total_gt
        precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)
        ap = 0.0
        for r in np.linspace(0.0, 1.0, 11):
            mask = recall >= r - 1e-12
            ap += float(precision[mask].max()) if mask.any() else 0.0
        per_class[cls] = ap / 11.0
    mean_ap = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return per_class, mean_ap


# -- JSON lines serialization: one scene per line, boxes as 8 geometric ------
# -- values (cx, cy, cz, l, w, h, sin yaw, cos yaw) plus class and score -----

def save_boxes_jsonl(path: str | Path,
                     scenes: Sequence[Sequence[ScoredBox]]) -> None:
    with open(path, "w") as f:
        for i, scene in enumerate(scenes):
            boxes = [[b.box.cx, b.box.cy, b.box.cz,
                      b.box.length, b.box.width, b.box.height,
                      math.sin(b.box.yaw), math.cos(b.box.yaw),
                      int(b.box.cls), b.score] for b in scene]
            f.write(json.dumps({"scene": i, "boxes": boxes}, sort_keys=True) + "\n")


def load_boxes_jsonl(path: str | Path) -> list[list[ScoredBox]]:
    scenes: list[list[ScoredBox]] = []
    with open(path) as f:
        for line in f:
            rec = json.loads(line)
            if rec["scene"] != len(scenes):
                raise ContractError("scene lines out of order")
            scene = []
            for vals in rec["boxes"]:
                cx, cy, cz, l, w, h, sy, cy_, cls, score = vals
                scene.append(ScoredBox(
                    Box3D(cx, cy, cz, l, w, h, math.atan2(sy, cy_), int(cls)),
                    float(score)))
            scenes.append(scene)
    return scenes
