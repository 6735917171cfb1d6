"""Attention-based sequence encoder with learned receptive-field control.

Each layer is a pre-norm residual transformer block whose attention logits
carry a per-head, per-query penalty proportional to pairwise voxel distance.
The penalty weight gamma is produced from the query features and kept
non-negative through softplus, so growing gamma always shrinks the
receptive field toward the nearest keys.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from .autodiff import (
    Tensor,
    add,
    affine,
    layer_norm,
    mac_scope,
    matmul,
    mul,
    reshape,
    silu,
    softmax_lastdim,
    softplus,
    transpose,
)
from .errors import DegenerateRowError, DimensionError
from .grouping import DistanceMatrix, VoxelGroupBatch, pairwise_distances
from .optim import ParamStore

FFN_MULT = 4


@dataclass
class AttentionTrace:
    """Post-softmax weights [G, M, L, L] and gamma values [G, L, M]."""

    weights: np.ndarray
    gamma: np.ndarray


def init_pe_params(store: ParamStore, d: int, rng: np.random.Generator,
                   prefix: str = "pe.") -> None:
    store.add(prefix + "w1", rng.normal(0.0, 1.0 / math.sqrt(3), (3, d)))
    store.add(prefix + "b1", np.zeros(d))
    store.add(prefix + "w2", rng.normal(0.0, 1.0 / math.sqrt(d), (d, d)))
    store.add(prefix + "b2", np.zeros(d))


def init_layer_params(store: ParamStore, d: int, heads: int,
                      rng: np.random.Generator, prefix: str) -> None:
    if d % heads:
        raise DimensionError(f"width {d} not divisible by {heads} heads")
    s = 1.0 / math.sqrt(d)
    for name in ("wq", "wk", "wv"):
        store.add(prefix + name, rng.normal(0.0, s, (d, d)))
        store.add(prefix + "b" + name[1], np.zeros(d))
    store.add(prefix + "wg", rng.normal(0.0, s, (d, heads)))
    store.add(prefix + "bg", np.zeros(heads))
    store.add(prefix + "wo", rng.normal(0.0, s, (d, d)))
    store.add(prefix + "bo", np.zeros(d))
    store.add(prefix + "ln1.scale", np.ones(d))
    store.add(prefix + "ln1.bias", np.zeros(d))
    store.add(prefix + "ln2.scale", np.ones(d))
    store.add(prefix + "ln2.bias", np.zeros(d))
    store.add(prefix + "ffn.w1", rng.normal(0.0, s, (d, FFN_MULT * d)))
    store.add(prefix + "ffn.b1", np.zeros(FFN_MULT * d))
    store.add(prefix + "ffn.w2",
              rng.normal(0.0, 1.0 / math.sqrt(FFN_MULT * d), (FFN_MULT * d, d)))
    store.add(prefix + "ffn.b2", np.zeros(d))


def positional_embed(batch: VoxelGroupBatch, p: Mapping[str, Tensor]) -> Tensor:
    """Two-affine embedding of window-local coordinates, [G, L, D]."""
    window = batch.window
    local = batch.local_coords().astype(np.float64)
    if window > 1:
        local = (local + 0.5) / window * 2.0 - 1.0
    else:
        local = np.zeros_like(local)
    hidden = silu(affine(Tensor(local), p["pe.w1"], p["pe.b1"]))
    return affine(hidden, p["pe.w2"], p["pe.b2"])


def split_heads(x: Tensor, heads: int) -> Tensor:
    g, l, d = x.data.shape
    return transpose(reshape(x, (g, l, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    g, m, l, dh = x.data.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (g, l, m * dh))


def qkv_project(f: Tensor, pe: Tensor, p: Mapping[str, Tensor],
                heads: int) -> tuple[Tensor, Tensor, Tensor]:
    """Q and K see the positional embedding; V never does."""
    f_pe = add(f, pe)
    with mac_scope("q_proj"):
        q = affine(f_pe, p["wq"], p["bq"])
    with mac_scope("k_proj"):
        k = affine(f_pe, p["wk"], p["bk"])
    with mac_scope("v_proj"):
        v = affine(f, p["wv"], p["bv"])
    return split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)


def gamma_heads(q: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    """Per-head receptive-field controllers, softplus(Linear(Q)) >= 0.

    Accepts Q either head-split [G, M, L, dh] or flat [G, L, D].
    Returns [G, L, M].
    """
    if q.ndim == 4:
        q = merge_heads(q)
    return softplus(affine(q, p["wg"], p["bg"]))


def ada_attention(q: Tensor, k: Tensor, v: Tensor, distances: DistanceMatrix,
                  gamma: Tensor, mask: np.ndarray, p: Mapping[str, Tensor],
                  distance_bias_sign: float = -1.0,
                  want_trace: bool = False) -> tuple[Tensor, AttentionTrace | None]:
    """Distance-penalized multi-head attention.

    With the default sign the logit bias is -gamma * d: a larger gamma
    pushes weight off distant keys. The +1 sign reproduces the unmodified
    printed form for comparison runs.
    """
    g, m, l, dh = q.data.shape
    if not mask.any(axis=1).all():
        raise DegenerateRowError("attention group with no unmasked entries")
    with mac_scope("qk_scores"):
        scores = matmul(q, transpose(k, (0, 1, 3, 2)))
    scores = mul(scores, 1.0 / math.sqrt(dh))
    gamma_heads_first = reshape(transpose(gamma, (0, 2, 1)), (g, m, l, 1))
    bias = mul(gamma_heads_first, distances.values[:, None, :, :])
    logits = add(scores, mul(bias, float(distance_bias_sign)))
    key_mask = np.broadcast_to(mask[:, None, None, :], (g, m, l, l))
    weights = softmax_lastdim(logits, key_mask)
    with mac_scope("attn_values"):
        ctx = matmul(weights, v)
    with mac_scope("out_proj"):
        out = affine(merge_heads(ctx), p["wo"], p["bo"])
    trace = AttentionTrace(weights.data.copy(), gamma.data.copy()) if want_trace else None
    return out, trace


def teacher_layer_forward(batch: VoxelGroupBatch, p: Mapping[str, Tensor],
                          pe: Tensor, heads: int,
                          distance_bias_sign: float = -1.0) -> VoxelGroupBatch:
    """Pre-norm residual block: x + AdaAttn(norm(x)), then x + FFN(norm(x)).

    Masked slots are re-zeroed on the way out.
    """
    x = batch.sequences
    h = layer_norm(x, p["ln1.scale"], p["ln1.bias"])
    q, k, v = qkv_project(h, pe, p, heads)
    gamma = gamma_heads(q, p)
    attn, _ = ada_attention(q, k, v, pairwise_distances(batch), gamma,
                            batch.mask, p, distance_bias_sign)
    x = add(x, attn)
    h2 = layer_norm(x, p["ln2.scale"], p["ln2.bias"])
    ff = affine(silu(affine(h2, p["ffn.w1"], p["ffn.b1"])),
                p["ffn.w2"], p["ffn.b2"])
    x = mul(add(x, ff), batch.mask_f)
    return replace(batch, sequences=x)
