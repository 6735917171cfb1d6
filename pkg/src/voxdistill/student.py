"""Selective state-space sequence encoder.

The block follows the selective-scan recipe: the step size and the input
and output maps are functions of the (convolved) input stream, the
continuous system is discretized per step by zero-order hold, and a
sequential recurrence produces the outputs. The state matrix is diagonal
and strictly negative, so the recurrence is stable for any positive step.
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
    as_tensor,
    causal_conv1d,
    exp,
    expm1_over,
    mac_scope,
    matmul,
    mul,
    narrow,
    neg,
    reshape,
    selective_scan,
    silu,
    softplus,
)
from .errors import DomainError
from .grouping import VoxelGroupBatch
from .optim import ParamStore

__all__ = ["SsmConfig", "init_student_layer_params", "zoh_discretize",
           "selective_scan", "mamba_block_forward"]


@dataclass(frozen=True)
class SsmConfig:
    """Block hyperparameters; defaults are the mid-size variant."""

    width: int
    expand: int = 2
    state_size: int = 16
    d_conv: int = 4
    dt_rank: int | None = None

    @property
    def inner(self) -> int:
        return self.expand * self.width

    @property
    def rank(self) -> int:
        return self.dt_rank if self.dt_rank is not None else math.ceil(self.width / 16)


def init_student_layer_params(store: ParamStore, cfg: SsmConfig,
                              rng: np.random.Generator, prefix: str) -> None:
    d, inner, s, rank = cfg.width, cfg.inner, cfg.state_size, cfg.rank
    store.add(prefix + "w_in", rng.normal(0.0, 1.0 / math.sqrt(d), (d, 2 * inner)))
    store.add(prefix + "b_in", np.zeros(2 * inner))
    k = 1.0 / math.sqrt(cfg.d_conv)
    store.add(prefix + "conv.w", rng.uniform(-k, k, (inner, cfg.d_conv)))
    store.add(prefix + "conv.b", np.zeros(inner))
    store.add(prefix + "a_log", np.tile(np.log(np.arange(1, s + 1, dtype=np.float64)),
                                        (inner, 1)))
    store.add(prefix + "w_x", rng.normal(0.0, 1.0 / math.sqrt(inner),
                                         (inner, rank + 2 * s)))
    store.add(prefix + "w_dt", rng.normal(0.0, 1.0 / math.sqrt(rank), (rank, inner)))
    # bias chosen so initial step sizes land log-uniform in [1e-3, 0.1]
    dt = np.exp(rng.uniform(math.log(1e-3), math.log(0.1), inner))
    store.add(prefix + "b_dt", np.log(np.expm1(dt)))
    store.add(prefix + "w_out", rng.normal(0.0, 1.0 / math.sqrt(inner), (inner, d)))
    store.add(prefix + "b_out", np.zeros(d))


def zoh_discretize(a, b, delta) -> tuple[Tensor, Tensor]:
    """Zero-order hold: a_bar = exp(delta*a), b_bar = (exp(delta*a)-1)*delta*b/(delta*a).

    Inputs must be mutually broadcastable; delta must be strictly positive.
    When |delta*a| < 1e-8 the analytic limit b_bar = delta*b is used.
    """
    a, b, delta = as_tensor(a), as_tensor(b), as_tensor(delta)
    if np.any(delta.data <= 0.0):
        raise DomainError("zoh_discretize requires delta > 0")
    z = mul(delta, a)
    a_bar = exp(z)
    b_bar = mul(mul(delta, b), expm1_over(z))
    return a_bar, b_bar


def mamba_block_forward(batch: VoxelGroupBatch, p: Mapping[str, Tensor],
                        cfg: SsmConfig) -> VoxelGroupBatch:
    """One residual selective-SSM block over a grouped voxel batch.

    Masked slots contribute zero input (they sit at the tail of each
    sequence, after every real slot) and are re-zeroed on output.
    """
    x = batch.sequences
    g, l, d = x.data.shape
    inner, s, rank = cfg.inner, cfg.state_size, cfg.rank

    with mac_scope("in_proj"):
        u = affine(x, p["w_in"], p["b_in"])
    stream = narrow(u, 2, 0, inner)
    gate = narrow(u, 2, inner, inner)

    with mac_scope("conv"):
        conv = causal_conv1d(stream, p["conv.w"], p["conv.b"])
    stream = silu(conv)

    with mac_scope("x_proj"):
        xp = matmul(stream, p["w_x"])
    dt_low = narrow(xp, 2, 0, rank)
    b_seq = narrow(xp, 2, rank, s)
    c_seq = narrow(xp, 2, rank + s, s)

    with mac_scope("dt_proj"):
        dt_raw = affine(dt_low, p["w_dt"], p["b_dt"])
    delta = softplus(dt_raw)

    a = neg(exp(p["a_log"]))  # strictly negative, [inner, S]
    a_bar, b_bar = zoh_discretize(a, reshape(b_seq, (g, l, 1, s)),
                                  reshape(delta, (g, l, inner, 1)))

    with mac_scope("scan"):
        y = selective_scan(stream, a_bar, b_bar, c_seq)
    y = mul(y, silu(gate))

    with mac_scope("out_proj"):
        out = affine(y, p["w_out"], p["b_out"])
    return replace(batch, sequences=mul(add(x, out), batch.mask_f))
