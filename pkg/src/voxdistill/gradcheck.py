"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape, Tensor, backward


def finite_difference_grads(
    fn: Callable[..., float],
    inputs: Sequence[np.ndarray],
    h: float = 1e-5,
) -> list[np.ndarray]:
    """Central differences of a scalar function of several arrays."""
    grads = []
    for k, base in enumerate(inputs):
        base = np.asarray(base, dtype=np.float64)
        g = np.zeros_like(base)
        flat = base.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(*inputs)
            flat[i] = orig - h
            fm = fn(*inputs)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray,
                       floor: float = 1e-3) -> float:
    """Elementwise |a - n| / max(|a|, |n|, floor), reduced with max.

    The floor turns the metric into an absolute tolerance for near-zero
    gradients, where relative error is meaningless.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    err = np.abs(a - n) / denom
    return float(err.max()) if err.size else 0.0


def check_gradients(
    build: Callable[[Tape, Sequence[Tensor]], Tensor],
    inputs: Sequence[np.ndarray],
    h: float = 1e-5,
) -> float:
    """Compare tape gradients of a scalar graph against central differences.

    `build(tape, leaves)` must construct the graph from the given leaf
    tensors and return the scalar loss. Returns the worst relative error
    over all inputs.
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]

    tape = Tape()
    leaves = [tape.leaf(x) for x in inputs]
    loss = build(tape, leaves)
    grads = backward(tape, loss)
    analytic = [grads[leaf.node].data for leaf in leaves]

    def scalar_fn(*arrays):
        t = Tape()
        ls = [t.leaf(a) for a in arrays]
        return float(build(t, ls).data)

    numeric = finite_difference_grads(scalar_fn, inputs, h=h)
    return max(max_relative_error(a, n) for a, n in zip(analytic, numeric))
