"""Parameter storage and the AdamW update rule."""

from __future__ import annotations

import numpy as np

from .autodiff import Tape, Tensor
from .errors import ContractError


class ParamStore:
    """Named float64 parameter arrays with tape binding.

    Parameters are held as plain arrays between steps. `bind` wraps them as
    tape leaves for one forward/backward pass (or as constants when tape is
    None, i.e. frozen inference). Snapshots are plain dict copies.
    """

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> None:
        if name in self._values:
            raise ContractError(f"duplicate parameter name {name!r}")
        self._values[name] = np.array(value, dtype=np.float64)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __setitem__(self, name: str, value) -> None:
        self._values[name] = np.asarray(value, dtype=np.float64)

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def names(self) -> list[str]:
        return list(self._values)

    def items(self):
        return self._values.items()

    def num_scalars(self) -> int:
        return sum(v.size for v in self._values.values())

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, v in self._values.items():
            out.add(k, v.copy())
        return out

    def bind(self, tape: Tape | None) -> "BoundParams":
        return BoundParams(self, tape)

    def allclose(self, other: "ParamStore") -> bool:
        if self.names() != other.names():
            return False
        return all(np.array_equal(self._values[k], other._values[k])
                   for k in self._values)


class BoundParams:
    """One training step's view of a ParamStore as tensors."""

    def __init__(self, store: ParamStore, tape: Tape | None):
        self.store = store
        self.tensors: dict[str, Tensor] = {}
        self.node_ids: dict[str, int] = {}
        for name, value in store.items():
            if tape is None:
                self.tensors[name] = Tensor(value)
            else:
                t = tape.leaf(value)
                self.tensors[name] = t
                self.node_ids[name] = t.node

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def prefixed(self, prefix: str) -> dict[str, Tensor]:
        return {k[len(prefix):]: v for k, v in self.tensors.items()
                if k.startswith(prefix)}

    def collect_grads(self, grad_map: dict[int, Tensor]) -> dict[str, np.ndarray]:
        out = {}
        for name, nid in self.node_ids.items():
            out[name] = grad_map[nid].data
        return out


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, store: ParamStore, lr: float = 3e-3,
                 betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.store = store
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self._m = {k: np.zeros_like(v) for k, v in store.items()}
        self._v = {k: np.zeros_like(v) for k, v in store.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for name, _ in self.store.items():
            if name not in grads:
                raise ContractError(f"missing gradient for parameter {name!r}")
            if np.asarray(grads[name]).shape != self.store[name].shape:
                raise ContractError(
                    f"gradient shape {np.asarray(grads[name]).shape} does not match "
                    f"parameter {name!r} shape {self.store[name].shape}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.store.items():
            g = np.asarray(grads[name], dtype=np.float64)
            if self.weight_decay:
                p -= self.lr * self.weight_decay * p
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
