"""Named parameter tensors with gradient buffers and freeze flags."""

from collections import OrderedDict
from typing import Dict, Iterable, List, Optional

import numpy as np

Grads = Dict[str, np.ndarray]


def glorot_uniform(rng: np.random.Generator, shape, fan_in: Optional[int] = None,
                   fan_out: Optional[int] = None) -> np.ndarray:
    """Uniform(-l, l) with l = sqrt(6 / (fan_in + fan_out)); fans default to (shape[-1], shape[0])."""
    fan_in = shape[-1] if fan_in is None else fan_in
    fan_out = shape[0] if fan_out is None else fan_out
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class ParamStore:
    """
    Ordered collection of named float64 tensors.

    Gradients live in separate `Grads` dicts (one per worker) so that forward and
    backward passes can run concurrently against one parameter snapshot;
    `accumulate` is the single place where they meet the store.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = dtype
        self.values: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.grads: Grads = {}
        self.frozen: Dict[str, bool] = {}

    def add(self, name: str, value: np.ndarray, frozen: bool = False) -> np.ndarray:
        if name in self.values:
            raise KeyError(f"parameter '{name}' already registered")
        value = np.array(value, dtype=self.dtype)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)
        self.frozen[name] = frozen
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __len__(self) -> int:
        return len(self.values)

    def names(self) -> List[str]:
        return list(self.values)

    def trainable(self) -> List[str]:
        return [n for n in self.values if not self.frozen[n]]

    def freeze(self, prefix: str) -> List[str]:
        """Freeze every tensor whose name starts with prefix."""
        hit = [n for n in self.values if n.startswith(prefix)]
        for n in hit:
            self.frozen[n] = True
        return hit

    def unfreeze(self, prefix: str = "") -> None:
        for n in self.values:
            if n.startswith(prefix):
                self.frozen[n] = False

    def is_frozen(self, name: str) -> bool:
        return self.frozen[name]

    def count(self, trainable_only: bool = True) -> int:
        return int(sum(v.size for n, v in self.values.items() if not (trainable_only and self.frozen[n])))

    def zeros_like(self) -> Grads:
        """Fresh gradient buffers for one worker."""
        return {n: np.zeros_like(v) for n, v in self.values.items()}

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def accumulate(self, partials: Iterable[Grads]) -> None:
        """Add worker gradients into the store in the given order; frozen tensors stay zero."""
        for partial in partials:
            for name, g in partial.items():
                if not self.frozen[name]:
                    self.grads[name] += g

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(self.grads[n] ** 2)) for n in self.trainable())))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {n: v.copy() for n, v in self.values.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for name, value in state.items():
            if name not in self.values:
                raise KeyError(f"unknown parameter '{name}'")
            if self.values[name].shape != np.shape(value):
                raise ValueError(f"shape mismatch for '{name}': {self.values[name].shape} vs {np.shape(value)}")
            self.values[name][...] = value
