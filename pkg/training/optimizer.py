"""AdamW with global-norm clipping and a reduce-on-plateau learning-rate schedule."""

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from model.params import ParamStore


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    """Scale trainable gradients in place so their global L2 norm is at most max_norm. Returns the pre-clip norm."""
    norm = store.grad_norm()
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for name in store.trainable():
            store.grads[name] *= scale
    return norm


@dataclass
class OptimizerState:
    lr: float
    weight_decay: float = 1e-4
    clip_norm: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


class AdamW:
    """Decoupled weight decay Adam over the trainable tensors of a ParamStore."""

    def __init__(self, store: ParamStore, lr: float, weight_decay: float = 1e-4, clip_norm: float = 5.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.store = store
        self.state = OptimizerState(lr=lr, weight_decay=weight_decay, clip_norm=clip_norm,
                                    beta1=betas[0], beta2=betas[1], eps=eps)
        for name, value in store.values.items():
            self.state.m[name] = np.zeros_like(value)
            self.state.v[name] = np.zeros_like(value)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def step(self) -> float:
        """Clip, then update every non-frozen tensor from store.grads. Returns the pre-clip gradient norm."""
        s = self.state
        norm = clip_grad_norm(self.store, s.clip_norm)
        s.step += 1
        bias1 = 1.0 - s.beta1 ** s.step
        bias2 = 1.0 - s.beta2 ** s.step
        for name in self.store.trainable():
            p = self.store.values[name]
            g = self.store.grads[name]
            m, v = s.m[name], s.v[name]
            m *= s.beta1
            m += (1.0 - s.beta1) * g
            v *= s.beta2
            v += (1.0 - s.beta2) * g * g
            if s.weight_decay:
                p *= 1.0 - s.lr * s.weight_decay
            p -= s.lr * (m / bias1) / (np.sqrt(v / bias2) + s.eps)
        return norm


def adamw_step(optimizer: AdamW) -> OptimizerState:
    """Apply one update using the gradients currently held by the store."""
    optimizer.step()
    return optimizer.state


class PlateauScheduler:
    """
    Multiply the learning rate by `factor` once validation loss has failed to
    strictly improve for `patience` consecutive epochs. The bad-epoch counter
    resets on improvement and after every reduction.
    """

    def __init__(self, optimizer: AdamW, patience: int = 3, factor: float = 0.5):
        self.optimizer = optimizer
        self.patience = patience
        self.factor = factor
        self.best: Optional[float] = None
        self.bad_epochs = 0
        self.reductions: List[int] = []
        self._epoch = 0

    def step(self, val_loss: float) -> float:
        self._epoch += 1
        if self.best is None or val_loss < self.best:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.optimizer.lr *= self.factor
                self.bad_epochs = 0
                self.reductions.append(self._epoch)
        return self.optimizer.lr


def plateau_schedule(val_losses, lr: float, patience: int = 3, factor: float = 0.5) -> List[float]:
    """Learning rate in effect after each epoch of a validation-loss history."""
    holder = _LrHolder(lr)
    scheduler = PlateauScheduler(holder, patience, factor)
    return [scheduler.step(loss) for loss in val_losses]


class _LrHolder:
    def __init__(self, lr: float):
        self.lr = lr
