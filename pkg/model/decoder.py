"""Per-horizon Gaussian decoder heads."""

from dataclasses import dataclass
from typing import Dict

import numpy as np

from model.functional import elu, elu_grad
from model.params import Grads, ParamStore, glorot_uniform

LOG_SIGMA_CLIP = 10.0
CHANNELS = 5  # mu_x, mu_y, log_sigma_x, log_sigma_y, rho_raw


@dataclass(frozen=True, eq=False)
class GaussianPrediction:
    """(T_H, 2) means, positive scales and correlations in (-1, 1) for one vehicle and horizon."""

    mu: np.ndarray
    sigma: np.ndarray
    rho: np.ndarray

    @property
    def steps(self) -> int:
        return int(self.mu.shape[0])

    def rows(self) -> np.ndarray:
        """(T_H, 5) rows of (mu_x, mu_y, sigma_x, sigma_y, rho)."""
        return np.column_stack([self.mu, self.sigma, self.rho])


class GaussianDecoder:
    """MLP in_dim -> hidden (ELU) -> steps * 5 for one horizon."""

    def __init__(self, horizon: str, steps: int, in_dim: int, hidden: int):
        self.horizon = horizon
        self.steps = steps
        self.in_dim = in_dim
        self.hidden = hidden
        self.prefix = f"decoder.{horizon}"

    def init_params(self, store: ParamStore, rng: np.random.Generator) -> None:
        p = self.prefix
        store.add(f"{p}.W1", glorot_uniform(rng, (self.hidden, self.in_dim)))
        store.add(f"{p}.b1", np.zeros(self.hidden))
        store.add(f"{p}.W2", glorot_uniform(rng, (self.steps * CHANNELS, self.hidden)))
        store.add(f"{p}.b2", np.zeros(self.steps * CHANNELS))

    def forward(self, store: ParamStore, h: np.ndarray):
        """
        Args:
            h: (M, in_dim) final node embeddings

        Returns:
            ((M, T_H, 5) raw channels with log-sigma clipped, cache)
        """
        p = self.prefix
        z1 = h @ store[f"{p}.W1"].T + store[f"{p}.b1"]
        a1 = elu(z1)
        raw = (a1 @ store[f"{p}.W2"].T + store[f"{p}.b2"]).reshape(-1, self.steps, CHANNELS)
        out = raw.copy()
        out[:, :, 2:4] = np.clip(raw[:, :, 2:4], -LOG_SIGMA_CLIP, LOG_SIGMA_CLIP)
        return out, (h, z1, a1, raw)

    def backward(self, store: ParamStore, d_out: np.ndarray, cache, grads: Grads) -> np.ndarray:
        """d_out is the gradient w.r.t. the clipped channels; returns the gradient w.r.t. h."""
        h, z1, a1, raw = cache
        p = self.prefix
        d_raw = d_out.copy()
        inside = np.abs(raw[:, :, 2:4]) <= LOG_SIGMA_CLIP
        d_raw[:, :, 2:4] *= inside
        d_raw = d_raw.reshape(-1, self.steps * CHANNELS)

        grads[f"{p}.W2"] += d_raw.T @ a1
        grads[f"{p}.b2"] += d_raw.sum(axis=0)
        d_z1 = (d_raw @ store[f"{p}.W2"]) * elu_grad(z1)
        grads[f"{p}.W1"] += d_z1.T @ h
        grads[f"{p}.b1"] += d_z1.sum(axis=0)
        return d_z1 @ store[f"{p}.W1"]


def to_prediction(channels: np.ndarray) -> GaussianPrediction:
    """Turn (T_H, 5) clipped raw channels into a GaussianPrediction."""
    return GaussianPrediction(
        mu=channels[:, 0:2].copy(),
        sigma=np.exp(channels[:, 2:4]),
        rho=np.tanh(channels[:, 4]),
    )


def decode(h_final: np.ndarray, horizon: str, store: ParamStore, decoders: Dict[str, GaussianDecoder]) -> GaussianPrediction:
    """Decode a single embedding for one horizon."""
    channels, _ = decoders[horizon].forward(store, np.asarray(h_final, dtype=np.float64)[None])
    return to_prediction(channels[0])
