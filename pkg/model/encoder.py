"""
Single-layer bidirectional LSTM encoder.

Each direction's weight matrix acts on [x_t ; h_{t-1}] and stacks the gates in the
order input, forget, output, candidate.
"""

from typing import List, Tuple

import numpy as np

from core.errors import ModelInputError
from model.functional import sigmoid
from model.params import Grads, ParamStore, glorot_uniform

_Step = Tuple[np.ndarray, ...]


def _lstm_forward(W: np.ndarray, b: np.ndarray, xs: np.ndarray) -> Tuple[np.ndarray, List[_Step]]:
    """Run one direction over xs (T, N, D) in the given order; returns the final hidden state."""
    H = b.size // 4
    N = xs.shape[1]
    h = np.zeros((N, H))
    c = np.zeros((N, H))
    steps: List[_Step] = []
    for x_t in xs:
        hin = np.concatenate([x_t, h], axis=1)
        z = hin @ W.T + b
        i = sigmoid(z[:, :H])
        f = sigmoid(z[:, H:2 * H])
        o = sigmoid(z[:, 2 * H:3 * H])
        g = np.tanh(z[:, 3 * H:])
        c_prev = c
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        steps.append((hin, i, f, o, g, c_prev, tc))
    return h, steps


def _lstm_backward(W: np.ndarray, dh: np.ndarray, steps: List[_Step], input_dim: int) -> Tuple[np.ndarray, np.ndarray]:
    """Backpropagate a gradient on the final hidden state through time. Returns (dW, db)."""
    dW = np.zeros_like(W)
    db = np.zeros(W.shape[0])
    dc = np.zeros_like(dh)
    for hin, i, f, o, g, c_prev, tc in reversed(steps):
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc ** 2)
        di = dc * g
        dg = dc * i
        df = dc * c_prev
        dc = dc * f
        dz = np.concatenate([di * i * (1.0 - i), df * f * (1.0 - f), do * o * (1.0 - o), dg * (1.0 - g ** 2)], axis=1)
        dW += dz.T @ hin
        db += dz.sum(axis=0)
        dh = (dz @ W)[:, input_dim:]
    return dW, db


class BiLSTMEncoder:
    """Encodes (N, T, input_dim) node histories into (N, embed_dim) embeddings."""

    def __init__(self, input_dim: int, hidden: int, embed_dim: int, prefix: str = "encoder"):
        self.input_dim = input_dim
        self.hidden = hidden
        self.embed_dim = embed_dim
        self.prefix = prefix

    def init_params(self, store: ParamStore, rng: np.random.Generator) -> None:
        H, D = self.hidden, self.input_dim
        for direction in ("fwd", "bwd"):
            store.add(f"{self.prefix}.{direction}.W", glorot_uniform(rng, (4 * H, D + H)))
            store.add(f"{self.prefix}.{direction}.b", np.zeros(4 * H))
        store.add(f"{self.prefix}.proj.W", glorot_uniform(rng, (self.embed_dim, 2 * H)))
        store.add(f"{self.prefix}.proj.b", np.zeros(self.embed_dim))

    def forward(self, store: ParamStore, histories: np.ndarray):
        if histories.ndim != 3 or histories.shape[2] != self.input_dim:
            raise ModelInputError(f"encoder expects (N, T, {self.input_dim}) input, got {histories.shape}")
        if not np.all(np.isfinite(histories)):
            raise ModelInputError("non-finite value in encoder input")

        xs = np.transpose(histories, (1, 0, 2))
        p = self.prefix
        h_fwd, steps_fwd = _lstm_forward(store[f"{p}.fwd.W"], store[f"{p}.fwd.b"], xs)
        h_bwd, steps_bwd = _lstm_forward(store[f"{p}.bwd.W"], store[f"{p}.bwd.b"], xs[::-1])
        joined = np.concatenate([h_fwd, h_bwd], axis=1)
        out = joined @ store[f"{p}.proj.W"].T + store[f"{p}.proj.b"]
        return out, (joined, steps_fwd, steps_bwd)

    def backward(self, store: ParamStore, d_out: np.ndarray, cache, grads: Grads) -> None:
        joined, steps_fwd, steps_bwd = cache
        p = self.prefix
        grads[f"{p}.proj.W"] += d_out.T @ joined
        grads[f"{p}.proj.b"] += d_out.sum(axis=0)
        d_joined = d_out @ store[f"{p}.proj.W"]
        H = self.hidden
        for direction, steps, dh in (("fwd", steps_fwd, d_joined[:, :H]), ("bwd", steps_bwd, d_joined[:, H:])):
            dW, db = _lstm_backward(store[f"{p}.{direction}.W"], dh, steps, self.input_dim)
            grads[f"{p}.{direction}.W"] += dW
            grads[f"{p}.{direction}.b"] += db


def bilstm_encode(history: np.ndarray, store: ParamStore, encoder: BiLSTMEncoder) -> np.ndarray:
    """Encode a single (T, input_dim) history into an embed_dim vector."""
    out, _ = encoder.forward(store, np.asarray(history, dtype=np.float64)[None])
    return out[0]
