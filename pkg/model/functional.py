"""Elementwise kernels, LayerNorm and segment softmax with their derivatives."""

from typing import Tuple

import numpy as np

LAYER_NORM_EPS = 1e-5


def sigmoid(z: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def elu(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))


def elu_grad(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, 1.0, np.exp(np.minimum(z, 0.0)))


def leaky_relu(z: np.ndarray, slope: float) -> np.ndarray:
    return np.where(z > 0, z, slope * z)


def leaky_relu_grad(z: np.ndarray, slope: float) -> np.ndarray:
    return np.where(z > 0, 1.0, slope)


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray,
               eps: float = LAYER_NORM_EPS) -> Tuple[np.ndarray, Tuple[np.ndarray, np.ndarray]]:
    """Normalize the last axis. Returns (output, (x_hat, inv_std))."""
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mean) * inv_std
    return x_hat * gain + bias, (x_hat, inv_std)


def layer_norm_backward(dy: np.ndarray, gain: np.ndarray,
                        cache: Tuple[np.ndarray, np.ndarray]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (dx, dgain, dbias)."""
    x_hat, inv_std = cache
    dgain = np.sum(dy * x_hat, axis=0)
    dbias = np.sum(dy, axis=0)
    dx_hat = dy * gain
    dx = inv_std * (dx_hat
                    - dx_hat.mean(axis=-1, keepdims=True)
                    - x_hat * (dx_hat * x_hat).mean(axis=-1, keepdims=True))
    return dx, dgain, dbias


def segment_softmax(scores: np.ndarray, segments: np.ndarray, num_segments: int) -> np.ndarray:
    """
    Softmax of `scores` (E, K) within groups of rows sharing a segment id.

    Every segment referenced must be non-empty; rows of one segment sum to 1 per column.
    """
    peak = np.full((num_segments,) + scores.shape[1:], -np.inf)
    np.maximum.at(peak, segments, scores)
    ex = np.exp(scores - peak[segments])
    denom = np.zeros_like(peak)
    np.add.at(denom, segments, ex)
    return ex / denom[segments]


def segment_softmax_backward(d_alpha: np.ndarray, alpha: np.ndarray, segments: np.ndarray,
                             num_segments: int) -> np.ndarray:
    weighted = np.zeros((num_segments,) + alpha.shape[1:])
    np.add.at(weighted, segments, alpha * d_alpha)
    return alpha * (d_alpha - weighted[segments])


def segment_sum(values: np.ndarray, segments: np.ndarray, num_segments: int) -> np.ndarray:
    out = np.zeros((num_segments,) + values.shape[1:])
    np.add.at(out, segments, values)
    return out
