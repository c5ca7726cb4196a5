"""Displacement metrics on reconstructed absolute positions."""

import numpy as np


def reconstruct_absolute(anchor, displacements) -> np.ndarray:
    """Add each predicted displacement (T, 2) to the last observed position (2,)."""
    displacements = np.asarray(displacements, dtype=np.float64)
    if displacements.size == 0:
        raise ValueError("empty displacement sequence")
    return np.asarray(anchor, dtype=np.float64) + displacements


def step_errors(pred, truth) -> np.ndarray:
    """Euclidean error per step; inputs are (..., T, 2)."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    return np.sqrt(np.sum((pred - truth) ** 2, axis=-1))


def ade(pred, truth) -> float:
    """Mean over vehicles and steps of the Euclidean error; (T, 2) or (V, T, 2) inputs."""
    return float(step_errors(pred, truth).mean())


def fde(pred, truth) -> float:
    """Mean over vehicles of the Euclidean error at the final step."""
    return float(np.mean(step_errors(pred, truth)[..., -1]))
