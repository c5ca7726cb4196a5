"""
Training losses: bivariate Gaussian NLL, auxiliary ADE and the optional TTC hinge.

Vectorized variants return the per-element values together with their gradients
so that the trainer can scale and reduce them per micro-batch.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Tuple

import numpy as np

from core.errors import ModelInputError
from core.trajectory import FREQUENCY_HZ
from graph.scene_graph import compute_ttc

LOG_2PI = math.log(2.0 * math.pi)
RHO_FLOOR = 1e-6
DT = 1.0 / FREQUENCY_HZ


def gaussian_nll(channels: np.ndarray, targets: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-step NLL and its gradient w.r.t. the decoder channels.

    Args:
        channels: (..., 5) of (mu_x, mu_y, log_sigma_x, log_sigma_y, rho_raw)
        targets: (..., 2) displacement targets

    Returns:
        (values (...), gradient (..., 5))
    """
    mu_x, mu_y = channels[..., 0], channels[..., 1]
    ls_x, ls_y = channels[..., 2], channels[..., 3]
    rho = np.tanh(channels[..., 4])
    sx, sy = np.exp(ls_x), np.exp(ls_y)
    dx = targets[..., 0] - mu_x
    dy = targets[..., 1] - mu_y

    raw_om = 1.0 - rho ** 2
    floored = raw_om < RHO_FLOOR
    om = np.maximum(raw_om, RHO_FLOOR)
    sxy = sx * sy
    z = dx ** 2 / sx ** 2 + dy ** 2 / sy ** 2 - 2.0 * rho * dx * dy / sxy
    values = z / (2.0 * om) + ls_x + ls_y + 0.5 * np.log(om) + LOG_2PI

    grad = np.empty_like(channels, dtype=np.float64)
    grad[..., 0] = -(dx / sx ** 2 - rho * dy / sxy) / om
    grad[..., 1] = -(dy / sy ** 2 - rho * dx / sxy) / om
    grad[..., 2] = (-dx ** 2 / sx ** 2 + rho * dx * dy / sxy) / om + 1.0
    grad[..., 3] = (-dy ** 2 / sy ** 2 + rho * dx * dy / sxy) / om + 1.0
    d_rho = -dx * dy / (sxy * om)
    d_rho = np.where(floored, d_rho, d_rho + z * rho / om ** 2 - rho / om)
    grad[..., 4] = d_rho * (1.0 - rho ** 2)
    return values, grad


def nll_loss(row, target) -> float:
    """
    Bivariate Gaussian NLL of one prediction row.

    Args:
        row: (mu_x, mu_y, sigma_x, sigma_y, rho) with sigma > 0 and |rho| < 1
        target: (dx, dy)
    """
    row = np.asarray(row, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if not (np.all(np.isfinite(row)) and np.all(np.isfinite(target))):
        raise ModelInputError("non-finite value in NLL input")
    if row[2] <= 0 or row[3] <= 0 or abs(row[4]) >= 1:
        raise ModelInputError(f"invalid Gaussian parameters sigma=({row[2]}, {row[3]}) rho={row[4]}")
    channels = np.array([row[0], row[1], math.log(row[2]), math.log(row[3]), math.atanh(row[4])])
    values, _ = gaussian_nll(channels, target)
    return float(values)


def displacement_norms(means: np.ndarray, targets: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-step L2 error (...) and its gradient w.r.t. the means (..., 2); zero gradient at zero error."""
    err = means - targets
    norms = np.sqrt(np.sum(err ** 2, axis=-1))
    safe = np.where(norms > 0, norms, 1.0)
    grad = np.where((norms > 0)[..., None], err / safe[..., None], 0.0)
    return norms, grad


def ade_aux(means, targets) -> float:
    """Mean over steps of the L2 distance between predicted means and targets."""
    means = np.asarray(means, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if means.shape != targets.shape:
        raise ValueError(f"shape mismatch {means.shape} vs {targets.shape}")
    norms, _ = displacement_norms(means, targets)
    return float(norms.mean())


def ttc_hinge_terms(x_abs: np.ndarray, src: np.ndarray, dst: np.ndarray, threshold: float = 3.0):
    """
    Hinge max(0, threshold - TTC) / threshold for every pair and predicted step.

    Args:
        x_abs: (N, T + 1) absolute longitudinal positions, anchor in column 0
        src, dst: (P,) rows of the neighbour j and the subject i of each pair

    Returns:
        (hinge (P, T), backward) where backward(weights (P, T)) gives the
        gradient w.r.t. x_abs[:, 1:]
    """
    v = np.diff(x_abs, axis=1) / DT
    gap = x_abs[src, 1:] - x_abs[dst, 1:]
    closure = v[dst] - v[src]
    ttc = compute_ttc(gap, closure)
    active = (gap > 0) & (closure > 0) & (ttc < threshold)
    hinge = np.where(active, (threshold - ttc) / threshold, 0.0)

    def backward(weights: np.ndarray) -> np.ndarray:
        safe = np.where(active, closure, 1.0)
        d_ttc = np.where(active, -weights / threshold, 0.0)
        d_gap = d_ttc / safe
        d_closure = -d_ttc * gap / safe ** 2
        d_x = np.zeros_like(x_abs)
        np.add.at(d_x[:, 1:], src, d_gap)
        np.add.at(d_x[:, 1:], dst, -d_gap)
        d_v = np.zeros_like(v)
        np.add.at(d_v, dst, d_closure)
        np.add.at(d_v, src, -d_closure)
        d_x[:, 1:] += d_v / DT
        d_x[:, :-1] -= d_v / DT
        return d_x[:, 1:]

    return hinge, backward


def ttc_penalty(positions: np.ndarray, anchors: np.ndarray, edge_src, edge_dst, threshold: float = 3.0) -> float:
    """
    Mean hinge over neighbour pairs and predicted steps.

    Args:
        positions: (N, T, 2) predicted absolute positions
        anchors: (N, 2) anchor positions (step 0 for finite-difference speeds)
        edge_src, edge_dst: pairs j -> i
    """
    src = np.asarray(edge_src, dtype=np.int64)
    dst = np.asarray(edge_dst, dtype=np.int64)
    if src.size == 0:
        return 0.0
    x_abs = np.concatenate([np.asarray(anchors)[:, :1], np.asarray(positions)[:, :, 0]], axis=1)
    hinge, _ = ttc_hinge_terms(x_abs, src, dst, threshold)
    return float(hinge.mean())


@dataclass
class LossBreakdown:
    """Per-horizon components and their weighted combination."""

    nll: Dict[str, float] = field(default_factory=dict)
    ade: Dict[str, float] = field(default_factory=dict)
    ttc_penalty: float = 0.0
    ade_weight: float = 0.5
    ttc_weight: float = 0.0

    @property
    def combined(self) -> float:
        return combine(self.nll, self.ade, self.ttc_penalty, self.ade_weight, self.ttc_weight)

    def __add__(self, other: "LossBreakdown") -> "LossBreakdown":
        keys = list(dict.fromkeys(list(self.nll) + list(other.nll)))
        return LossBreakdown(
            nll={h: self.nll.get(h, 0.0) + other.nll.get(h, 0.0) for h in keys},
            ade={h: self.ade.get(h, 0.0) + other.ade.get(h, 0.0) for h in keys},
            ttc_penalty=self.ttc_penalty + other.ttc_penalty,
            ade_weight=self.ade_weight,
            ttc_weight=self.ttc_weight,
        )


def combine(nll: Mapping[str, float], ade: Mapping[str, float], ttc: float = 0.0,
            ade_weight: float = 0.5, ttc_weight: float = 0.0) -> float:
    """mean over horizons of (nll_H + ade_weight * ade_H) + ttc_weight * ttc."""
    if not nll:
        return 0.0
    total = sum(nll[h] + ade_weight * ade[h] for h in nll) / len(nll)
    return float(total + (ttc_weight * ttc if ttc_weight else 0.0))
