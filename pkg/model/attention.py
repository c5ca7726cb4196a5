"""
Lane-biased multi-head graph attention.

The lane code r of an edge shifts its fifth feature by a trainable per-code scalar
(shared by all layers) before the edge is projected into the attention score.
Every node attends over its incoming edges plus a self-loop carrying zero edge
features and r = 0.
"""

from typing import Tuple

import numpy as np

from core.errors import ModelInputError
from model.functional import (elu, elu_grad, layer_norm, layer_norm_backward, leaky_relu,
                              leaky_relu_grad, segment_softmax, segment_softmax_backward, segment_sum)
from model.params import Grads, ParamStore, glorot_uniform

LANE_BIAS = "lane_bias"
NUM_LANE_CODES = 4
VARIANTS = ("gat", "gatv2")


def lane_codes(edge_attr: np.ndarray) -> np.ndarray:
    """Integer lane codes from the last edge column, validated to lie in {0, 1, 2, 3}."""
    raw = np.asarray(edge_attr)[..., 4]
    codes = np.rint(raw).astype(np.int64)
    bad = (codes != raw) | (codes < 0) | (codes >= NUM_LANE_CODES)
    if np.any(bad):
        raise ModelInputError(f"lane code outside {{0, 1, 2, 3}}: {raw[bad][:3]}")
    return codes


def apply_lane_bias(edge: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Copy of `edge` (5,) or (E, 5) with component 5 replaced by r + lam[r]."""
    edge = np.array(edge, dtype=np.float64)
    codes = lane_codes(edge)
    edge[..., 4] = codes + np.asarray(lam)[codes]
    return edge


def gat_attention(h_i: np.ndarray, h_j: np.ndarray, e_biased: np.ndarray, W: np.ndarray, a: np.ndarray,
                  We: np.ndarray, variant: str = "gat", slope: float = 0.2) -> float:
    """
    Unnormalized score of one head.

    W is (head_dim, embed_dim), a is (3 * head_dim,), We is (head_dim, 5).
    'gat' applies LeakyReLU to a . [W h_i || W h_j || We e'];
    'gatv2' applies a to LeakyReLU of the concatenation.
    """
    z = np.concatenate([W @ h_i, W @ h_j, We @ e_biased])
    if variant == "gatv2":
        return float(a @ leaky_relu(z, slope))
    return float(leaky_relu(a @ z, slope))


class GATLayer:
    """One attention layer: K heads of width head_dim, concatenated, then LayerNorm and ELU."""

    def __init__(self, index: int, in_dim: int, heads: int, head_dim: int, edge_dim: int,
                 variant: str = "gat", slope: float = 0.2):
        if variant not in VARIANTS:
            raise ValueError(f"attention variant must be one of {VARIANTS}, got '{variant}'")
        self.prefix = f"gat{index}"
        self.in_dim = in_dim
        self.heads = heads
        self.head_dim = head_dim
        self.edge_dim = edge_dim
        self.variant = variant
        self.slope = slope

    @property
    def out_dim(self) -> int:
        return self.heads * self.head_dim

    def init_params(self, store: ParamStore, rng: np.random.Generator) -> None:
        K, d = self.heads, self.head_dim
        p = self.prefix
        store.add(f"{p}.W", glorot_uniform(rng, (K * d, self.in_dim), fan_out=d))
        store.add(f"{p}.a", glorot_uniform(rng, (K, 3 * d), fan_in=3 * d, fan_out=1))
        store.add(f"{p}.We", glorot_uniform(rng, (K * d, self.edge_dim), fan_out=d))
        store.add(f"{p}.ln_g", np.ones(K * d))
        store.add(f"{p}.ln_b", np.zeros(K * d))

    def forward(self, store: ParamStore, h: np.ndarray, edge_src: np.ndarray, edge_dst: np.ndarray,
                edge_attr: np.ndarray) -> Tuple[np.ndarray, tuple]:
        """
        Args:
            h: (N, in_dim) node embeddings
            edge_src, edge_dst: (E,) node indices of j and i for edges j -> i (no self-loops)
            edge_attr: (E, edge_dim) edge features, lane code in the last column

        Returns:
            ((N, K * head_dim) output, cache for backward)
        """
        N = h.shape[0]
        K, d = self.heads, self.head_dim
        p = self.prefix
        loops = np.arange(N, dtype=np.int64)
        src = np.concatenate([np.asarray(edge_src, dtype=np.int64), loops])
        dst = np.concatenate([np.asarray(edge_dst, dtype=np.int64), loops])
        attr = np.concatenate([np.asarray(edge_attr, dtype=np.float64).reshape(-1, self.edge_dim),
                               np.zeros((N, self.edge_dim))])

        codes = lane_codes(attr)
        lam = store[LANE_BIAS]
        biased = attr.copy()
        biased[:, 4] = codes + lam[codes]

        hw = (h @ store[f"{p}.W"].T).reshape(N, K, d)
        ee = (biased @ store[f"{p}.We"].T).reshape(-1, K, d)
        zcat = np.concatenate([hw[dst], hw[src], ee], axis=2)
        a = store[f"{p}.a"]

        if self.variant == "gat":
            pre = np.einsum("ekd,kd->ek", zcat, a)
            scores = leaky_relu(pre, self.slope)
        else:
            pre = zcat
            scores = np.einsum("ekd,kd->ek", leaky_relu(zcat, self.slope), a)

        alpha = segment_softmax(scores, dst, N)
        agg = segment_sum(alpha[:, :, None] * hw[src], dst, N).reshape(N, K * d)
        normed, ln_cache = layer_norm(agg, store[f"{p}.ln_g"], store[f"{p}.ln_b"])
        out = elu(normed)
        cache = (h, src, dst, codes, biased, hw, zcat, pre, alpha, normed, ln_cache)
        return out, cache

    def backward(self, store: ParamStore, d_out: np.ndarray, cache: tuple, grads: Grads) -> np.ndarray:
        """Accumulate parameter gradients into `grads`; returns the gradient w.r.t. the input embeddings."""
        h, src, dst, codes, biased, hw, zcat, pre, alpha, normed, ln_cache = cache
        N = h.shape[0]
        K, d = self.heads, self.head_dim
        p = self.prefix
        a = store[f"{p}.a"]

        d_normed = d_out * elu_grad(normed)
        d_agg, d_gain, d_bias = layer_norm_backward(d_normed, store[f"{p}.ln_g"], ln_cache)
        grads[f"{p}.ln_g"] += d_gain
        grads[f"{p}.ln_b"] += d_bias

        d_msg = d_agg.reshape(N, K, d)[dst]
        d_alpha = np.sum(d_msg * hw[src], axis=2)
        d_hw = segment_sum(alpha[:, :, None] * d_msg, src, N)

        d_scores = segment_softmax_backward(d_alpha, alpha, dst, N)
        if self.variant == "gat":
            d_pre = d_scores * leaky_relu_grad(pre, self.slope)
            grads[f"{p}.a"] += np.einsum("ek,ekd->kd", d_pre, zcat)
            d_zcat = d_pre[:, :, None] * a[None]
        else:
            grads[f"{p}.a"] += np.einsum("ek,ekd->kd", d_scores, leaky_relu(zcat, self.slope))
            d_zcat = d_scores[:, :, None] * a[None] * leaky_relu_grad(zcat, self.slope)

        d_hw += segment_sum(d_zcat[:, :, :d], dst, N)
        d_hw += segment_sum(d_zcat[:, :, d:2 * d], src, N)
        d_ee = d_zcat[:, :, 2 * d:].reshape(-1, K * d)

        grads[f"{p}.We"] += d_ee.T @ biased
        d_biased = d_ee @ store[f"{p}.We"]
        np.add.at(grads[LANE_BIAS], codes, d_biased[:, 4])

        d_hw = d_hw.reshape(N, K * d)
        grads[f"{p}.W"] += d_hw.T @ h
        return d_hw @ store[f"{p}.W"]
