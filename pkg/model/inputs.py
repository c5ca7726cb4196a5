"""
Model-ready scene tensors.

Node features [x, y, v, a] and edge features [dx, dy, dv, ttc] are z-scored with
training-split statistics; lane_norm, the lane-change flag and the lane code pass
through unchanged. The raw anchor velocity rides along for the kinematic prior.
"""

from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from core.errors import ModelInputError
from core.trajectory import FREQUENCY_HZ
from graph.scene_graph import GraphSequence, SceneGraph

SCALED_COLUMNS = 4
MIN_STD = 1e-6


@dataclass(frozen=True, eq=False)
class ModelInput:
    """One (possibly batched) graph: disjoint scenes concatenated node-wise."""

    nodes: Tuple[int, ...]
    histories: np.ndarray   # (N, T_obs, 6) standardized
    edge_src: np.ndarray    # (E,)
    edge_dst: np.ndarray    # (E,)
    edge_attr: np.ndarray   # (E, 5) standardized, raw lane code last
    anchor_xy: np.ndarray   # (N, 2) raw anchor positions in meters
    anchor_velocity: np.ndarray  # (N, 2) raw (v, lateral rate) at the anchor in m/s
    decode_rows: np.ndarray  # (M,) rows whose predictions are read

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)


def anchor_velocity(histories: np.ndarray) -> np.ndarray:
    """
    Last observed velocity of raw (N, T, 6) histories.

    Longitudinal speed is the recorded v of the last frame; the lateral rate is
    finite-differenced from the last two frames.
    """
    histories = np.asarray(histories, dtype=np.float64)
    if histories.shape[0] == 0:
        return np.zeros((0, 2))
    vy = np.zeros(histories.shape[0])
    if histories.shape[1] >= 2:
        vy = (histories[:, -1, 1] - histories[:, -2, 1]) * FREQUENCY_HZ
    return np.column_stack([histories[:, -1, 2], vy])


def constant_velocity_path(velocity: np.ndarray, steps: int) -> np.ndarray:
    """(M, steps, 2) displacements from extrapolating (M, 2) velocities at 10 Hz."""
    offsets = np.arange(1, steps + 1) / FREQUENCY_HZ
    return np.asarray(velocity, dtype=np.float64)[:, None, :] * offsets[None, :, None]


@dataclass
class FeatureScaler:
    """Per-column mean/std for the continuous node and edge features."""

    node_mean: np.ndarray
    node_std: np.ndarray
    edge_mean: np.ndarray
    edge_std: np.ndarray

    @classmethod
    def identity(cls) -> "FeatureScaler":
        zeros, ones = np.zeros(SCALED_COLUMNS), np.ones(SCALED_COLUMNS)
        return cls(zeros, ones, zeros.copy(), ones.copy())

    @classmethod
    def fit(cls, node_rows: np.ndarray, edge_rows: np.ndarray) -> "FeatureScaler":
        """
        Args:
            node_rows: (n, 6) node features of training states
            edge_rows: (m, 5) edge features of training graphs (may be empty)
        """
        node_mean, node_std = _moments(np.asarray(node_rows, dtype=np.float64).reshape(-1, 6)[:, :SCALED_COLUMNS])
        edge_mean, edge_std = _moments(np.asarray(edge_rows, dtype=np.float64).reshape(-1, 5)[:, :SCALED_COLUMNS])
        return cls(node_mean, node_std, edge_mean, edge_std)

    def transform_nodes(self, features: np.ndarray) -> np.ndarray:
        out = np.array(features, dtype=np.float64)
        out[..., :SCALED_COLUMNS] = (out[..., :SCALED_COLUMNS] - self.node_mean) / self.node_std
        return out

    def transform_edges(self, attr: np.ndarray) -> np.ndarray:
        out = np.array(attr, dtype=np.float64).reshape(-1, 5)
        out[:, :SCALED_COLUMNS] = (out[:, :SCALED_COLUMNS] - self.edge_mean) / self.edge_std
        return out

    def to_dict(self) -> Dict[str, List[float]]:
        return {
            "node_mean": [float(v) for v in self.node_mean],
            "node_std": [float(v) for v in self.node_std],
            "edge_mean": [float(v) for v in self.edge_mean],
            "edge_std": [float(v) for v in self.edge_std],
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Sequence[float]]) -> "FeatureScaler":
        return cls(*(np.asarray(payload[k], dtype=np.float64) for k in ("node_mean", "node_std", "edge_mean", "edge_std")))


def _moments(rows: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    if rows.shape[0] == 0:
        return np.zeros(SCALED_COLUMNS), np.ones(SCALED_COLUMNS)
    std = rows.std(axis=0)
    return rows.mean(axis=0), np.where(std < MIN_STD, 1.0, std)


def encode_graph(sequence: GraphSequence, graph: SceneGraph, scaler: FeatureScaler,
                 decode: Iterable[int]) -> ModelInput:
    """Tensors for `graph` (a subgraph of the anchor graph) with histories taken from `sequence`."""
    decode = list(decode)
    for vid in decode:
        if vid not in graph:
            raise ModelInputError(f"vehicle {vid} is not in the anchor graph of frame {sequence.anchor_frame}")
    histories = np.stack([sequence.history(v) for v in graph.nodes]) if graph.num_nodes else np.zeros((0, len(sequence.frames), 6))
    return ModelInput(
        nodes=graph.nodes,
        histories=scaler.transform_nodes(histories),
        edge_src=graph.edge_src.copy(),
        edge_dst=graph.edge_dst.copy(),
        edge_attr=scaler.transform_edges(graph.edge_attr),
        anchor_xy=graph.node_features[:, :2].copy(),
        anchor_velocity=anchor_velocity(histories),
        decode_rows=np.array([graph.index_of(v) for v in decode], dtype=np.int64),
    )


def scene_input(sequence: GraphSequence, scaler: FeatureScaler, decode: Optional[Iterable[int]] = None) -> ModelInput:
    """
    Whole-scene input: the anchor graph restricted to vehicles with a complete history.

    `decode` defaults to the sequence's target vehicles.
    """
    graph = sequence.anchor_graph.subgraph(sequence.complete_vehicles())
    return encode_graph(sequence, graph, scaler, sequence.target_vehicles if decode is None else decode)


def concat_inputs(inputs: Sequence[ModelInput]) -> Tuple[ModelInput, np.ndarray]:
    """
    Batch inputs as one disjoint graph.

    Returns:
        (batched input, (len(inputs) + 1,) node offsets)
    """
    offsets = np.zeros(len(inputs) + 1, dtype=np.int64)
    for k, inp in enumerate(inputs):
        offsets[k + 1] = offsets[k] + inp.num_nodes
    nodes: Tuple[int, ...] = tuple(v for inp in inputs for v in inp.nodes)
    batched = ModelInput(
        nodes=nodes,
        histories=np.concatenate([inp.histories for inp in inputs]),
        edge_src=np.concatenate([inp.edge_src + offsets[k] for k, inp in enumerate(inputs)]),
        edge_dst=np.concatenate([inp.edge_dst + offsets[k] for k, inp in enumerate(inputs)]),
        edge_attr=np.concatenate([inp.edge_attr for inp in inputs]),
        anchor_xy=np.concatenate([inp.anchor_xy for inp in inputs]),
        anchor_velocity=np.concatenate([inp.anchor_velocity for inp in inputs]),
        decode_rows=np.concatenate([inp.decode_rows + offsets[k] for k, inp in enumerate(inputs)]),
    )
    return batched, offsets
