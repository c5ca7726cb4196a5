"""
Training samples: one target vehicle window with its local interaction graph.

A sample's graph is the anchor-frame graph restricted to vehicles with a complete
history, then to the target's in-neighbourhood of depth `hops` (the number of
attention layers), so the target's prediction matches a whole-scene forward.
Only targets are drawn from a split; neighbours may be any vehicle.
"""

from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from core.trajectory import T_OBS, Dataset, extract_windows
from graph.scene_graph import GraphBuilder, GraphSequence, SceneGraph
from model.inputs import FeatureScaler, ModelInput, concat_inputs, encode_graph


@dataclass(frozen=True, eq=False)
class SampleSpec:
    """Un-standardized sample: graph and targets before scaling."""

    source_tag: str
    vehicle_id: int
    sequence: GraphSequence
    graph: SceneGraph
    targets: Dict[str, np.ndarray]

    @property
    def anchor_frame(self) -> int:
        return self.sequence.anchor_frame


@dataclass(frozen=True, eq=False)
class TrainingSample:
    source_tag: str
    vehicle_id: int
    anchor_frame: int
    inp: ModelInput
    target_pos: int              # position of the target in inp.decode_rows
    targets: Dict[str, np.ndarray]  # horizon -> (T_H, 2)
    pair_src: np.ndarray         # decode positions of neighbours j (TTC pairs j -> target)
    pair_dst: np.ndarray


@dataclass(frozen=True, eq=False)
class GraphBatch:
    """Several samples collated into one disjoint graph."""

    inp: ModelInput
    target_pos: np.ndarray          # (S,) positions in inp.decode_rows
    targets: Dict[str, np.ndarray]  # horizon -> (S, T_H, 2)
    pair_src: np.ndarray
    pair_dst: np.ndarray

    @property
    def size(self) -> int:
        return int(self.target_pos.shape[0])


def collect_specs(dataset: Dataset, vehicles: Iterable[int], rmax: float, step_sample: int,
                  hops: int = 2, left_is_lower: bool = True, threads: int = 1,
                  builder: Optional[GraphBuilder] = None) -> List[SampleSpec]:
    """
    Windows of the given target vehicles with anchors every `step_sample` frames per vehicle.

    Returns:
        Specs ordered by vehicle id, then anchor frame
    """
    if builder is None:
        builder = GraphBuilder(dataset, rmax, left_is_lower)
    windows = []
    for vid in sorted(set(vehicles)):
        if vid not in dataset.trajectories:
            continue
        for window in extract_windows(dataset.trajectories[vid], T_OBS, stride=step_sample):
            windows.append((vid, window))

    needed = {f for _, w in windows for f in range(w.anchor_frame - T_OBS + 1, w.anchor_frame + 1)}
    builder.prebuild(needed, threads=threads)

    by_anchor: Dict[int, List[int]] = {}
    for vid, window in windows:
        by_anchor.setdefault(window.anchor_frame, []).append(vid)
    sequences = {
        t: GraphSequence(tuple(builder.graph(f) for f in range(t - T_OBS + 1, t + 1)), tuple(sorted(ids)))
        for t, ids in by_anchor.items()
    }

    specs: List[SampleSpec] = []
    for vid, window in windows:
        sequence = sequences[window.anchor_frame]
        complete = sequence.anchor_graph.subgraph(sequence.complete_vehicles())
        local = complete.subgraph(complete.in_neighbourhood(vid, hops))
        specs.append(SampleSpec(
            source_tag=dataset.source_tag,
            vehicle_id=vid,
            sequence=sequence,
            graph=local,
            targets={h: target.steps for h, target in window.targets.items()},
        ))
    return specs


def fit_scaler(datasets: Sequence[Dataset], vehicles: Sequence[Iterable[int]], specs: Sequence[SampleSpec]) -> FeatureScaler:
    """
    Z-score statistics from training data.

    Node statistics use every state of the training vehicles; edge statistics use
    the edges of the training sample graphs.
    """
    node_rows = [
        s.features()
        for ds, ids in zip(datasets, vehicles)
        for vid in sorted(set(ids)) if vid in ds.trajectories
        for s in ds.trajectories[vid].states
    ]
    edge_rows = [spec.graph.edge_attr for spec in specs]
    edges = np.concatenate(edge_rows) if edge_rows else np.zeros((0, 5))
    return FeatureScaler.fit(np.asarray(node_rows, dtype=np.float64).reshape(-1, 6), edges)


def encode_sample(spec: SampleSpec, scaler: FeatureScaler, decode_all: bool = False) -> TrainingSample:
    """
    Standardize one spec.

    With decode_all every node is decoded and the incoming edges of the target
    become TTC pairs; otherwise only the target row is decoded.
    """
    graph = spec.graph
    target_idx = graph.index_of(spec.vehicle_id)
    if decode_all:
        inp = encode_graph(spec.sequence, graph, scaler, graph.nodes)
        mask = graph.edge_dst == target_idx
        pair_src = graph.edge_src[mask].copy()
        pair_dst = np.full(pair_src.shape, target_idx, dtype=np.int64)
        target_pos = target_idx
    else:
        inp = encode_graph(spec.sequence, graph, scaler, [spec.vehicle_id])
        pair_src = np.zeros(0, dtype=np.int64)
        pair_dst = np.zeros(0, dtype=np.int64)
        target_pos = 0
    return TrainingSample(spec.source_tag, spec.vehicle_id, spec.anchor_frame, inp, target_pos,
                          spec.targets, pair_src, pair_dst)


def collate(samples: Sequence[TrainingSample]) -> GraphBatch:
    inp, _ = concat_inputs([s.inp for s in samples])
    decode_offsets = np.cumsum([0] + [len(s.inp.decode_rows) for s in samples])
    horizons = list(samples[0].targets)
    return GraphBatch(
        inp=inp,
        target_pos=np.array([s.target_pos + decode_offsets[k] for k, s in enumerate(samples)], dtype=np.int64),
        targets={h: np.stack([s.targets[h] for s in samples]) for h in horizons},
        pair_src=np.concatenate([s.pair_src + decode_offsets[k] for k, s in enumerate(samples)]).astype(np.int64),
        pair_dst=np.concatenate([s.pair_dst + decode_offsets[k] for k, s in enumerate(samples)]).astype(np.int64),
    )
