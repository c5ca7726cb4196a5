"""
Dynamic scene graphs.

A directed edge j -> i carries the influence of vehicle j on vehicle i and a
five-dimensional feature [dx, dy, dv, ttc, r] with dx = x_j - x_i (likewise dy, dv).
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, NamedTuple, Optional, Sequence, Set, Tuple

import numpy as np

from core.config_manager import atomic_write_text
from core.errors import DataError
from core.logger import logger
from core.trajectory import (HORIZONS, T_OBS, Dataset, DisplacementTarget, VehicleState,
                             extract_windows, index_by_frame)

LANE_SAME = 0
LANE_LEFT = 1
LANE_RIGHT = 2
LANE_MERGING = 3

TTC_SENTINEL = 999.0
ADJACENT_LANE_WINDOW_M = 10.0
RMAX_PERCENTILE = 95.0


@dataclass(frozen=True)
class EdgeFeature:
    dx: float
    dy: float
    dv: float
    ttc: float
    r: int

    def as_vector(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dv, self.ttc, float(self.r)], dtype=np.float64)


class Edge(NamedTuple):
    src: int
    dst: int
    feature: EdgeFeature
    mandatory: bool


@dataclass(frozen=True, eq=False)
class SceneGraph:
    """
    Interaction graph of one frame.

    Edges are stored as index arrays into `nodes` (ordered by vehicle id),
    sorted by destination then source. No self-edges are stored.
    """

    frame: int
    nodes: Tuple[int, ...]
    node_features: np.ndarray  # (n, 6)
    edge_src: np.ndarray       # (E,) node index of j
    edge_dst: np.ndarray       # (E,) node index of i
    edge_attr: np.ndarray      # (E, 5)
    mandatory: np.ndarray      # (E,) bool
    _index: Dict[int, int] = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_index", {vid: k for k, vid in enumerate(self.nodes)})

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_edges(self) -> int:
        return int(self.edge_src.shape[0])

    def index_of(self, vehicle_id: int) -> int:
        return self._index[vehicle_id]

    def __contains__(self, vehicle_id: int) -> bool:
        return vehicle_id in self._index

    @property
    def edges(self) -> List[Edge]:
        out = []
        for s, d, attr, m in zip(self.edge_src, self.edge_dst, self.edge_attr, self.mandatory):
            feature = EdgeFeature(float(attr[0]), float(attr[1]), float(attr[2]), float(attr[3]), int(attr[4]))
            out.append(Edge(self.nodes[s], self.nodes[d], feature, bool(m)))
        return out

    def edge_set(self) -> Set[Tuple[int, int]]:
        return {(self.nodes[s], self.nodes[d]) for s, d in zip(self.edge_src, self.edge_dst)}

    def subgraph(self, vehicle_ids: Iterable[int]) -> "SceneGraph":
        """Induced subgraph on the given vehicles (kept in vehicle id order)."""
        keep = sorted(v for v in set(vehicle_ids) if v in self._index)
        old = np.array([self._index[v] for v in keep], dtype=np.int64)
        remap = np.full(self.num_nodes, -1, dtype=np.int64)
        remap[old] = np.arange(len(keep))
        mask = (remap[self.edge_src] >= 0) & (remap[self.edge_dst] >= 0)
        return SceneGraph(
            frame=self.frame,
            nodes=tuple(keep),
            node_features=self.node_features[old] if len(keep) else np.zeros((0, 6)),
            edge_src=remap[self.edge_src[mask]],
            edge_dst=remap[self.edge_dst[mask]],
            edge_attr=self.edge_attr[mask],
            mandatory=self.mandatory[mask],
        )

    def in_neighbourhood(self, vehicle_id: int, hops: int) -> Set[int]:
        """Vehicles reaching `vehicle_id` through at most `hops` incoming edges (itself included)."""
        reached = {self._index[vehicle_id]}
        frontier = set(reached)
        for _ in range(hops):
            mask = np.isin(self.edge_dst, list(frontier))
            frontier = set(self.edge_src[mask].tolist()) - reached
            reached |= frontier
            if not frontier:
                break
        return {self.nodes[k] for k in reached}


@dataclass(frozen=True, eq=False)
class GraphSequence:
    """T_obs consecutive scene graphs ending at the anchor frame."""

    frames: Tuple[SceneGraph, ...]
    target_vehicles: Tuple[int, ...]

    def __post_init__(self):
        if len(self.frames) != T_OBS:
            raise ValueError(f"graph sequence needs {T_OBS} graphs, got {len(self.frames)}")
        first = self.frames[0].frame
        if [g.frame for g in self.frames] != list(range(first, first + T_OBS)):
            raise ValueError("graph sequence frames are not consecutive")

    @property
    def anchor_graph(self) -> SceneGraph:
        return self.frames[-1]

    @property
    def anchor_frame(self) -> int:
        return self.frames[-1].frame

    def complete_vehicles(self) -> List[int]:
        """Vehicles present in every graph of the sequence."""
        present = set(self.frames[0].nodes)
        for g in self.frames[1:]:
            present &= set(g.nodes)
        return sorted(present)

    def history(self, vehicle_id: int) -> np.ndarray:
        """(T_obs, 6) node features of one vehicle across the sequence."""
        return np.stack([g.node_features[g.index_of(vehicle_id)] for g in self.frames])


def estimate_rmax(datasets: Sequence[Dataset]) -> float:
    """
    95th percentile (linear interpolation) of all recorded leader distances.

    Missing headways are ignored.
    """
    values = [
        s.space_headway
        for ds in datasets
        for traj in ds.trajectories.values()
        for s in traj.states
        if s.space_headway is not None and np.isfinite(s.space_headway)
    ]
    if not values:
        raise DataError("Cannot estimate R_max: no finite headway / leader distance values")
    rmax = float(np.percentile(np.asarray(values, dtype=np.float64), RMAX_PERCENTILE))
    logger.info(f"[SceneGraph] R_max = {rmax:.3f} m from {len(values)} headway values")
    return rmax


def compute_ttc(dx, dv):
    """
    Time-to-collision with sentinel.

    dx / dv when dx > 0 and dv > 0, clipped to [0, 999]; 999 otherwise.
    Works on scalars and arrays.
    """
    dx_arr = np.asarray(dx, dtype=np.float64)
    dv_arr = np.asarray(dv, dtype=np.float64)
    valid = (dx_arr > 0) & (dv_arr > 0)
    ratio = np.divide(dx_arr, dv_arr, out=np.full(np.broadcast(dx_arr, dv_arr).shape, TTC_SENTINEL),
                      where=valid)
    ttc = np.clip(np.where(valid, ratio, TTC_SENTINEL), 0.0, TTC_SENTINEL)
    return float(ttc) if ttc.ndim == 0 else ttc


def lane_relation(state_i: VehicleState, state_j: VehicleState, merge_lane_ids: FrozenSet[int],
                  left_is_lower: bool = True) -> int:
    """
    Lane relation code of j as seen from i.

    3 (merging) when exactly one of the two occupies a merge lane and they are at
    most one lane apart; else 0 for the same lane; else the side code (1 left,
    2 right). With left_is_lower, lower lane ids are to the left.
    """
    return int(_lane_codes(np.array([state_i.lane_id]), np.array([state_j.lane_id]),
                           merge_lane_ids, left_is_lower)[0])


def _lane_codes(lane_i: np.ndarray, lane_j: np.ndarray, merge_lane_ids: FrozenSet[int],
                left_is_lower: bool) -> np.ndarray:
    merge = np.asarray(sorted(merge_lane_ids), dtype=np.int64)
    in_i = np.isin(lane_i, merge)
    in_j = np.isin(lane_j, merge)
    diff = lane_j - lane_i
    left = diff < 0 if left_is_lower else diff > 0
    codes = np.where(left, LANE_LEFT, LANE_RIGHT)
    codes = np.where(diff == 0, LANE_SAME, codes)
    codes = np.where((in_i != in_j) & (np.abs(diff) <= 1), LANE_MERGING, codes)
    return codes.astype(np.int64)


def build_graph(states: Sequence[VehicleState], rmax: float, merge_lane_ids: Iterable[int] = (),
                left_is_lower: bool = True, frame: Optional[int] = None) -> SceneGraph:
    """
    Build the directed interaction graph of one frame.

    Edge j -> i exists when the vehicles are within rmax (Euclidean), when either is
    the other's recorded leader or follower, or when they are in adjacent lanes
    within 10 m longitudinally. The last two kinds are flagged mandatory.
    """
    states = sorted(states, key=lambda s: s.vehicle_id)
    if states and any(s.frame != states[0].frame for s in states):
        raise ValueError("build_graph needs states of a single frame")
    if frame is None:
        frame = states[0].frame if states else -1
    nodes = tuple(s.vehicle_id for s in states)
    n = len(nodes)
    features = np.array([s.features() for s in states], dtype=np.float64).reshape(n, 6)

    if n < 2:
        empty_i = np.zeros(0, dtype=np.int64)
        return SceneGraph(frame, nodes, features, empty_i, empty_i.copy(), np.zeros((0, 5)), np.zeros(0, dtype=bool))

    x, y, v = features[:, 0], features[:, 1], features[:, 2]
    lanes = np.array([s.lane_id for s in states], dtype=np.int64)
    index = {vid: k for k, vid in enumerate(nodes)}

    # Pairwise [i, j] = quantity of j relative to i
    dx = x[None, :] - x[:, None]
    dy = y[None, :] - y[:, None]
    dv = v[None, :] - v[:, None]
    lane_gap = np.abs(lanes[None, :] - lanes[:, None])

    proximity = np.hypot(dx, dy) <= rmax
    structural = np.zeros((n, n), dtype=bool)
    for k, s in enumerate(states):
        for other in (s.leader_id, s.follower_id):
            if other is not None and other in index:
                structural[k, index[other]] = True
                structural[index[other], k] = True
    adjacent = (lane_gap == 1) & (np.abs(dx) <= ADJACENT_LANE_WINDOW_M)
    mandatory = structural | adjacent

    mask = (proximity | mandatory) & ~np.eye(n, dtype=bool)
    dst, src = np.nonzero(mask)

    edx, edy, edv = dx[dst, src], dy[dst, src], dv[dst, src]
    codes = _lane_codes(lanes[dst], lanes[src], frozenset(merge_lane_ids), left_is_lower)
    attr = np.stack([edx, edy, edv, compute_ttc(edx, edv), codes.astype(np.float64)], axis=1)

    return SceneGraph(frame, nodes, features, src.astype(np.int64), dst.astype(np.int64), attr, mandatory[dst, src])


class GraphBuilder:
    """Builds (and caches) the scene graph of every frame of a dataset."""

    def __init__(self, dataset: Dataset, rmax: float, left_is_lower: bool = True):
        self.dataset = dataset
        self.rmax = rmax
        self.left_is_lower = left_is_lower
        self.frames = index_by_frame(dataset)
        self._cache: Dict[int, SceneGraph] = {}

    def graph(self, frame: int) -> SceneGraph:
        if frame not in self._cache:
            self._cache[frame] = self._build(frame)
        return self._cache[frame]

    def prebuild(self, frames: Iterable[int], threads: int = 1) -> None:
        """Build graphs for the given frames, optionally in parallel."""
        todo = sorted(set(frames) - set(self._cache))
        if threads > 1 and len(todo) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                graphs = list(pool.map(self._build, todo))
        else:
            graphs = [self._build(f) for f in todo]
        for f, g in zip(todo, graphs):
            self._cache[f] = g

    def _build(self, frame: int) -> SceneGraph:
        return build_graph(self.frames.get(frame, []), self.rmax, self.dataset.merge_lane_ids,
                           self.left_is_lower, frame=frame)


TargetMap = Dict[int, Dict[str, DisplacementTarget]]


def build_sequences(dataset: Dataset, rmax: float, t_obs: int = T_OBS, stride: int = 1,
                    vehicles: Optional[Iterable[int]] = None, left_is_lower: bool = True,
                    threads: int = 1, builder: Optional[GraphBuilder] = None
                    ) -> List[Tuple[GraphSequence, TargetMap]]:
    """
    Assemble T_obs-graph sequences for every eligible anchor frame.

    A vehicle is a target at anchor t when it has a gap-free history ending at t and
    gap-free futures for every horizon. Anchors are frames divisible by `stride`
    that have at least one target.

    Args:
        dataset: Harmonized dataset
        rmax: Proximity radius in meters
        t_obs: History length
        stride: Anchor frame stride
        vehicles: Restrict targets to these vehicle ids (all when None)
        left_is_lower: Lane side convention
        threads: Worker cap for graph construction
        builder: Reuse an existing graph cache

    Returns:
        (GraphSequence, {vehicle_id: {horizon: DisplacementTarget}}) per anchor, ascending
    """
    if builder is None:
        builder = GraphBuilder(dataset, rmax, left_is_lower)
    allowed = None if vehicles is None else set(vehicles)

    targets_by_anchor: Dict[int, TargetMap] = {}
    for vid in dataset.vehicle_ids:
        if allowed is not None and vid not in allowed:
            continue
        for window in extract_windows(dataset.trajectories[vid], t_obs, HORIZONS, stride=1):
            if window.anchor_frame % stride == 0:
                targets_by_anchor.setdefault(window.anchor_frame, {})[vid] = window.targets

    anchors = sorted(targets_by_anchor)
    needed = {f for t in anchors for f in range(t - t_obs + 1, t + 1)}
    builder.prebuild(needed, threads=threads)

    sequences = []
    for t in anchors:
        graphs = tuple(builder.graph(f) for f in range(t - t_obs + 1, t + 1))
        targets = targets_by_anchor[t]
        sequences.append((GraphSequence(graphs, tuple(sorted(targets))), targets))

    logger.info(f"[SceneGraph] {len(sequences)} sequences from {dataset.source_tag} (stride {stride})")
    return sequences


def dump_graph(graph: SceneGraph, path) -> Path:
    """Write `EDGE src dst dx dy dv ttc r mandatory` lines for oracle diffing."""
    lines = [f"# frame {graph.frame} nodes {graph.num_nodes} edges {graph.num_edges}"]
    for edge in graph.edges:
        f = edge.feature
        lines.append(f"EDGE {edge.src} {edge.dst} {f.dx!r} {f.dy!r} {f.dv!r} {f.ttc!r} {f.r} {int(edge.mandatory)}")
    path = Path(path)
    atomic_write_text(path, "\n".join(lines) + "\n")
    return path
