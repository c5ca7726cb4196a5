"""
Canonical in-memory trajectory model shared by every stage.

All records are harmonized to the 10 Hz grid in SI units with road-aligned
(Frenet) coordinates: x longitudinal, y lateral.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from core.errors import DataError, InsufficientPopulationError

FREQUENCY_HZ = 10
T_OBS = 30

# Horizon label -> number of 10 Hz prediction steps
HORIZONS: Dict[str, int] = {"1s": 10, "3s": 30, "5s": 50}

SOURCE_TAGS = frozenset({"ngsim_us101", "ngsim_i80", "ute_w1", "ute_w2", "synthetic"})


def grid_frame(t: float) -> int:
    """Map a timestamp in seconds to its 10 Hz frame index (half-up rounding)."""
    return int(math.floor(t * FREQUENCY_HZ + 0.5))


@dataclass(frozen=True)
class VehicleState:
    """One vehicle's kinematic record at one frame."""

    vehicle_id: int
    frame: int
    t: float
    x: float
    y: float
    v: float
    a: float
    lane_id: int
    lane_norm: float
    lane_change_flag: int = 0
    leader_id: Optional[int] = None
    follower_id: Optional[int] = None
    space_headway: Optional[float] = None

    def __post_init__(self):
        if self.v < 0:
            raise ValueError(f"negative speed {self.v} for vehicle {self.vehicle_id} at frame {self.frame}")
        if self.space_headway is not None and self.space_headway < 0:
            raise ValueError(f"negative headway for vehicle {self.vehicle_id} at frame {self.frame}")
        if self.lane_id < 1:
            raise ValueError(f"lane id {self.lane_id} < 1 for vehicle {self.vehicle_id}")
        if self.lane_change_flag not in (0, 1):
            raise ValueError(f"lane change flag must be 0 or 1, got {self.lane_change_flag}")

    @property
    def position(self) -> Tuple[float, float]:
        return (self.x, self.y)

    def features(self) -> Tuple[float, float, float, float, float, float]:
        """Node feature six-vector [x, y, v, a, lane_norm, lane_change_flag]."""
        return (self.x, self.y, self.v, self.a, self.lane_norm, float(self.lane_change_flag))


@dataclass(frozen=True)
class Trajectory:
    """Frame-ordered states of a single vehicle."""

    vehicle_id: int
    states: Tuple[VehicleState, ...]
    _by_frame: Dict[int, VehicleState] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(self.states))
        prev = None
        for state in self.states:
            if state.vehicle_id != self.vehicle_id:
                raise ValueError(f"state of vehicle {state.vehicle_id} in trajectory {self.vehicle_id}")
            if prev is not None and state.frame <= prev:
                raise ValueError(f"frames not strictly increasing in trajectory {self.vehicle_id}")
            prev = state.frame
        object.__setattr__(self, "_by_frame", {s.frame: s for s in self.states})

    def __len__(self) -> int:
        return len(self.states)

    @property
    def frames(self) -> List[int]:
        return [s.frame for s in self.states]

    def state_at(self, frame: int) -> Optional[VehicleState]:
        return self._by_frame.get(frame)

    def has_frames(self, start: int, stop: int) -> bool:
        """True when every frame in [start, stop] is present."""
        return all(f in self._by_frame for f in range(start, stop + 1))


@dataclass(frozen=True)
class Dataset:
    """A harmonized trajectory dataset of one site."""

    source_tag: str
    lane_max: int
    merge_lane_ids: FrozenSet[int]
    trajectories: Mapping[int, Trajectory]
    frequency_hz: int = FREQUENCY_HZ

    def __post_init__(self):
        if self.source_tag not in SOURCE_TAGS:
            raise DataError(f"Unknown source tag '{self.source_tag}' (expected one of {sorted(SOURCE_TAGS)})")
        object.__setattr__(self, "merge_lane_ids", frozenset(self.merge_lane_ids))
        for traj in self.trajectories.values():
            for state in traj.states:
                if state.lane_id > self.lane_max:
                    raise DataError(
                        f"Lane id {state.lane_id} of vehicle {state.vehicle_id} exceeds lane_max {self.lane_max}"
                    )
                if not math.isclose(state.lane_norm, state.lane_id / self.lane_max, rel_tol=1e-9, abs_tol=1e-12):
                    raise DataError(
                        f"lane_norm {state.lane_norm} of vehicle {state.vehicle_id} at frame {state.frame} "
                        f"is not lane_id / lane_max ({state.lane_id} / {self.lane_max})"
                    )

    @property
    def vehicle_ids(self) -> List[int]:
        return sorted(self.trajectories)

    def num_records(self) -> int:
        return sum(len(t) for t in self.trajectories.values())

    def subset(self, vehicle_ids: Iterable[int]) -> "Dataset":
        """Dataset restricted to the given vehicles."""
        keep = set(vehicle_ids)
        return Dataset(
            source_tag=self.source_tag,
            lane_max=self.lane_max,
            merge_lane_ids=self.merge_lane_ids,
            trajectories={vid: t for vid, t in self.trajectories.items() if vid in keep},
            frequency_hz=self.frequency_hz,
        )


@dataclass(frozen=True, eq=False)
class DisplacementTarget:
    """Future displacements relative to the anchor position for one horizon."""

    horizon: str
    steps: np.ndarray  # (T_H, 2) of (dx, dy) in meters

    def __post_init__(self):
        expected = HORIZONS[self.horizon]
        if self.steps.shape != (expected, 2):
            raise ValueError(f"horizon {self.horizon} needs {expected} steps, got {self.steps.shape}")


@dataclass(frozen=True, eq=False)
class Window:
    """A 30-frame history with its displacement targets for every horizon."""

    history: Tuple[VehicleState, ...]
    targets: Dict[str, DisplacementTarget]

    @property
    def anchor(self) -> VehicleState:
        return self.history[-1]

    @property
    def anchor_frame(self) -> int:
        return self.history[-1].frame


def index_by_frame(dataset: Dataset) -> Dict[int, List[VehicleState]]:
    """
    Group states by frame.

    Returns:
        Ordered mapping frame -> states (ascending frames, states ordered by vehicle id)
    """
    frames: Dict[int, List[VehicleState]] = {}
    for vid in dataset.vehicle_ids:
        for state in dataset.trajectories[vid].states:
            frames.setdefault(state.frame, []).append(state)
    return {f: frames[f] for f in sorted(frames)}


def extract_windows(traj: Trajectory, t_obs: int = T_OBS,
                    horizons: Mapping[str, int] = HORIZONS, stride: int = 1) -> List[Window]:
    """
    Cut a trajectory into gap-free history/future windows.

    A window is emitted for an anchor frame only when all t_obs history frames and
    the longest horizon's future frames exist. Candidate anchors start at the first
    frame that can close a history and advance by `stride` frames.

    Args:
        traj: Source trajectory
        t_obs: History length in frames
        horizons: Horizon label -> steps
        stride: Anchor stride in frames (>= 1)

    Returns:
        Windows in ascending anchor order
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if not traj.states:
        return []

    longest = max(horizons.values())
    first, last = traj.states[0].frame, traj.states[-1].frame
    windows: List[Window] = []

    anchor = first + t_obs - 1
    while anchor + longest <= last:
        if traj.has_frames(anchor - t_obs + 1, anchor + longest):
            history = tuple(traj.state_at(f) for f in range(anchor - t_obs + 1, anchor + 1))
            base = history[-1]
            future = np.array(
                [(traj.state_at(anchor + k).x - base.x, traj.state_at(anchor + k).y - base.y)
                 for k in range(1, longest + 1)],
                dtype=np.float64,
            )
            targets = {label: DisplacementTarget(label, future[:steps].copy()) for label, steps in horizons.items()}
            windows.append(Window(history=history, targets=targets))
        anchor += stride

    return windows


def split_vehicles(dataset_or_ids, fractions: Sequence[float] = (0.70, 0.15, 0.15),
                   seed: int = 0) -> Tuple[FrozenSet[int], FrozenSet[int], FrozenSet[int]]:
    """
    Vehicle-level train/validation/test split.

    Validation and test sizes are floor-rounded; the remainder goes to train.

    Args:
        dataset_or_ids: Dataset or iterable of vehicle ids
        fractions: (train, val, test) fractions summing to 1
        seed: Shuffle seed

    Returns:
        Disjoint (train, val, test) id sets covering every vehicle
    """
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be three values summing to 1, got {tuple(fractions)}")

    if isinstance(dataset_or_ids, Dataset):
        ids = dataset_or_ids.vehicle_ids
    else:
        ids = sorted(set(dataset_or_ids))

    n = len(ids)
    if n < 3:
        raise InsufficientPopulationError(f"Cannot split {n} vehicles (need at least 3)")

    n_val = int(math.floor(n * fractions[1] + 1e-9))
    n_test = int(math.floor(n * fractions[2] + 1e-9))
    n_train = n - n_val - n_test

    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    return (
        frozenset(shuffled[:n_train]),
        frozenset(shuffled[n_train:n_train + n_val]),
        frozenset(shuffled[n_train + n_val:]),
    )
