"""
Synthetic merge-zone scenarios.

Vehicles follow their lane leader with the Intelligent Driver Model. Vehicles on a
merge lane run a scripted lateral transition into the adjacent lower-numbered lane
once they pass a per-vehicle trigger point inside the merge window. Output is the
ute canonical CSV plus the sidecar metadata consumed by the config layer.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from core.config_manager import atomic_write_text
from core.errors import ConfigError
from core.logger import logger
from core.trajectory import Dataset
from ingest.harmonize import harmonize, write_metadata
from ingest.parser import UTE_COLUMNS


@dataclass(frozen=True)
class IdmParams:
    desired_speed: float = 25.0   # v0, m/s
    time_headway: float = 1.5     # T, s
    max_accel: float = 1.5        # a, m/s^2
    max_decel: float = 2.0        # b, m/s^2
    min_gap: float = 2.0          # s0, m
    delta: float = 4.0
    vehicle_length: float = 5.0

    def acceleration(self, v: float, gap: Optional[float], v_leader: Optional[float]) -> float:
        """IDM acceleration, clipped to [-max_decel, max_accel]."""
        free = 1.0 - (v / self.desired_speed) ** self.delta
        if gap is None:
            accel = self.max_accel * free
        else:
            s = max(gap - self.vehicle_length, 0.1)
            dv = v - v_leader
            s_star = self.min_gap + max(0.0, v * self.time_headway + v * dv / (2.0 * math.sqrt(self.max_accel * self.max_decel)))
            accel = self.max_accel * (free - (s_star / s) ** 2)
        return float(np.clip(accel, -self.max_decel, self.max_accel))


@dataclass(frozen=True)
class ScenarioSpec:
    lanes: int = 3
    merge_lane_ids: Tuple[int, ...] = (3,)
    vehicles: int = 20
    duration_s: float = 20.0
    seed: int = 0
    frame_rate_hz: int = 10
    lane_width_m: float = 3.7
    road_length_m: float = 600.0
    initial_gap_m: float = 20.0
    merge_window_m: Tuple[float, float] = (60.0, 160.0)
    maneuver_s: float = 3.0
    idm: IdmParams = field(default_factory=IdmParams)

    def __post_init__(self):
        object.__setattr__(self, "merge_lane_ids", tuple(sorted(int(v) for v in self.merge_lane_ids)))
        if self.lanes < 1:
            raise ConfigError("scenario needs at least one lane", key="lane_max")
        for lane in self.merge_lane_ids:
            if not 2 <= lane <= self.lanes:
                raise ConfigError(f"merge lane {lane} must lie in 2..{self.lanes}", key="merge_lane_ids")
        if self.vehicles < 1 or self.duration_s <= 0 or self.frame_rate_hz < 1:
            raise ConfigError("scenario needs vehicles >= 1, duration > 0 and frame rate >= 1", key="synth_vehicles")
        if self.vehicles > self.capacity:
            raise ConfigError(f"{self.vehicles} vehicles exceed the capacity of {self.capacity} "
                              f"({self.lanes} lanes x {self.road_length_m:g} m at {self.initial_gap_m:g} m spacing)",
                              key="synth_vehicles")

    @property
    def capacity(self) -> int:
        return self.lanes * int(self.road_length_m // self.initial_gap_m)

    @property
    def num_frames(self) -> int:
        return int(round(self.duration_s * self.frame_rate_hz))

    def lane_center(self, lane: float) -> float:
        return (lane - 0.5) * self.lane_width_m


@dataclass
class _Vehicle:
    vid: int
    lane: int
    x: float
    v: float
    y: float
    trigger_x: Optional[float] = None
    maneuver_step: Optional[int] = None
    from_lane: int = 0
    to_lane: int = 0


def _neighbours(fleet: List[_Vehicle]) -> Dict[int, Tuple[Optional[_Vehicle], Optional[_Vehicle]]]:
    """vehicle id -> (leader, follower) in its current lane; ties broken by id."""
    by_lane: Dict[int, List[_Vehicle]] = {}
    for veh in fleet:
        by_lane.setdefault(veh.lane, []).append(veh)
    links: Dict[int, Tuple[Optional[_Vehicle], Optional[_Vehicle]]] = {}
    for members in by_lane.values():
        members.sort(key=lambda veh: (veh.x, veh.vid))
        for k, veh in enumerate(members):
            follower = members[k - 1] if k > 0 else None
            leader = members[k + 1] if k + 1 < len(members) else None
            links[veh.vid] = (leader, follower)
    return links


def simulate(spec: ScenarioSpec) -> pd.DataFrame:
    """Run the scenario; one ute-schema row per vehicle and frame, ordered by vehicle then frame."""
    rng = np.random.default_rng(spec.seed)
    dt = 1.0 / spec.frame_rate_hz
    maneuver_frames = max(1, int(round(spec.maneuver_s * spec.frame_rate_hz)))
    slots = int(spec.road_length_m // spec.initial_gap_m)
    jitter = max(0.0, spec.initial_gap_m - spec.idm.vehicle_length - spec.idm.min_gap)

    fleet: List[_Vehicle] = []
    for k in range(spec.vehicles):
        lane = k % spec.lanes + 1
        slot = k // spec.lanes
        x = (slots - 1 - slot) * spec.initial_gap_m + rng.uniform(0.0, jitter)
        v = rng.uniform(0.6, 0.9) * spec.idm.desired_speed
        veh = _Vehicle(vid=k + 1, lane=lane, x=x, v=v, y=spec.lane_center(lane))
        if lane in spec.merge_lane_ids:
            veh.trigger_x = x + rng.uniform(*spec.merge_window_m)
        fleet.append(veh)

    rows: List[tuple] = []
    for frame in range(spec.num_frames):
        flags: Dict[int, int] = {}
        for veh in fleet:
            if veh.maneuver_step is None and veh.trigger_x is not None and veh.x >= veh.trigger_x:
                veh.maneuver_step = 0
                veh.from_lane, veh.to_lane = veh.lane, veh.lane - 1
                veh.trigger_x = None
            flags[veh.vid] = 0
            if veh.maneuver_step is not None:
                step = veh.maneuver_step
                y0, y1 = spec.lane_center(veh.from_lane), spec.lane_center(veh.to_lane)
                veh.y = y0 + (y1 - y0) * step / maneuver_frames
                veh.lane = veh.to_lane if 2 * step >= maneuver_frames else veh.from_lane
                flags[veh.vid] = 1
                if step == maneuver_frames:
                    veh.maneuver_step = None
                    flags[veh.vid] = 0
                else:
                    veh.maneuver_step = step + 1

        links = _neighbours(fleet)
        accels = {}
        for veh in fleet:
            leader, _ = links[veh.vid]
            if leader is None:
                accels[veh.vid] = spec.idm.acceleration(veh.v, None, None)
            else:
                accels[veh.vid] = spec.idm.acceleration(veh.v, leader.x - veh.x, leader.v)

        t = frame / spec.frame_rate_hz
        for veh in fleet:
            leader, follower = links[veh.vid]
            v_new = max(0.0, veh.v + accels[veh.vid] * dt)
            rows.append((
                veh.vid, t, veh.x, veh.y, veh.v, (v_new - veh.v) / dt, veh.lane,
                None if leader is None else leader.vid,
                None if follower is None else follower.vid,
                None if leader is None else leader.x - veh.x,
                flags[veh.vid],
            ))
        for veh in fleet:
            v_new = max(0.0, veh.v + accels[veh.vid] * dt)
            veh.x += v_new * dt
            veh.v = v_new

    df = pd.DataFrame(rows, columns=UTE_COLUMNS)
    for column in ("leader_id", "follower_id"):
        df[column] = df[column].astype("Int64")
    return df.sort_values(["track_id", "timestamp_s"], kind="stable").reset_index(drop=True)


def write_scenario(spec: ScenarioSpec, path, source_tag: str = "synthetic") -> Path:
    """Simulate and write the CSV and its sidecar metadata."""
    path = Path(path)
    df = simulate(spec)
    atomic_write_text(path, df.to_csv(index=False, lineterminator="\n"))
    write_metadata(path, spec.lanes, spec.merge_lane_ids, source_tag)
    logger.info(f"[Synth] {spec.vehicles} vehicles x {spec.num_frames} frames "
                f"at {spec.frame_rate_hz} Hz -> {path}")
    return path


def generate(spec: ScenarioSpec, path, source_tag: str = "synthetic") -> Dataset:
    """Write the scenario and return it harmonized onto the 10 Hz grid."""
    write_scenario(spec, path, source_tag)
    dataset, _ = harmonize(path, "ute", spec.lanes, spec.merge_lane_ids, source_tag=source_tag)
    return dataset
