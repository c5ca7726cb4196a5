"""
Surrogate safety measures on predicted trajectories.

For a pair (i, j) the gap is x_j - x_i and the closure rate v_i - v_j, with
speeds finite-differenced from predicted positions (the anchor is step 0).
TTC = gap / closure and DRAC = closure^2 / (2 gap) when both are positive;
otherwise TTC takes the 999 sentinel and DRAC is 0.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from core.config_manager import atomic_write_text
from core.trajectory import FREQUENCY_HZ
from graph.scene_graph import compute_ttc

PAIR_COLUMNS = ["i", "j", "horizon", "min_ttc", "max_drac", "min_dist"]


@dataclass(frozen=True)
class SsmConfig:
    ttc_threshold: float = 1.5
    drac_threshold: float = 3.35
    collision_distance: float = 2.0

    def __post_init__(self):
        if min(self.ttc_threshold, self.drac_threshold, self.collision_distance) <= 0:
            raise ValueError("SSM thresholds must be strictly positive")

    @classmethod
    def from_config(cls, config) -> "SsmConfig":
        return cls(config["ttc_threshold_s"], config["drac_threshold"], config["collision_distance_m"])


@dataclass
class SsmCounts:
    """Pair and vehicle tallies; rates are absent (None) without pairs."""

    n_pairs: int = 0
    ttc_violations: int = 0
    drac_exceedances: int = 0
    collisions: int = 0
    n_vehicles: int = 0
    colliding_vehicles: int = 0

    def __add__(self, other: "SsmCounts") -> "SsmCounts":
        return SsmCounts(*(a + b for a, b in zip(self.as_tuple(), other.as_tuple())))

    def as_tuple(self) -> Tuple[int, ...]:
        return (self.n_pairs, self.ttc_violations, self.drac_exceedances, self.collisions,
                self.n_vehicles, self.colliding_vehicles)

    def _pct(self, count: int, total: int) -> Optional[float]:
        return None if total == 0 else 100.0 * count / total

    @property
    def ttc_violation_pct(self) -> Optional[float]:
        return self._pct(self.ttc_violations, self.n_pairs)

    @property
    def drac_exceedance_pct(self) -> Optional[float]:
        return self._pct(self.drac_exceedances, self.n_pairs)

    @property
    def collision_pct(self) -> Optional[float]:
        return self._pct(self.collisions, self.n_pairs)

    @property
    def collision_vehicle_pct(self) -> Optional[float]:
        if self.n_pairs == 0:
            return None
        return self._pct(self.colliding_vehicles, self.n_vehicles)


def pair_measures(pos_i, pos_j, anchor_i, anchor_j, dt: float = 1.0 / FREQUENCY_HZ) -> Tuple[float, float, float]:
    """
    Minimum TTC, maximum DRAC and minimum distance of one ordered pair over a horizon.

    Args:
        pos_i, pos_j: (T, 2) predicted absolute positions
        anchor_i, anchor_j: (2,) last observed positions
    """
    pos_i = np.asarray(pos_i, dtype=np.float64)
    pos_j = np.asarray(pos_j, dtype=np.float64)
    v_i = np.diff(np.concatenate([[anchor_i[0]], pos_i[:, 0]])) / dt
    v_j = np.diff(np.concatenate([[anchor_j[0]], pos_j[:, 0]])) / dt
    gap = pos_j[:, 0] - pos_i[:, 0]
    closure = v_i - v_j
    closing = (gap > 0) & (closure > 0)
    ttc = compute_ttc(gap, closure)
    drac = np.where(closing, closure ** 2 / (2.0 * np.where(closing, gap, 1.0)), 0.0)
    dist = np.hypot(pos_j[:, 0] - pos_i[:, 0], pos_j[:, 1] - pos_i[:, 1])
    return float(np.min(ttc)), float(np.max(drac)), float(np.min(dist))


def pair_table(positions: Mapping[int, np.ndarray], anchors: Mapping[int, np.ndarray],
               pairs: Iterable[Tuple[int, int]], horizon: str, config: SsmConfig) -> pd.DataFrame:
    """
    One row per ordered pair (i, j) with the per-horizon extremes and violation flags.

    Args:
        positions: vehicle id -> (T, 2) predicted absolute positions
        anchors: vehicle id -> (2,) anchor position
        pairs: (i, j) with j a neighbour of i
    """
    rows = []
    for i, j in pairs:
        min_ttc, max_drac, min_dist = pair_measures(positions[i], positions[j], anchors[i], anchors[j])
        rows.append((i, j, horizon, min_ttc, max_drac, min_dist))
    df = pd.DataFrame(rows, columns=PAIR_COLUMNS)
    df["low_ttc"] = df["min_ttc"] < config.ttc_threshold
    df["high_drac"] = df["max_drac"] > config.drac_threshold
    df["collision"] = df["min_dist"] < config.collision_distance
    return df


def count_table(table: pd.DataFrame, vehicles: Iterable[int]) -> SsmCounts:
    colliding = set(table.loc[table["collision"], "i"]) | set(table.loc[table["collision"], "j"])
    return SsmCounts(
        n_pairs=len(table),
        ttc_violations=int(table["low_ttc"].sum()),
        drac_exceedances=int(table["high_drac"].sum()),
        collisions=int(table["collision"].sum()),
        n_vehicles=len(set(vehicles)),
        colliding_vehicles=len(colliding),
    )


def ssm_rates(positions: Mapping[int, np.ndarray], anchors: Mapping[int, np.ndarray],
              pairs: Sequence[Tuple[int, int]], config: Optional[SsmConfig] = None,
              horizon: str = "") -> Dict[str, Optional[float]]:
    """
    Collision, TTC-violation and DRAC-exceedance percentages over ordered neighbour pairs.

    Rates are None when there are no pairs.
    """
    config = config or SsmConfig()
    counts = count_table(pair_table(positions, anchors, pairs, horizon, config), positions)
    return {
        "collision_pct": counts.collision_pct,
        "ttc_viol_pct": counts.ttc_violation_pct,
        "drac_exc_pct": counts.drac_exceedance_pct,
        "collision_vehicle_pct": counts.collision_vehicle_pct,
    }


def graph_pairs(edge_pairs: Iterable[Tuple[int, int]], vehicles: Iterable[int]) -> List[Tuple[int, int]]:
    """Ordered (i, j) pairs from graph edges j -> i with both ends among `vehicles`."""
    keep = set(vehicles)
    return sorted((dst, src) for src, dst in edge_pairs if src in keep and dst in keep)


def all_pairs(vehicles: Iterable[int]) -> List[Tuple[int, int]]:
    ids = sorted(set(vehicles))
    return [(i, j) for i in ids for j in ids if i != j]


def write_pair_dump(frames: Sequence[Tuple[int, pd.DataFrame]], path) -> Path:
    """Write `PAIR i j horizon min_ttc max_drac min_dist` lines, grouped by anchor frame."""
    lines = []
    for frame, table in frames:
        lines.append(f"# frame {frame}")
        for row in table.itertuples(index=False):
            lines.append(f"PAIR {int(row.i)} {int(row.j)} {row.horizon} {float(row.min_ttc)!r} "
                         f"{float(row.max_drac)!r} {float(row.min_dist)!r}")
    path = Path(path)
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))
    return path
