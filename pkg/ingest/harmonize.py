"""
Dataset harmonization.

Stages run in a fixed order: parse -> convert_units -> resample_10hz (ute only)
-> offset_correct -> interpolate_lateral. No smoothing or filtering is applied
to any field (the optional quality filter only touches leader/follower links).
"""

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import pandas as pd

from core.config_manager import atomic_write_text
from core.errors import DataError, RowError
from core.logger import logger
from core.trajectory import (FREQUENCY_HZ, Dataset, Trajectory, VehicleState,
                             grid_frame)
from ingest.parser import UTE_COLUMNS, RawRecord, convert_units, parse_csv

MAX_LATERAL_GAP = 3
MAX_QUALITY_HEADWAY_M = 300.0


@dataclass
class HarmonizationReport:
    """Counts produced by one harmonize() run."""

    records_in: int = 0
    records_out: int = 0
    interpolated_gaps: int = 0
    dropped_trajectories: int = 0
    x_min_applied: Optional[float] = None
    filtered_links: int = 0
    dropped_vehicle_ids: List[int] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return asdict(self)


def _group_by_vehicle(records: Iterable[RawRecord]) -> Dict[int, List[RawRecord]]:
    groups: Dict[int, List[RawRecord]] = {}
    for r in records:
        groups.setdefault(r.vehicle_id, []).append(r)
    return groups


def resample_10hz(records: Sequence[RawRecord]) -> List[RawRecord]:
    """
    Map timestamps onto the 10 Hz grid.

    t~ = round(t * 10) / 10 and f = round(t~ * 10). When several raw records of a
    vehicle land on the same grid point, the one nearest in time is kept (ties go
    to the earlier raw timestamp). The kept record retains its full state.

    Returns:
        Records ordered by vehicle id then frame
    """
    out: List[RawRecord] = []
    for vid, group in sorted(_group_by_vehicle(records).items()):
        best: Dict[int, Tuple[float, float, RawRecord]] = {}
        for r in group:
            frame = grid_frame(r.t)
            t_grid = frame / FREQUENCY_HZ
            key = (abs(r.t - t_grid), r.t)
            if frame not in best or key < best[frame][:2]:
                best[frame] = (key[0], key[1], r)
        for frame in sorted(best):
            out.append(replace(best[frame][2], t=frame / FREQUENCY_HZ, frame=frame))
    return out


def offset_correct(records: Sequence[RawRecord]) -> Tuple[List[RawRecord], Optional[float]]:
    """
    Shift longitudinal positions so the dataset minimum becomes 0.

    Applied only when the dataset-wide minimum is negative.

    Returns:
        (corrected records, applied x_min or None)
    """
    if not records:
        return [], None
    x_min = min(r.x for r in records)
    if x_min >= 0:
        return list(records), None
    return [replace(r, x=r.x - x_min) for r in records], x_min


def interpolate_lateral(records: Sequence[RawRecord]) -> Tuple[Optional[List[RawRecord]], int]:
    """
    Fill short runs of missing lateral positions for one vehicle.

    Runs of at most three consecutive missing records between two observed values
    are linearly interpolated in frame index. Longer runs, or runs touching either
    end of the trajectory, exclude the whole trajectory.

    Args:
        records: One vehicle's records ordered by frame

    Returns:
        (filled records or None when excluded, number of interpolated runs)
    """
    filled = list(records)
    n = len(filled)
    gaps = 0
    i = 0
    while i < n:
        if filled[i].y is not None:
            i += 1
            continue
        start = i
        while i < n and filled[i].y is None:
            i += 1
        end = i  # first observed record after the run
        if start == 0 or end == n or end - start > MAX_LATERAL_GAP:
            return None, 0
        left, right = filled[start - 1], filled[end]
        f0, f1 = _frame_of(left), _frame_of(right)
        for k in range(start, end):
            w = (_frame_of(filled[k]) - f0) / (f1 - f0)
            filled[k] = replace(filled[k], y=left.y + (right.y - left.y) * w)
        gaps += 1
    return filled, gaps


def _frame_of(r: RawRecord) -> int:
    return r.frame if r.frame is not None else grid_frame(r.t)


def _quality_filter(groups: Dict[int, List[RawRecord]]) -> Tuple[Dict[int, List[RawRecord]], int]:
    """Drop links to vehicles absent at that frame and implausible headways."""
    present = {(vid, _frame_of(r)) for vid, rs in groups.items() for r in rs}
    filtered = 0
    out: Dict[int, List[RawRecord]] = {}
    for vid, rs in groups.items():
        kept = []
        for r in rs:
            f = _frame_of(r)
            leader = r.leader_id if r.leader_id is not None and (r.leader_id, f) in present else None
            follower = r.follower_id if r.follower_id is not None and (r.follower_id, f) in present else None
            headway = r.headway
            if leader is None or headway is None or not (0.0 < headway <= MAX_QUALITY_HEADWAY_M):
                headway = None
            changed = (leader, follower, headway) != (r.leader_id, r.follower_id, r.headway)
            filtered += int(changed)
            kept.append(replace(r, leader_id=leader, follower_id=follower, headway=headway) if changed else r)
        out[vid] = kept
    return out, filtered


def _to_states(records: List[RawRecord], lane_max: int, derive_flag: bool) -> List[VehicleState]:
    states = []
    prev_lane = None
    for r in records:
        if derive_flag:
            flag = int(prev_lane is not None and r.lane_id != prev_lane)
        else:
            flag = int(r.lane_change_flag or 0)
        prev_lane = r.lane_id
        if r.lane_id > lane_max:
            raise RowError(f"Lane id {r.lane_id} exceeds lane_max {lane_max}", line=r.line)
        try:
            states.append(VehicleState(
                vehicle_id=r.vehicle_id,
                frame=_frame_of(r),
                t=r.t,
                x=r.x,
                y=r.y,
                v=r.v,
                a=r.a,
                lane_id=r.lane_id,
                lane_norm=r.lane_id / lane_max,
                lane_change_flag=flag,
                leader_id=r.leader_id,
                follower_id=r.follower_id,
                space_headway=r.headway,
            ))
        except ValueError as e:
            raise RowError(str(e), line=r.line)
    return states


def harmonize(path, schema: str, lane_max: int, merge_lane_ids: Iterable[int] = (),
              source_tag: str = "synthetic", quality_filter: bool = False,
              threads: int = 1) -> Tuple[Dataset, HarmonizationReport]:
    """
    Run the full harmonization pipeline on one file.

    Args:
        path: Canonical CSV
        schema: 'ngsim' or 'ute'
        lane_max: Highest lane id of the site (from config)
        merge_lane_ids: Auxiliary/on-ramp lane ids (from config)
        source_tag: Dataset tag recorded on the result
        quality_filter: Drop invalid leader/follower links (off = raw protocol)
        threads: Worker cap for per-vehicle interpolation

    Returns:
        (10 Hz SI Dataset, HarmonizationReport)
    """
    if lane_max < 1:
        raise DataError(f"lane_max must be >= 1, got {lane_max}")

    report = HarmonizationReport()
    records = parse_csv(path, schema)
    report.records_in = len(records)

    records = convert_units(records)
    if schema == "ute":
        records = resample_10hz(records)
    else:
        records = [replace(r, frame=grid_frame(r.t)) for r in records]

    records, report.x_min_applied = offset_correct(records)

    groups = {vid: sorted(rs, key=_frame_of) for vid, rs in sorted(_group_by_vehicle(records).items())}
    for vid, rs in groups.items():
        frames = [_frame_of(r) for r in rs]
        if len(set(frames)) != len(frames):
            raise DataError(f"Vehicle {vid} has several records on one frame in {Path(path).name}")

    vids = list(groups)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(interpolate_lateral, [groups[v] for v in vids]))
    else:
        results = [interpolate_lateral(groups[v]) for v in vids]

    kept: Dict[int, List[RawRecord]] = {}
    for vid, (filled, gaps) in zip(vids, results):
        if filled is None:
            report.dropped_trajectories += 1
            report.dropped_vehicle_ids.append(vid)
            logger.warning(f"[Ingest] Trajectory {vid} excluded: lateral gap longer than "
                           f"{MAX_LATERAL_GAP} frames or at a boundary")
            continue
        report.interpolated_gaps += gaps
        kept[vid] = filled

    if quality_filter:
        kept, report.filtered_links = _quality_filter(kept)

    trajectories = {
        vid: Trajectory(vid, tuple(_to_states(rs, lane_max, derive_flag=(schema == "ngsim"))))
        for vid, rs in kept.items()
    }
    dataset = Dataset(source_tag=source_tag, lane_max=lane_max, merge_lane_ids=frozenset(merge_lane_ids),
                      trajectories=trajectories)
    report.records_out = dataset.num_records()

    logger.info(f"[Ingest] {Path(path).name}: {report.records_in} -> {report.records_out} records, "
                f"{report.interpolated_gaps} gaps interpolated, {report.dropped_trajectories} dropped")
    return dataset, report


def write_canonical_csv(dataset: Dataset, path) -> Path:
    """
    Write a harmonized dataset in the ute canonical schema plus its sidecar metadata.

    Re-harmonizing the written file reproduces the dataset.
    """
    rows = [
        (s.vehicle_id, s.t, s.x, s.y, s.v, s.a, s.lane_id, s.leader_id, s.follower_id,
         s.space_headway, s.lane_change_flag)
        for vid in dataset.vehicle_ids for s in dataset.trajectories[vid].states
    ]
    df = pd.DataFrame(rows, columns=UTE_COLUMNS)
    for column in ("leader_id", "follower_id"):
        df[column] = df[column].astype("Int64")
    path = Path(path)
    atomic_write_text(path, df.to_csv(index=False, lineterminator="\n"))
    write_metadata(path, dataset.lane_max, dataset.merge_lane_ids, dataset.source_tag)
    return path


def metadata_path(csv_path) -> Path:
    csv_path = Path(csv_path)
    return csv_path.with_name(csv_path.stem + ".meta.json")


def write_metadata(csv_path, lane_max: int, merge_lane_ids: Iterable[int], source_tag: str) -> Path:
    """Sidecar metadata consumed by the config layer."""
    meta = {"lane_max": int(lane_max), "merge_lane_ids": sorted(int(v) for v in merge_lane_ids),
            "source_tag": source_tag}
    path = metadata_path(csv_path)
    atomic_write_text(path, json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_harmonized(csv_path, threads: int = 1) -> Dataset:
    """Load a file written by write_canonical_csv (harmonize is idempotent on it)."""
    meta_file = metadata_path(csv_path)
    if not Path(csv_path).exists() or not meta_file.exists():
        raise DataError(f"Harmonized dataset not found: {csv_path} (run 'ingest' first)")
    with open(meta_file, "r", encoding="utf-8") as f:
        meta = json.load(f)
    dataset, _ = harmonize(csv_path, "ute", meta["lane_max"], meta["merge_lane_ids"],
                           source_tag=meta["source_tag"], threads=threads)
    return dataset
