"""CSV parsing and the harmonization pipeline."""

import pandas as pd
import pytest

from core.errors import DataError, RowError, SchemaError
from ingest.harmonize import (harmonize, interpolate_lateral, load_harmonized, metadata_path,
                              offset_correct, resample_10hz, write_canonical_csv)
from ingest.parser import KAPPA, NGSIM_COLUMNS, UTE_COLUMNS, RawRecord, convert_units, parse_csv


def _ute_rows(vid, n, x0=0.0, v=10.0, lane=1, dt=0.1, lateral=1.85, **kw):
    rows = []
    for k in range(n):
        rows.append({
            "track_id": vid, "timestamp_s": round(k * dt, 6), "longitudinal_m": x0 + v * k * dt,
            "lateral_m": lateral, "speed_ms": v, "accel_ms2": 0.0, "lane_id": lane,
            "leader_id": kw.get("leader_id", ""), "follower_id": kw.get("follower_id", ""),
            "leader_distance_m": kw.get("leader_distance_m", ""), "lane_change_flag": 0,
        })
    return rows


def _write(path, rows, columns):
    pd.DataFrame(rows, columns=columns).to_csv(path, index=False, lineterminator="\n")
    return path


def _raw(vid, frame, x=0.0, y=1.0):
    return RawRecord(schema="ute", line=frame + 2, vehicle_id=vid, t=frame / 10.0, x=x, y=y, v=10.0, a=0.0,
                     lane_id=1, frame=frame, si=True)


def test_parse_ute(tmp_path):
    path = _write(tmp_path / "a.csv", _ute_rows(1, 3) + _ute_rows(2, 3, x0=20.0), UTE_COLUMNS)
    records = parse_csv(path, "ute")
    assert len(records) == 6
    assert records[3].vehicle_id == 2
    assert records[3].x == pytest.approx(20.0)
    assert records[0].leader_id is None and records[0].si


def test_missing_column_names_it(tmp_path):
    columns = [c for c in UTE_COLUMNS if c != "speed_ms"]
    rows = [{k: v for k, v in r.items() if k != "speed_ms"} for r in _ute_rows(1, 2)]
    path = _write(tmp_path / "a.csv", rows, columns)
    with pytest.raises(SchemaError) as err:
        parse_csv(path, "ute")
    assert err.value.column == "speed_ms"
    assert "speed_ms" in str(err.value)


def test_non_numeric_field_reports_line(tmp_path):
    rows = _ute_rows(1, 3)
    rows[1]["speed_ms"] = "fast"
    path = _write(tmp_path / "a.csv", rows, UTE_COLUMNS)
    with pytest.raises(RowError) as err:
        parse_csv(path, "ute")
    assert err.value.line == 3
    assert err.value.column == "speed_ms"


@pytest.mark.parametrize("value", ["inf", "-inf"])
def test_non_finite_field_rejected(tmp_path, value):
    rows = _ute_rows(1, 3)
    rows[2]["accel_ms2"] = value
    path = _write(tmp_path / "a.csv", rows, UTE_COLUMNS)
    with pytest.raises(RowError) as err:
        parse_csv(path, "ute")
    assert err.value.line == 4
    assert err.value.column == "accel_ms2"


def test_line_numbers_count_blank_lines(tmp_path):
    path = _write(tmp_path / "a.csv", _ute_rows(1, 3), UTE_COLUMNS)
    lines = path.read_text().splitlines()
    # header, row, blank, blank, row, row
    path.write_text("\n".join(lines[:2] + ["", ""] + lines[2:]) + "\n")
    records = parse_csv(path, "ute")
    assert [r.line for r in records] == [2, 5, 6]

    bad = lines[3].replace(",10.0,", ",fast,", 1)
    path.write_text("\n".join(lines[:2] + [""] + [lines[2], bad]) + "\n")
    with pytest.raises(RowError) as err:
        parse_csv(path, "ute")
    assert err.value.line == 5
    assert err.value.column == "speed_ms"


def test_missing_file_is_data_error(tmp_path):
    with pytest.raises(DataError):
        parse_csv(tmp_path / "absent.csv", "ute")


def test_ngsim_units_axes_and_missing_leader(tmp_path):
    rows = []
    for k in range(3):
        rows.append({
            "Vehicle_ID": 7, "Frame_ID": k + 1, "Global_Time_s": k / 10.0, "Local_X_ft": 6.0,
            "Local_Y_ft": 100.0 + 10.0 * k, "v_Vel_fps": 50.0, "v_Acc_fpss": 1.0, "Lane_ID": 2,
            "Preceding": 0, "Following": 0, "Space_Headway_ft": 0.0,
        })
    path = _write(tmp_path / "n.csv", rows, NGSIM_COLUMNS)
    records = convert_units(parse_csv(path, "ngsim"))
    first = records[0]
    assert first.x == pytest.approx(100.0 * KAPPA)
    assert first.y == pytest.approx(6.0 * KAPPA)
    assert first.v == pytest.approx(50.0 * KAPPA)
    assert first.leader_id is None and first.headway is None and first.follower_id is None


def test_ngsim_lane_change_flag_derived(tmp_path):
    rows = []
    for k, lane in enumerate([1, 1, 2, 2]):
        rows.append({
            "Vehicle_ID": 1, "Frame_ID": k, "Global_Time_s": k / 10.0, "Local_X_ft": 6.0,
            "Local_Y_ft": 10.0 * k, "v_Vel_fps": 30.0, "v_Acc_fpss": 0.0, "Lane_ID": lane,
            "Preceding": 0, "Following": 0, "Space_Headway_ft": 0.0,
        })
    path = _write(tmp_path / "n.csv", rows, NGSIM_COLUMNS)
    dataset, _ = harmonize(path, "ngsim", lane_max=3, source_tag="ngsim_us101")
    flags = [s.lane_change_flag for s in dataset.trajectories[1].states]
    assert flags == [0, 0, 1, 0]


def test_resample_keeps_nearest_record():
    records = [
        RawRecord("ute", 2, 1, 0.00, 0.0, 1.0, 10.0, 0.0, 1, si=True),
        RawRecord("ute", 3, 1, 0.04, 0.4, 1.0, 10.0, 0.0, 1, si=True),
        RawRecord("ute", 4, 1, 0.09, 0.9, 1.0, 10.0, 0.0, 1, si=True),
        RawRecord("ute", 5, 1, 0.13, 1.3, 1.0, 10.0, 0.0, 1, si=True),
    ]
    out = resample_10hz(records)
    assert [r.frame for r in out] == [0, 1]
    assert [r.x for r in out] == [0.0, 0.9]
    assert out[1].t == pytest.approx(0.1)


def test_offset_correct_only_when_negative():
    records = [_raw(1, 0, x=-5.0), _raw(1, 1, x=3.0)]
    shifted, x_min = offset_correct(records)
    assert x_min == -5.0
    assert [r.x for r in shifted] == [0.0, 8.0]
    same, none = offset_correct([_raw(1, 0, x=2.0)])
    assert none is None and same[0].x == 2.0


def test_interpolate_short_gap():
    records = [_raw(1, 0, y=0.0), _raw(1, 1, y=None), _raw(1, 2, y=None), _raw(1, 3, y=3.0)]
    filled, gaps = interpolate_lateral(records)
    assert gaps == 1
    assert [r.y for r in filled] == pytest.approx([0.0, 1.0, 2.0, 3.0])


def test_interpolate_long_gap_excludes_trajectory():
    records = [_raw(1, 0, y=0.0)] + [_raw(1, f, y=None) for f in range(1, 5)] + [_raw(1, 5, y=5.0)]
    filled, gaps = interpolate_lateral(records)
    assert filled is None and gaps == 0


def test_interpolate_boundary_gap_excludes_trajectory():
    filled, _ = interpolate_lateral([_raw(1, 0, y=None), _raw(1, 1, y=1.0)])
    assert filled is None


def test_harmonize_ute_at_24_fps(tmp_path):
    path = _write(tmp_path / "u.csv", _ute_rows(1, 48, dt=1 / 24) + _ute_rows(2, 48, x0=-10.0, dt=1 / 24),
                  UTE_COLUMNS)
    dataset, report = harmonize(path, "ute", lane_max=2, merge_lane_ids=[2], source_tag="ute_w1")
    assert report.records_in == 96
    assert report.x_min_applied == pytest.approx(-10.0)
    frames = dataset.trajectories[1].frames
    assert frames == list(range(frames[0], frames[-1] + 1))
    assert min(s.x for t in dataset.trajectories.values() for s in t.states) == pytest.approx(0.0)
    assert dataset.merge_lane_ids == frozenset({2})


def test_harmonize_drops_trajectory_with_long_lateral_gap(tmp_path):
    rows = _ute_rows(1, 10) + _ute_rows(2, 10, x0=30.0)
    for r in rows[12:17]:
        r["lateral_m"] = ""
    path = _write(tmp_path / "u.csv", rows, UTE_COLUMNS)
    dataset, report = harmonize(path, "ute", lane_max=1)
    assert dataset.vehicle_ids == [1]
    assert report.dropped_trajectories == 1
    assert report.dropped_vehicle_ids == [2]


def test_lane_above_lane_max_is_row_error(tmp_path):
    path = _write(tmp_path / "u.csv", _ute_rows(1, 3, lane=4), UTE_COLUMNS)
    with pytest.raises(RowError):
        harmonize(path, "ute", lane_max=3)


def test_quality_filter_drops_dangling_links(tmp_path):
    rows = _ute_rows(1, 3, leader_id=2, leader_distance_m=15.0) + _ute_rows(3, 3, x0=50.0, leader_id=4,
                                                                               leader_distance_m=20.0)
    path = _write(tmp_path / "u.csv", rows, UTE_COLUMNS)
    raw, _ = harmonize(path, "ute", lane_max=1)
    assert raw.trajectories[1].states[0].leader_id == 2
    filtered, report = harmonize(path, "ute", lane_max=1, quality_filter=True)
    assert report.filtered_links == 6
    assert filtered.trajectories[1].states[0].leader_id is None
    assert filtered.trajectories[1].states[0].space_headway is None


def test_canonical_csv_reloads_to_same_dataset(tmp_path):
    rows = _ute_rows(1, 20, leader_id=2, leader_distance_m=25.0) + _ute_rows(2, 20, x0=25.0, lane=2)
    dataset, _ = harmonize(_write(tmp_path / "u.csv", rows, UTE_COLUMNS), "ute", lane_max=2,
                           merge_lane_ids=[2], source_tag="ute_w2")
    out = write_canonical_csv(dataset, tmp_path / "h" / "u.csv")
    assert metadata_path(out).exists()
    again = load_harmonized(out)
    assert again.source_tag == "ute_w2"
    assert again.merge_lane_ids == dataset.merge_lane_ids
    for vid in dataset.vehicle_ids:
        assert again.trajectories[vid].states == dataset.trajectories[vid].states


def test_load_harmonized_requires_ingest(tmp_path):
    with pytest.raises(DataError):
        load_harmonized(tmp_path / "missing.csv")
