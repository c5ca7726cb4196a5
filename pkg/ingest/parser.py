"""Canonical CSV parsing for NGSIM-style and UTE-style trajectory exports."""

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from core.errors import DataError, RowError, SchemaError
from core.logger import logger

# Feet to meters
KAPPA = 0.3048

NGSIM_COLUMNS = [
    "Vehicle_ID", "Frame_ID", "Global_Time_s", "Local_X_ft", "Local_Y_ft",
    "v_Vel_fps", "v_Acc_fpss", "Lane_ID", "Preceding", "Following", "Space_Headway_ft",
]

UTE_COLUMNS = [
    "track_id", "timestamp_s", "longitudinal_m", "lateral_m", "speed_ms", "accel_ms2",
    "lane_id", "leader_id", "follower_id", "leader_distance_m", "lane_change_flag",
]

# Columns that may be left empty, per schema
_OPTIONAL = {
    "ngsim": {"Local_X_ft", "Space_Headway_ft"},
    "ute": {"lateral_m", "leader_id", "follower_id", "leader_distance_m", "lane_change_flag"},
}

_INTEGER = {
    "ngsim": {"Vehicle_ID", "Frame_ID", "Lane_ID", "Preceding", "Following"},
    "ute": {"track_id", "lane_id", "leader_id", "follower_id", "lane_change_flag"},
}

SCHEMA_COLUMNS = {"ngsim": NGSIM_COLUMNS, "ute": UTE_COLUMNS}


@dataclass(frozen=True)
class RawRecord:
    """
    One parsed data row.

    Units follow the schema until convert_units runs (feet for ngsim, meters for ute);
    `si` tells which. x is longitudinal, y lateral (None when missing).
    """

    schema: str
    line: int
    vehicle_id: int
    t: float
    x: float
    y: Optional[float]
    v: float
    a: float
    lane_id: int
    leader_id: Optional[int] = None
    follower_id: Optional[int] = None
    headway: Optional[float] = None
    lane_change_flag: Optional[int] = None
    frame: Optional[int] = None
    si: bool = False


def _numeric_column(df: pd.DataFrame, column: str, schema: str, lines: np.ndarray) -> np.ndarray:
    """Parse one string column, raising RowError (with the file line) on the first bad cell."""
    text = df[column].astype(str).str.strip()
    values = pd.to_numeric(text, errors="coerce")
    empty = text == ""
    bad = values.isna() & ~empty
    if bad.any():
        idx = int(np.flatnonzero(bad.to_numpy())[0])
        raise RowError(f"Non-numeric value '{text.iloc[idx]}'", line=int(lines[idx]), column=column)
    if column not in _OPTIONAL[schema] and empty.any():
        idx = int(np.flatnonzero(empty.to_numpy())[0])
        raise RowError("Missing required value", line=int(lines[idx]), column=column)
    arr = values.to_numpy(dtype=np.float64)
    infinite = np.isinf(arr)
    if infinite.any():
        idx = int(np.flatnonzero(infinite)[0])
        raise RowError(f"Non-finite value '{text.iloc[idx]}'", line=int(lines[idx]), column=column)
    if column in _INTEGER[schema]:
        finite = ~np.isnan(arr)
        frac = finite & (arr != np.round(arr))
        if frac.any():
            idx = int(np.flatnonzero(frac)[0])
            raise RowError(f"Expected integer, got '{text.iloc[idx]}'", line=int(lines[idx]), column=column)
    return arr



def _opt_int(value: float, none_value: Optional[int] = None) -> Optional[int]:
    if np.isnan(value):
        return None
    ivalue = int(value)
    return None if none_value is not None and ivalue == none_value else ivalue


def _opt_float(value: float) -> Optional[float]:
    return None if np.isnan(value) else float(value)


def parse_csv(path, schema: str) -> List[RawRecord]:
    """
    Parse a canonical CSV file.

    Args:
        path: CSV file (header required)
        schema: 'ngsim' or 'ute'

    Returns:
        One RawRecord per data row, in file order
    """
    if schema not in SCHEMA_COLUMNS:
        raise SchemaError(f"Unknown schema '{schema}'")
    path = Path(path)
    if not path.exists():
        raise DataError(f"File not found: {path}")

    # blank lines are kept while reading so row positions map back to file lines
    df = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True, skip_blank_lines=False)
    header = [c.strip() for c in df.columns]
    df.columns = header
    for column in SCHEMA_COLUMNS[schema]:
        if column not in header:
            raise SchemaError(f"{path.name} does not match the {schema} schema", column=column)

    df = df.fillna("")
    blank = (np.char.strip(df.to_numpy(dtype=str)) == "").all(axis=1)
    lines = np.arange(len(df))[~blank] + 2
    df = df[~blank].reset_index(drop=True)

    cols: Dict[str, np.ndarray] = {c: _numeric_column(df, c, schema, lines) for c in SCHEMA_COLUMNS[schema]}

    records: List[RawRecord] = []

    if schema == "ngsim":
        for i in range(len(df)):
            preceding = _opt_int(cols["Preceding"][i], none_value=0)
            records.append(RawRecord(
                schema="ngsim",
                line=int(lines[i]),
                vehicle_id=int(cols["Vehicle_ID"][i]),
                frame=int(cols["Frame_ID"][i]),
                t=float(cols["Global_Time_s"][i]),
                # NGSIM convention: Local_Y runs along the road, Local_X across it
                x=float(cols["Local_Y_ft"][i]),
                y=_opt_float(cols["Local_X_ft"][i]),
                v=float(cols["v_Vel_fps"][i]),
                a=float(cols["v_Acc_fpss"][i]),
                lane_id=int(cols["Lane_ID"][i]),
                leader_id=preceding,
                follower_id=_opt_int(cols["Following"][i], none_value=0),
                # Preceding = 0 means no leader; its headway carries no distance
                headway=_opt_float(cols["Space_Headway_ft"][i]) if preceding is not None else None,
            ))
    else:
        for i in range(len(df)):
            flag = _opt_int(cols["lane_change_flag"][i])
            records.append(RawRecord(
                schema="ute",
                line=int(lines[i]),
                vehicle_id=int(cols["track_id"][i]),
                t=float(cols["timestamp_s"][i]),
                x=float(cols["longitudinal_m"][i]),
                y=_opt_float(cols["lateral_m"][i]),
                v=float(cols["speed_ms"][i]),
                a=float(cols["accel_ms2"][i]),
                lane_id=int(cols["lane_id"][i]),
                leader_id=_opt_int(cols["leader_id"][i]),
                follower_id=_opt_int(cols["follower_id"][i]),
                headway=_opt_float(cols["leader_distance_m"][i]),
                lane_change_flag=0 if flag is None else flag,
                si=True,
            ))

    logger.info(f"[Ingest] Parsed {len(records)} {schema} records from {path.name}")
    return records


def convert_units(records: Sequence[RawRecord]) -> List[RawRecord]:
    """
    Convert NGSIM feet to meters (positions, speeds, accelerations, headways).

    UTE records, already in SI units, pass through unchanged.
    """
    if not records:
        return []
    schema = records[0].schema
    if any(r.schema != schema for r in records):
        raise SchemaError("Cannot convert a record list that mixes schemas")

    out: List[RawRecord] = []
    for r in records:
        if r.si:
            out.append(r)
            continue
        out.append(replace(
            r,
            x=r.x * KAPPA,
            y=None if r.y is None else r.y * KAPPA,
            v=r.v * KAPPA,
            a=r.a * KAPPA,
            headway=None if r.headway is None else r.headway * KAPPA,
            si=True,
        ))
    return out
