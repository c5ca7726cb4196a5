"""
Table-style metric reports and plot-ready CSV exports.

The bundled reference table holds published values for side-by-side display only;
nothing in this module computes or alters them.
"""

from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import pandas as pd

from core.config_manager import atomic_write_text
from core.errors import DataError
from core.logger import logger

TABLE_COLUMNS = ["horizon", "setting", "ade_m", "fde_m", "collision_pct", "ttc_viol_pct", "drac_exc_pct"]
EXTRA_COLUMNS = ["collision_vehicle_pct", "n_samples", "n_pairs"]
SETTING_ORDER = ["pretrain-test", "zero-shot", "fine-tuned", "fine-tuned-val", "constant-velocity"]
HORIZON_ORDER = ["1s", "3s", "5s"]
REFERENCE_SOURCE = "published"
COMPUTED_SOURCE = "computed"


@dataclass
class MetricsRow:
    """One horizon of one evaluation setting."""

    horizon: str
    setting: str
    ade_m: Optional[float]
    fde_m: Optional[float]
    collision_pct: Optional[float]
    ttc_viol_pct: Optional[float]
    drac_exc_pct: Optional[float]
    collision_vehicle_pct: Optional[float] = None
    n_samples: int = 0
    n_pairs: int = 0

    def __post_init__(self):
        for name in ("collision_pct", "ttc_viol_pct", "drac_exc_pct", "collision_vehicle_pct"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 100.0:
                raise ValueError(f"{name} = {value} outside [0, 100]")
        for name in ("ade_m", "fde_m"):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise ValueError(f"{name} must be nonnegative")


# A setting's report: one row per horizon
MetricsReport = List[MetricsRow]


def _frame(rows: Sequence[MetricsRow]) -> pd.DataFrame:
    return pd.DataFrame([asdict(r) for r in rows], columns=[f.name for f in fields(MetricsRow)])


def _write_csv(df: pd.DataFrame, path) -> Path:
    path = Path(path)
    atomic_write_text(path, df.to_csv(index=False, lineterminator="\n"))
    return path


def emit_report(reports: MetricsReport, path) -> Path:
    """Write the results table; an empty list gives a header-only file."""
    df = _frame(reports)[TABLE_COLUMNS + EXTRA_COLUMNS]
    path = _write_csv(df, path)
    logger.info(f"[Report] Wrote {len(df)} rows to {path}")
    return path


def read_metrics(path) -> List[MetricsRow]:
    """Load rows written by emit_report."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"Metrics file not found: {path}")
    df = pd.read_csv(path)
    rows = []
    for record in df.to_dict("records"):
        clean = {k: (None if pd.isna(v) else v) for k, v in record.items()}
        clean["horizon"] = str(clean["horizon"])
        clean["setting"] = str(clean["setting"])
        clean["n_samples"] = int(clean.get("n_samples") or 0)
        clean["n_pairs"] = int(clean.get("n_pairs") or 0)
        rows.append(MetricsRow(**{f.name: clean.get(f.name) for f in fields(MetricsRow)}))
    return rows


def load_reference(path) -> pd.DataFrame:
    """The bundled published table (columns TABLE_COLUMNS plus `source`)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"Reference table not found: {path}")
    df = pd.read_csv(path)
    missing = [c for c in TABLE_COLUMNS if c not in df.columns]
    if missing:
        raise DataError(f"Reference table {path.name} lacks columns {missing}")
    df["source"] = REFERENCE_SOURCE
    return df[TABLE_COLUMNS + ["source"]]


def sort_rows(rows: Iterable[MetricsRow]) -> List[MetricsRow]:
    def key(r: MetricsRow):
        h = HORIZON_ORDER.index(r.horizon) if r.horizon in HORIZON_ORDER else len(HORIZON_ORDER)
        s = SETTING_ORDER.index(r.setting) if r.setting in SETTING_ORDER else len(SETTING_ORDER)
        return (h, s, r.setting)
    return sorted(rows, key=key)


def side_by_side(rows: Sequence[MetricsRow], reference: pd.DataFrame) -> pd.DataFrame:
    computed = _frame(rows)[TABLE_COLUMNS].copy()
    computed["source"] = COMPUTED_SOURCE
    both = pd.concat([computed, reference], ignore_index=True)
    both["_h"] = both["horizon"].map(lambda h: HORIZON_ORDER.index(h) if h in HORIZON_ORDER else 99)
    both["_s"] = both["setting"].map(lambda s: SETTING_ORDER.index(s) if s in SETTING_ORDER else 99)
    both = both.sort_values(["_h", "_s", "setting", "source"], kind="stable")
    return both.drop(columns=["_h", "_s"]).reset_index(drop=True)


def loss_curves(logs: Dict[str, Path]) -> pd.DataFrame:
    """Stack per-phase training logs with a `phase` column."""
    frames = []
    for phase, path in logs.items():
        if Path(path).exists():
            df = pd.read_csv(path)[["epoch", "train_loss", "val_loss", "lr"]]
            df.insert(0, "phase", phase)
            frames.append(df)
    if not frames:
        return pd.DataFrame(columns=["phase", "epoch", "train_loss", "val_loss", "lr"])
    return pd.concat(frames, ignore_index=True)


def write_report_bundle(rows: Sequence[MetricsRow], reference_path, out_dir, logs: Dict[str, Path]) -> Dict[str, Path]:
    """
    Write the results table and the plot-ready exports.

    Returns:
        name -> written path
    """
    out_dir = Path(out_dir)
    rows = sort_rows(rows)
    df = _frame(rows)
    written = {
        "results": emit_report(rows, out_dir / "results.csv"),
        "displacement_by_horizon": _write_csv(df[["setting", "horizon", "ade_m", "fde_m", "n_samples"]],
                                              out_dir / "displacement_by_horizon.csv"),
        "ssm_by_horizon": _write_csv(df[["setting", "horizon", "collision_pct", "ttc_viol_pct", "drac_exc_pct",
                                         "collision_vehicle_pct", "n_pairs"]],
                                     out_dir / "ssm_by_horizon.csv"),
        "loss_curves": _write_csv(loss_curves(logs), out_dir / "loss_curves.csv"),
    }
    if reference_path is not None and Path(reference_path).exists():
        written["results_side_by_side"] = _write_csv(side_by_side(rows, load_reference(reference_path)),
                                                    out_dir / "results_side_by_side.csv")
    else:
        logger.warning(f"[Report] Reference table not found ({reference_path}); skipping side-by-side view")
    return written
