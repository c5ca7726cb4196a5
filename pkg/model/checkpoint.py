"""
Checkpoint container.

Layout:
    LAGATCKPT v1\\n
    MANIFEST <n>\\n
    <n bytes of sorted-key JSON>
    <tensors as little-endian float32, in manifest order>
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np

from core.config_manager import atomic_write_bytes
from core.errors import CheckpointError
from core.logger import logger
from model.attention import LANE_BIAS
from model.inputs import FeatureScaler
from model.network import LaneAwareGAT, ModelConfig

MAGIC = b"LAGATCKPT v1\n"
_DTYPE = np.dtype("<f4")


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: Dict[str, np.ndarray]
    frozen: Dict[str, bool]
    scaler: FeatureScaler
    phase: str = "pretrain"
    best_epoch: Optional[int] = None
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def lane_bias(self) -> np.ndarray:
        return self.tensors[LANE_BIAS]


def checkpoint_bytes(model: LaneAwareGAT, scaler: FeatureScaler, phase: str,
                     best_epoch: Optional[int] = None, extra: Optional[Dict[str, Any]] = None) -> bytes:
    """Serialize model parameters, freeze flags and scaler statistics."""
    store = model.store
    arrays = [np.ascontiguousarray(store[n], dtype=_DTYPE) for n in store.names()]
    manifest = {
        "tensors": [
            {"name": n, "shape": list(a.shape), "frozen": bool(store.is_frozen(n))}
            for n, a in zip(store.names(), arrays)
        ],
        "scaler": scaler.to_dict(),
        "config": model.config.to_dict(),
        "lambda": [float(v) for v in np.asarray(store[LANE_BIAS], dtype=_DTYPE)],
        "phase": phase,
        "best_epoch": best_epoch,
        "extra": extra or {},
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    return b"".join([MAGIC, f"MANIFEST {len(header)}\n".encode("ascii"), header] + [a.tobytes() for a in arrays])


def save_checkpoint(path, model: LaneAwareGAT, scaler: FeatureScaler, phase: str,
                    best_epoch: Optional[int] = None, extra: Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    atomic_write_bytes(path, checkpoint_bytes(model, scaler, phase, best_epoch, extra))
    logger.info(f"[Checkpoint] Saved {phase} checkpoint to {path} (best epoch {best_epoch})")
    return path


def parse_checkpoint(payload: bytes, source: str = "<bytes>") -> Checkpoint:
    if not payload.startswith(MAGIC):
        raise CheckpointError(f"{source} is not a checkpoint (bad magic)")
    offset = len(MAGIC)
    line_end = payload.find(b"\n", offset)
    line = payload[offset:line_end].decode("ascii", errors="replace") if line_end >= 0 else ""
    parts = line.split()
    if len(parts) != 2 or parts[0] != "MANIFEST" or not parts[1].isdigit():
        raise CheckpointError(f"{source}: malformed manifest line")
    start = line_end + 1
    end = start + int(parts[1])
    try:
        manifest = json.loads(payload[start:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{source}: unreadable manifest ({e})")

    tensors: Dict[str, np.ndarray] = {}
    frozen: Dict[str, bool] = {}
    cursor = end
    for entry in manifest["tensors"]:
        shape = tuple(int(s) for s in entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
        if cursor + nbytes > len(payload):
            raise CheckpointError(f"{source}: truncated tensor data for '{entry['name']}'")
        tensors[entry["name"]] = np.frombuffer(payload, dtype=_DTYPE, count=nbytes // _DTYPE.itemsize,
                                               offset=cursor).reshape(shape).astype(np.float64)
        frozen[entry["name"]] = bool(entry["frozen"])
        cursor += nbytes
    if cursor != len(payload):
        raise CheckpointError(f"{source}: {len(payload) - cursor} trailing bytes after tensor data")

    return Checkpoint(
        config=ModelConfig.from_dict(manifest["config"]),
        tensors=tensors,
        frozen=frozen,
        scaler=FeatureScaler.from_dict(manifest["scaler"]),
        phase=manifest.get("phase", "pretrain"),
        best_epoch=manifest.get("best_epoch"),
        extra=manifest.get("extra", {}),
    )


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    with open(path, "rb") as f:
        checkpoint = parse_checkpoint(f.read(), source=path.name)
    logger.info(f"[Checkpoint] Loaded {checkpoint.phase} checkpoint from {path}")
    return checkpoint


def _architecture(config: ModelConfig) -> Dict[str, Any]:
    payload = config.to_dict()
    # Initial values of trainable tensors do not constrain a restore
    payload.pop("lane_bias_init")
    return payload


def restore_model(checkpoint: Checkpoint, config: Optional[ModelConfig] = None,
                  keep_frozen: bool = True) -> LaneAwareGAT:
    """
    Rebuild a network from a checkpoint.

    Args:
        checkpoint: Parsed container
        config: Expected architecture; any dimension mismatch raises CheckpointError
        keep_frozen: Restore the stored freeze flags
    """
    if config is not None and _architecture(config) != _architecture(checkpoint.config):
        diff = sorted(k for k, v in _architecture(config).items() if _architecture(checkpoint.config).get(k) != v)
        raise CheckpointError(f"Checkpoint does not match the configured model: {', '.join(diff)}")
    model = LaneAwareGAT(checkpoint.config)
    names = set(model.store.names())
    if names != set(checkpoint.tensors):
        raise CheckpointError("Checkpoint tensor names do not match the model")
    try:
        model.store.load_state_dict(checkpoint.tensors)
    except ValueError as e:
        raise CheckpointError(str(e))
    if keep_frozen:
        for name, is_frozen in checkpoint.frozen.items():
            model.store.frozen[name] = is_frozen
    return model
