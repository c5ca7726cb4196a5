"""Shared fixtures: hand-built trajectories, a small simulated dataset and tiny model configs."""

import os
from pathlib import Path

import numpy as np
import pytest

os.environ.setdefault("LAGAT_QUIET", "true")

from core.trajectory import Dataset, Trajectory, VehicleState  # noqa: E402
from model.network import ModelConfig  # noqa: E402

REPO_ROOT = Path(__file__).resolve().parent


def _state(vid, frame, x, y=1.85, v=10.0, lane=1, lane_max=3, **kw):
    return VehicleState(vehicle_id=vid, frame=frame, t=frame / 10.0, x=x, y=y, v=v, a=kw.pop("a", 0.0),
                        lane_id=lane, lane_norm=lane / lane_max, **kw)


@pytest.fixture
def make_state():
    """VehicleState factory with road defaults (10 m/s in lane 1)."""
    return _state


@pytest.fixture
def make_trajectory():
    """Constant-speed trajectory over the given frames."""

    def build(vid, frames, x0=0.0, v=10.0, lane=1, y=None, lane_max=3, **kw):
        y = (lane - 0.5) * 3.7 if y is None else y
        states = [_state(vid, f, x0 + v * f / 10.0, y=y, v=v, lane=lane, lane_max=lane_max, **kw) for f in frames]
        return Trajectory(vid, tuple(states))

    return build


@pytest.fixture
def make_dataset(make_trajectory):
    """Dataset of constant-speed vehicles: specs are (vid, x0, v, lane) tuples over a shared frame range."""

    def build(specs, frames=range(100), lane_max=3, merge_lane_ids=(), source_tag="synthetic"):
        trajectories = {vid: make_trajectory(vid, frames, x0, v, lane, lane_max=lane_max)
                        for vid, x0, v, lane in specs}
        return Dataset(source_tag=source_tag, lane_max=lane_max, merge_lane_ids=frozenset(merge_lane_ids),
                       trajectories=trajectories)

    return build


@pytest.fixture(scope="session")
def sim_dataset(tmp_path_factory):
    """12 IDM vehicles on three lanes with an on-ramp, 12 s at 10 Hz, harmonized."""
    from synth.simulator import ScenarioSpec, generate

    spec = ScenarioSpec(lanes=3, merge_lane_ids=(3,), vehicles=12, duration_s=12.0, seed=7)
    return generate(spec, tmp_path_factory.mktemp("sim") / "scene.csv")


@pytest.fixture
def tiny_config():
    """Small network with the real horizons."""
    return ModelConfig(lstm_hidden=4, embed_dim=8, heads=2, head_dim=4, decoder_hidden=8)


@pytest.fixture
def micro_config():
    """Very small network with short horizons for finite-difference checks."""
    return ModelConfig(lstm_hidden=3, embed_dim=4, heads=2, head_dim=2, decoder_hidden=5,
                       lane_bias_init=(0.1, -0.2, 0.3, 1.0), horizons=(("1s", 2), ("3s", 3)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
