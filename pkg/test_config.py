"""Flat config parsing, dataset blocks and typed views."""

import json

import pytest

from core.config_manager import ConfigManager
from core.errors import ConfigError


def cfg(tmp_path, body, **kw):
    path = tmp_path / "c.cfg"
    path.write_text(body)
    return ConfigManager(str(path), environ=kw.pop("environ", {}), **kw)


def test_defaults_and_types(tmp_path):
    c = cfg(tmp_path, "seed = 7\nsplit_fractions = 0.8, 0.1, 0.1  # comment\ndump_pairs = yes\n")
    assert c["seed"] == 7
    assert c["split_fractions"] == [0.8, 0.1, 0.1]
    assert c["dump_pairs"] is True
    assert c["heads"] == 4
    assert c.output_dir == (tmp_path / "out").resolve()


def test_unknown_key_reports_line(tmp_path):
    with pytest.raises(ConfigError) as err:
        cfg(tmp_path, "seed = 1\n\nmystery = 2\n")
    assert err.value.key == "mystery" and err.value.line == 3


def test_duplicate_and_malformed(tmp_path):
    with pytest.raises(ConfigError):
        cfg(tmp_path, "seed = 1\nseed = 2\n")
    with pytest.raises(ConfigError) as err:
        cfg(tmp_path, "batch_size = many\n")
    assert err.value.key == "batch_size"
    with pytest.raises(ConfigError):
        cfg(tmp_path, "just words\n")


def test_choices_and_rmax(tmp_path):
    with pytest.raises(ConfigError):
        cfg(tmp_path, "attention_variant = transformer\n")
    with pytest.raises(ConfigError):
        cfg(tmp_path, "kinematic_prior = ca\n")
    assert cfg(tmp_path, "kinematic_prior = none\n").model_config().kinematic_prior == "none"
    with pytest.raises(ConfigError):
        cfg(tmp_path, "rmax = -3\n")
    assert cfg(tmp_path, "rmax = 45.5\n")["rmax"] == "45.5"


def test_seed_from_environment_and_overrides(tmp_path):
    c = cfg(tmp_path, "seed = 1\n", environ={"LAGAT_SEED": "99"}, overrides={"threads": 4})
    assert c["seed"] == 99 and c["threads"] == 4
    with pytest.raises(ConfigError):
        cfg(tmp_path, "seed = 1\n", overrides={"nonsense": 1})


def test_dataset_block_and_sidecar(tmp_path):
    (tmp_path / "d.meta.json").write_text(json.dumps({"lane_max": 4, "merge_lane_ids": [4], "source_tag": "ute_w1"}))
    c = cfg(tmp_path, "test_dataset = d\ndataset.d.path = d.csv\ndataset.d.schema = ute\n"
                      "dataset.d.source_tag = ute_w1\n")
    d = c.dataset("d")
    assert d.lane_max == 4 and d.merge_lane_ids == frozenset({4})
    assert d.path == (tmp_path / "d.csv").resolve()
    assert c.synth_targets() == []


def test_dataset_block_errors(tmp_path):
    with pytest.raises(ConfigError):
        cfg(tmp_path, "dataset.d.path = d.csv\n")
    with pytest.raises(ConfigError):
        cfg(tmp_path, "dataset.d.path = d.csv\ndataset.d.schema = highd\n")
    with pytest.raises(ConfigError):
        cfg(tmp_path, "dataset.d.path = d.csv\ndataset.d.schema = ute\ndataset.d.colour = red\n")
    with pytest.raises(ConfigError):
        cfg(tmp_path, "test_dataset = ghost\n")
    c = cfg(tmp_path, "dataset.d.path = d.csv\ndataset.d.schema = ute\n")
    with pytest.raises(ConfigError):
        c.dataset("d")


def test_ensure_under_output(tmp_path):
    c = cfg(tmp_path, "output_dir = run\n")
    assert c.ensure_under_output(tmp_path / "run" / "x.csv") == (tmp_path / "run" / "x.csv").resolve()
    with pytest.raises(ConfigError):
        c.ensure_under_output(tmp_path / "x.csv")


def test_state_round_trip(tmp_path):
    c = cfg(tmp_path, "output_dir = run\n")
    assert c.load_state("rmax.json") is None
    c.save_state("rmax.json", {"rmax": 42.0})
    assert c.load_state("rmax.json") == {"rmax": 42.0}


def test_typed_views(tmp_path):
    c = cfg(tmp_path, "embed_dim = 8\nheads = 2\nhead_dim = 4\nfinetune_split = 0.8, 0.2\nttc_threshold_s = 2.0\n")
    assert c.model_config().embed_dim == 8
    ft = c.train_config("finetune")
    assert ft.split_fractions == (0.8, 0.2, 0.0) and ft.freeze_encoder
    assert not c.train_config("pretrain").freeze_encoder
    assert c.ssm_config().ttc_threshold == 2.0
    with pytest.raises(ValueError):
        cfg(tmp_path, "embed_dim = 10\n").model_config()
