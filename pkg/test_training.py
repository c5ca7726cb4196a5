"""Optimizer, schedule, losses, sample construction, checkpoints and the two training phases."""

import numpy as np
import pandas as pd
import pytest

from core.errors import CheckpointError, DataError
from model.checkpoint import checkpoint_bytes, load_checkpoint, parse_checkpoint, restore_model, save_checkpoint
from model.inputs import FeatureScaler, scene_input
from model.network import ENCODER_PREFIX, LaneAwareGAT, ModelConfig
from model.params import ParamStore
from training.losses import LossBreakdown, ade_aux, ttc_penalty
from training.optimizer import AdamW, PlateauScheduler, clip_grad_norm, plateau_schedule
from training.samples import collect_specs, encode_sample, fit_scaler
from training.trainer import (LOG_COLUMNS, Trainer, TrainRunConfig, build_samples, run_finetune,
                              run_pretrain)

RMAX = 40.0


@pytest.fixture(scope="module")
def encoded(sim_dataset):
    specs = collect_specs(sim_dataset, sim_dataset.vehicle_ids, RMAX, step_sample=20)
    scaler = fit_scaler([sim_dataset], [sim_dataset.vehicle_ids], specs)
    return specs, scaler, [encode_sample(s, scaler) for s in specs]


def _store(**tensors):
    store = ParamStore()
    for name, value in tensors.items():
        store.add(name, np.asarray(value, dtype=float))
    return store


def test_adamw_single_step():
    store = _store(w=[1.0])
    store.grads["w"][:] = 0.5
    AdamW(store, lr=0.1, weight_decay=0.0).step()
    assert store["w"][0] == pytest.approx(0.9, abs=1e-6)

    store = _store(w=[1.0])
    store.grads["w"][:] = 0.5
    AdamW(store, lr=0.1, weight_decay=0.01).step()
    assert store["w"][0] == pytest.approx(0.899, abs=1e-6)


def test_clip_grad_norm_scales_trainable_only():
    store = _store(a=[0.0], b=[0.0])
    store.add("c", np.zeros(1), frozen=True)
    store.grads["a"][:] = 30.0
    store.grads["b"][:] = 40.0
    store.grads["c"][:] = 100.0
    assert clip_grad_norm(store, 5.0) == pytest.approx(50.0)
    assert store.grads["a"][0] == pytest.approx(3.0)
    assert store.grads["b"][0] == pytest.approx(4.0)
    assert store.grads["c"][0] == 100.0


def test_frozen_tensor_not_updated():
    store = _store(w=[1.0])
    store.add("f", np.array([2.0]), frozen=True)
    store.grads["w"][:] = 1.0
    store.grads["f"][:] = 1.0
    AdamW(store, lr=0.1).step()
    assert store["f"][0] == 2.0
    assert store["w"][0] < 1.0


@pytest.mark.parametrize("trace, reduced_at", [
    ([5, 4, 3, 2], []),
    ([5, 5, 5, 5], [4]),
    ([5, 4, 4, 4, 4], [5]),
])
def test_plateau_schedule(trace, reduced_at):
    lrs = plateau_schedule(trace, 1e-3, patience=3, factor=0.5)
    expected = [1e-3 * (0.5 if reduced_at and epoch >= reduced_at[0] else 1.0) for epoch in range(1, len(trace) + 1)]
    assert lrs == pytest.approx(expected)
    scheduler = PlateauScheduler(AdamW(_store(w=[1.0]), lr=1e-3), patience=3, factor=0.5)
    for loss in trace:
        scheduler.step(loss)
    assert scheduler.reductions == reduced_at


def test_plateau_schedule_counter_resets_after_reduction():
    lrs = plateau_schedule([1.0, 0.9, 0.95, 0.95, 0.95, 0.8], 1e-3, patience=3, factor=0.5)
    assert lrs == pytest.approx([1e-3, 1e-3, 1e-3, 1e-3, 5e-4, 5e-4])


def test_loss_breakdown_combined():
    loss = LossBreakdown(nll={"1s": 2.0, "3s": 4.0}, ade={"1s": 1.0, "3s": 1.0}, ade_weight=0.5)
    assert loss.combined == pytest.approx(3.5)
    assert (loss + loss).nll == {"1s": 4.0, "3s": 8.0}


def test_ade_aux():
    assert ade_aux([[0, 0], [3, 4]], [[0, 0], [0, 0]]) == pytest.approx(2.5)
    with pytest.raises(ValueError):
        ade_aux([[0, 0]], [[0, 0], [1, 1]])


def test_ttc_penalty_example():
    positions = np.zeros((2, 2, 2))
    positions[0, :, 0] = [2.0, 4.0]
    positions[1, :, 0] = [11.0, 12.0]
    anchors = np.array([[0.0, 0.0], [10.0, 0.0]])
    # follower closes at 10 m/s from 9 m then 8 m
    assert ttc_penalty(positions, anchors, [1], [0]) == pytest.approx(0.716667, abs=1e-6)
    assert ttc_penalty(positions, anchors, [], []) == 0.0


def test_collect_specs_order_and_windows(encoded, sim_dataset):
    specs, _, _ = encoded
    keys = [(s.vehicle_id, s.anchor_frame) for s in specs]
    assert keys == sorted(keys)
    assert {a for _, a in keys} == {29, 49, 69}
    assert len(specs) == 3 * len(sim_dataset.vehicle_ids)
    for s in specs:
        assert s.vehicle_id in s.graph
        assert s.targets["5s"].shape == (50, 2)


def test_fit_scaler_standardizes_training_nodes(encoded):
    _, scaler, samples = encoded
    assert (scaler.node_std > 0).all()
    assert np.isfinite(scaler.edge_mean).all()
    # lane_norm and the lane-change flag pass through unscaled
    hist = samples[0].inp.histories
    assert ((hist[..., 4] > 0) & (hist[..., 4] <= 1)).all()


def test_local_sample_matches_scene_forward(encoded, tiny_config):
    specs, scaler, samples = encoded
    model = LaneAwareGAT(tiny_config, seed=4)
    for spec, sample in list(zip(specs, samples))[::7]:
        local, _ = model.forward(sample.inp)
        scene, _ = model.forward(scene_input(spec.sequence, scaler, [spec.vehicle_id]))
        for h in model.horizons:
            np.testing.assert_allclose(local[h][0], scene[h][0], atol=1e-10)


def test_batch_loss_independent_of_micro_batch(encoded, tiny_config):
    _, _, samples = encoded
    batch = samples[:6]
    whole = Trainer(LaneAwareGAT(tiny_config, seed=2), TrainRunConfig(micro_batch=6)).evaluate(batch)
    split = Trainer(LaneAwareGAT(tiny_config, seed=2), TrainRunConfig(micro_batch=1)).evaluate(batch)
    assert split.combined == pytest.approx(whole.combined, rel=1e-9)


def test_threads_give_identical_updates(encoded, tiny_config):
    _, _, samples = encoded
    batch = samples[:6]
    results = []
    for threads in (1, 3):
        model = LaneAwareGAT(tiny_config, seed=2)
        Trainer(model, TrainRunConfig(batch_size=6, micro_batch=2, threads=threads)).train_step(batch)
        results.append(model.store.state_dict())
    for name, value in results[0].items():
        np.testing.assert_array_equal(value, results[1][name])


def test_ttc_weight_adds_penalty_gradients(sim_dataset, tiny_config):
    specs = collect_specs(sim_dataset, sim_dataset.vehicle_ids, RMAX, step_sample=20)
    scaler = fit_scaler([sim_dataset], [sim_dataset.vehicle_ids], specs)
    samples = [encode_sample(s, scaler, decode_all=True) for s in specs[:8]]
    trainer = Trainer(LaneAwareGAT(tiny_config, seed=2), TrainRunConfig(ttc_weight=0.5, micro_batch=4))
    loss, grads = trainer.batch_loss(samples)
    assert loss.ttc_penalty >= 0.0
    assert all(np.isfinite(g).all() for partial in grads for g in partial.values())


def test_build_samples_respects_vehicle_split(sim_dataset):
    run = TrainRunConfig(step_sample=20, seed=5)
    train, val, _, splits = build_samples([sim_dataset], RMAX, run, hops=2)
    train_ids, val_ids, test_ids = splits[0]
    assert {s.vehicle_id for s in train} <= train_ids
    assert {s.vehicle_id for s in val} <= val_ids
    assert not ({s.vehicle_id for s in train + val} & test_ids)


def test_build_samples_empty_training_split(make_dataset):
    short = make_dataset([(v, 20.0 * v, 10.0, 1) for v in range(1, 5)], frames=range(40))
    with pytest.raises(DataError):
        build_samples([short], RMAX, TrainRunConfig(), hops=2)


def test_checkpoint_round_trip(tmp_path, tiny_config):
    model = LaneAwareGAT(tiny_config, seed=1)
    model.freeze_encoder()
    path = save_checkpoint(tmp_path / "m.ckpt", model, FeatureScaler.identity(), "finetune", best_epoch=3)
    checkpoint = load_checkpoint(path)
    assert checkpoint.phase == "finetune" and checkpoint.best_epoch == 3
    restored = restore_model(checkpoint, tiny_config)
    for name in model.store.names():
        np.testing.assert_array_equal(restored.store[name], model.store[name].astype(np.float32))
    assert restored.encoder_frozen()
    np.testing.assert_array_equal(checkpoint.lane_bias, np.float32(tiny_config.lane_bias_init))


def test_checkpoint_bytes_deterministic(tiny_config):
    scaler = FeatureScaler.identity()
    first = checkpoint_bytes(LaneAwareGAT(tiny_config, seed=9), scaler, "pretrain")
    assert first == checkpoint_bytes(LaneAwareGAT(tiny_config, seed=9), scaler, "pretrain")
    assert first != checkpoint_bytes(LaneAwareGAT(tiny_config, seed=8), scaler, "pretrain")


def test_corrupt_checkpoints_rejected(tiny_config):
    payload = checkpoint_bytes(LaneAwareGAT(tiny_config), FeatureScaler.identity(), "pretrain")
    with pytest.raises(CheckpointError):
        parse_checkpoint(b"NOTACKPT" + payload[8:])
    with pytest.raises(CheckpointError):
        parse_checkpoint(payload[:-4])
    with pytest.raises(CheckpointError):
        parse_checkpoint(payload + b"\0\0\0\0")


def test_checkpoint_config_mismatch(tiny_config):
    checkpoint = parse_checkpoint(checkpoint_bytes(LaneAwareGAT(tiny_config), FeatureScaler.identity(), "pretrain"))
    wider = ModelConfig(lstm_hidden=5, embed_dim=8, heads=2, head_dim=4, decoder_hidden=8)
    with pytest.raises(CheckpointError):
        restore_model(checkpoint, wider)


def test_missing_checkpoint_is_data_error(tmp_path):
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "absent.ckpt")


def test_pretrain_then_finetune(tmp_path, sim_dataset, tiny_config):
    pre_run = TrainRunConfig(epochs=2, batch_size=8, micro_batch=4, step_sample=20, seed=5)
    pre = run_pretrain([sim_dataset], RMAX, tiny_config, pre_run, tmp_path / "pre.ckpt", tmp_path / "pre_log.csv")
    assert pre.best_epoch in (1, 2)
    assert pre.num_train > 0 and pre.num_val > 0

    log = pd.read_csv(tmp_path / "pre_log.csv")
    assert list(log.columns) == LOG_COLUMNS
    assert list(log["epoch"]) == [1, 2]
    assert load_checkpoint(pre.checkpoint_path).best_epoch == int(np.argmin(log["val_loss"].to_numpy())) + 1

    ft_run = TrainRunConfig(phase="finetune", epochs=1, batch_size=8, micro_batch=4, step_sample=20,
                            split_fractions=(0.85, 0.15, 0.0), seed=5)
    ft = run_finetune(pre.checkpoint_path, sim_dataset, RMAX, ft_run, tmp_path / "ft.ckpt",
                      tmp_path / "ft_log.csv", model_config=tiny_config)
    before = load_checkpoint(pre.checkpoint_path)
    after = load_checkpoint(ft.checkpoint_path)
    encoder = [n for n in after.tensors if n.startswith(ENCODER_PREFIX)]
    assert encoder and all(after.frozen[n] for n in encoder)
    assert not any(after.frozen[n] for n in after.tensors if n not in encoder)
    for name in encoder:
        np.testing.assert_array_equal(after.tensors[name], before.tensors[name])
    assert after.scaler.to_dict() == before.scaler.to_dict()
    # lane biases sit outside the encoder and keep learning
    assert not np.array_equal(after.lane_bias, before.lane_bias)
    ft_log = pd.read_csv(tmp_path / "ft_log.csv")
    assert after.best_epoch == int(np.argmin(ft_log["val_loss"].to_numpy())) + 1


@pytest.mark.slow
def test_overfits_small_scene(tmp_path):
    from synth.simulator import ScenarioSpec, generate

    dataset = generate(ScenarioSpec(lanes=3, merge_lane_ids=(3,), vehicles=20, duration_s=10.0, seed=3),
                       tmp_path / "overfit.csv")
    specs = collect_specs(dataset, dataset.vehicle_ids, RMAX, step_sample=300)
    assert len(specs) == 20
    scaler = fit_scaler([dataset], [dataset.vehicle_ids], specs)
    samples = [encode_sample(s, scaler) for s in specs]

    trainer = Trainer(LaneAwareGAT(ModelConfig(), seed=0), TrainRunConfig(batch_size=20, lr=1e-3))
    for _ in range(200):
        trainer.train_step(samples)
    assert trainer.evaluate(samples).ade["1s"] < 0.1
