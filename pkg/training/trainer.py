"""
Training loop and the two-phase protocol.

Each batch is cut into fixed-size micro-batches. Their partial losses are
pre-normalized by whole-batch counts and their gradients are added to the
store in micro-batch order, so results do not depend on the worker count.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from core.config_manager import atomic_write_text
from core.errors import DataError
from core.logger import logger
from core.trajectory import Dataset, split_vehicles
from model.checkpoint import load_checkpoint, restore_model, save_checkpoint
from model.inputs import FeatureScaler
from model.network import LaneAwareGAT, ModelConfig
from model.params import Grads
from training.losses import LossBreakdown, displacement_norms, gaussian_nll, ttc_hinge_terms
from training.optimizer import AdamW, PlateauScheduler
from training.samples import TrainingSample, collate, collect_specs, encode_sample, fit_scaler

PHASES = ("pretrain", "finetune")
LOG_COLUMNS = ["epoch", "train_loss", "val_loss", "lr", "nll_1s", "nll_3s", "nll_5s",
               "ade_1s", "ade_3s", "ade_5s", "lambda0", "lambda1", "lambda2", "lambda3"]


@dataclass(frozen=True)
class TrainRunConfig:
    phase: str = "pretrain"
    epochs: int = 10
    batch_size: int = 32
    micro_batch: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-4
    clip_norm: float = 5.0
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step_sample: int = 300
    patience: int = 3
    factor: float = 0.5
    ade_weight: float = 0.5
    ttc_weight: float = 0.0
    ttc_threshold: float = 3.0
    split_fractions: Tuple[float, float, float] = (0.70, 0.15, 0.15)
    seed: int = 42
    threads: int = 1
    left_is_lower: bool = True

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got '{self.phase}'")
        if self.batch_size < 1 or self.micro_batch < 1 or self.epochs < 0:
            raise ValueError("batch_size and micro_batch must be >= 1, epochs >= 0")
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be three values summing to 1, got {tuple(self.split_fractions)}")

    @property
    def freeze_encoder(self) -> bool:
        return self.phase == "finetune"

    @classmethod
    def from_config(cls, config, phase: str) -> "TrainRunConfig":
        """Build from a ConfigManager."""
        if phase == "finetune":
            train, val = config["finetune_split"]
            fractions = (train, val, 0.0)
        else:
            fractions = tuple(config["split_fractions"])
        return cls(
            phase=phase,
            epochs=config[f"{phase}_epochs"],
            batch_size=config["batch_size"],
            micro_batch=config["micro_batch"],
            lr=config[f"{phase}_lr"],
            weight_decay=config["weight_decay"],
            clip_norm=config["clip_norm"],
            betas=(config["adam_beta1"], config["adam_beta2"]),
            eps=config["adam_eps"],
            step_sample=config["step_sample"],
            patience=config["scheduler_patience"],
            factor=config["scheduler_factor"],
            ade_weight=config["ade_weight"],
            ttc_weight=config["ttc_weight"],
            ttc_threshold=config["ttc_penalty_threshold_s"],
            split_fractions=fractions,
            seed=config["seed"],
            threads=config["threads"],
            left_is_lower=config["left_is_lower_lane"],
        )


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    val: LossBreakdown
    lane_bias: List[float]

    def row(self) -> Dict[str, float]:
        row = {"epoch": self.epoch, "train_loss": self.train_loss, "val_loss": self.val_loss, "lr": self.lr}
        for h in ("1s", "3s", "5s"):
            row[f"nll_{h}"] = self.val.nll.get(h, float("nan"))
            row[f"ade_{h}"] = self.val.ade.get(h, float("nan"))
        for k, value in enumerate(self.lane_bias):
            row[f"lambda{k}"] = value
        return row


@dataclass
class TrainResult:
    phase: str
    best_epoch: Optional[int]
    best_val_loss: Optional[float]
    checkpoint_path: Optional[Path]
    history: List[EpochRecord] = field(default_factory=list)
    num_train: int = 0
    num_val: int = 0


class Trainer:
    """Optimizes a LaneAwareGAT on TrainingSamples."""

    def __init__(self, model: LaneAwareGAT, run: TrainRunConfig):
        self.model = model
        self.run = run
        if run.freeze_encoder:
            model.freeze_encoder()
        self.optimizer = AdamW(model.store, run.lr, run.weight_decay, run.clip_norm, run.betas, run.eps)
        self.scheduler = PlateauScheduler(self.optimizer, run.patience, run.factor)
        self.rng = np.random.default_rng([run.seed, 1])

    def _micro(self, chunk: Sequence[TrainingSample], total: int, pair_total: int,
               with_grad: bool) -> Tuple[LossBreakdown, Optional[Grads]]:
        model = self.model
        run = self.run
        batch = collate(chunk)
        outputs, cache = model.forward(batch.inp)
        n_h = len(model.horizons)
        part = LossBreakdown(ade_weight=run.ade_weight, ttc_weight=run.ttc_weight)
        d_out = {h: np.zeros_like(outputs[h]) for h in model.horizons}

        for h in model.horizons:
            channels = outputs[h][batch.target_pos]
            targets = batch.targets[h]
            denom = float(total * targets.shape[1])
            values, g_nll = gaussian_nll(channels, targets)
            norms, g_ade = displacement_norms(channels[..., :2], targets)
            part.nll[h] = float(values.sum()) / denom
            part.ade[h] = float(norms.sum()) / denom
            grad = g_nll / (n_h * denom)
            grad[..., :2] += run.ade_weight * g_ade / (n_h * denom)
            d_out[h][batch.target_pos] += grad

        if run.ttc_weight > 0 and pair_total > 0 and batch.pair_src.size:
            anchor_x = batch.inp.anchor_xy[batch.inp.decode_rows, 0]
            for h in model.horizons:
                x_abs = np.concatenate([anchor_x[:, None], anchor_x[:, None] + outputs[h][:, :, 0]], axis=1)
                hinge, backward = ttc_hinge_terms(x_abs, batch.pair_src, batch.pair_dst, run.ttc_threshold)
                part.ttc_penalty += float(hinge.sum()) / pair_total
                d_out[h][:, :, 0] += run.ttc_weight * backward(np.full(hinge.shape, 1.0 / pair_total))

        if not with_grad:
            return part, None
        grads = model.store.zeros_like()
        model.backward(d_out, cache, grads)
        return part, grads

    def batch_loss(self, samples: Sequence[TrainingSample], with_grad: bool = True) -> Tuple[LossBreakdown, List[Grads]]:
        """Loss over `samples` (means over the whole set) and per-micro-batch gradients in order."""
        run = self.run
        steps = sum(h for _, h in self.model.config.horizons)
        pair_total = sum(int(s.pair_src.size) for s in samples) * steps
        chunks = [samples[k:k + run.micro_batch] for k in range(0, len(samples), run.micro_batch)]

        def work(chunk):
            return self._micro(chunk, len(samples), pair_total, with_grad)

        if run.threads > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=run.threads) as pool:
                results = list(pool.map(work, chunks))
        else:
            results = [work(c) for c in chunks]

        total = LossBreakdown(ade_weight=run.ade_weight, ttc_weight=run.ttc_weight)
        for part, _ in results:
            total = total + part
        return total, [g for _, g in results if g is not None]

    def train_step(self, samples: Sequence[TrainingSample]) -> LossBreakdown:
        """One optimizer update on one batch."""
        loss, grads = self.batch_loss(samples, with_grad=True)
        self.model.store.zero_grad()
        self.model.store.accumulate(grads)
        self.optimizer.step()
        return loss

    def evaluate(self, samples: Sequence[TrainingSample]) -> LossBreakdown:
        loss, _ = self.batch_loss(samples, with_grad=False)
        return loss

    def train_epoch(self, samples: Sequence[TrainingSample]) -> float:
        """Shuffled pass over the samples; returns the sample-weighted mean batch loss."""
        order = self.rng.permutation(len(samples))
        shuffled = [samples[i] for i in order]
        weighted = 0.0
        for k in range(0, len(shuffled), self.run.batch_size):
            batch = shuffled[k:k + self.run.batch_size]
            loss = self.train_step(batch)
            weighted += loss.combined * len(batch)
        return weighted / max(len(samples), 1)

    def fit(self, train: Sequence[TrainingSample], val: Sequence[TrainingSample], scaler: FeatureScaler,
            checkpoint_path, log_path=None) -> TrainResult:
        """
        Run all epochs, keeping the checkpoint with the strictly lowest validation loss.

        Without validation samples the training loss selects the checkpoint.
        """
        if not train:
            raise DataError(f"Empty training split for {self.run.phase}")
        if not val:
            logger.warning(f"[Trainer] No validation samples for {self.run.phase}; selecting by training loss")

        result = TrainResult(self.run.phase, None, None, None, num_train=len(train), num_val=len(val))
        for epoch in range(1, self.run.epochs + 1):
            train_loss = self.train_epoch(train)
            val_breakdown = self.evaluate(val) if val else self.evaluate(train)
            val_loss = val_breakdown.combined
            record = EpochRecord(epoch, train_loss, val_loss, self.optimizer.lr, val_breakdown,
                                 [float(v) for v in self.model.lane_bias])
            result.history.append(record)

            if result.best_val_loss is None or val_loss < result.best_val_loss:
                result.best_val_loss = val_loss
                result.best_epoch = epoch
                result.checkpoint_path = save_checkpoint(
                    checkpoint_path, self.model, scaler, self.run.phase, best_epoch=epoch,
                    extra={"val_loss": val_loss, "train_samples": len(train), "val_samples": len(val)},
                )

            self.scheduler.step(val_loss)
            logger.info(f"[Trainer] {self.run.phase} epoch {epoch}/{self.run.epochs}: "
                        f"train {train_loss:.4f} val {val_loss:.4f} lr {record.lr:.2e} "
                        f"lambda {np.round(self.model.lane_bias, 4).tolist()}")
            if log_path is not None:
                write_training_log(result.history, log_path)

        logger.info(f"[Trainer] {self.run.phase} done: best epoch {result.best_epoch} "
                    f"(val {result.best_val_loss})")
        return result


def write_training_log(history: Sequence[EpochRecord], path) -> Path:
    path = Path(path)
    df = pd.DataFrame([r.row() for r in history], columns=LOG_COLUMNS)
    atomic_write_text(path, df.to_csv(index=False, lineterminator="\n"))
    return path


def build_samples(datasets: Sequence[Dataset], rmax: float, run: TrainRunConfig, hops: int,
                  scaler: Optional[FeatureScaler] = None, decode_all: bool = False):
    """
    Split every dataset by vehicle and encode training and validation samples.

    Returns:
        (train samples, val samples, scaler, [(train_ids, val_ids, test_ids) per dataset])
    """
    splits = [split_vehicles(ds, run.split_fractions, run.seed) for ds in datasets]
    train_specs, val_specs = [], []
    for ds, (train_ids, val_ids, _) in zip(datasets, splits):
        train_specs += collect_specs(ds, train_ids, rmax, run.step_sample, hops, run.left_is_lower, run.threads)
        val_specs += collect_specs(ds, val_ids, rmax, run.step_sample, hops, run.left_is_lower, run.threads)
    if not train_specs:
        raise DataError(f"Empty training split for {run.phase}: no complete windows among training vehicles")
    if scaler is None:
        scaler = fit_scaler(datasets, [s[0] for s in splits], train_specs)
    train = [encode_sample(s, scaler, decode_all) for s in train_specs]
    val = [encode_sample(s, scaler, decode_all) for s in val_specs]
    return train, val, scaler, splits


def run_pretrain(datasets: Sequence[Dataset], rmax: float, model_config: ModelConfig, run: TrainRunConfig,
                 checkpoint_path, log_path=None) -> TrainResult:
    """Pre-train on the combined datasets (each split 70/15/15 by vehicle)."""
    if not datasets:
        raise DataError("No pre-training datasets configured")
    train, val, scaler, _ = build_samples(datasets, rmax, run, model_config.gat_layers,
                                          decode_all=run.ttc_weight > 0)
    logger.info(f"[Trainer] pretrain: {len(train)} train / {len(val)} val samples "
                f"from {', '.join(ds.source_tag for ds in datasets)}")
    model = LaneAwareGAT(model_config, seed=run.seed)
    logger.info(f"[Trainer] Model has {model.count_parameters()} trainable parameters")
    return Trainer(model, run).fit(train, val, scaler, checkpoint_path, log_path)


def run_finetune(checkpoint_path, dataset: Dataset, rmax: float, run: TrainRunConfig, output_path,
                 log_path=None, model_config: Optional[ModelConfig] = None) -> TrainResult:
    """Fine-tune a pre-trained checkpoint with the encoder frozen, reusing its scaler."""
    checkpoint = load_checkpoint(checkpoint_path)
    model = restore_model(checkpoint, model_config, keep_frozen=False)
    train, val, scaler, _ = build_samples([dataset], rmax, run, model.config.gat_layers,
                                          scaler=checkpoint.scaler, decode_all=run.ttc_weight > 0)
    logger.info(f"[Trainer] finetune: {len(train)} train / {len(val)} val samples from {dataset.source_tag}")
    trainer = Trainer(model, run)
    logger.info(f"[Trainer] Encoder frozen; {model.count_parameters()} trainable parameters")
    return trainer.fit(train, val, scaler, output_path, log_path)
