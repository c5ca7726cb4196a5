"""
LA-GAT pipeline - command-line entry point.

    python main.py <command> --config PATH [--out DIR] [--threads N] ...

Every command reads the flat key = value config, writes only under output_dir and
exits 0 on success, 1 on a usage/config error, 2 on a data/validation error.
"""

import argparse
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from core.config_manager import ConfigManager, atomic_write_text
from core.errors import ConfigError, DataError, LagatError, UsageError
from core.logger import install_exception_hook, logger
from core.trajectory import Dataset, split_vehicles

APP_ROOT = Path(__file__).resolve().parent
REFERENCE_TABLE = APP_ROOT / "config" / "published_reference.csv"

COMMANDS = ("synth", "ingest", "estimate-rmax", "build-graphs", "pretrain", "finetune",
            "evaluate", "report", "param-count")
MODEL_SETTINGS = ("pretrain-test", "zero-shot", "fine-tuned", "fine-tuned-val")
BASELINE_SETTING = "constant-velocity"

# ============================================================
# ARGUMENT PARSING
# ============================================================


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on misuse; usage errors here are config-class (1)."""

    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="main.py", description="Lane-aware graph attention trajectory prediction pipeline")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="flat key = value config file")
    parser.add_argument("--out", help="override output_dir")
    parser.add_argument("--threads", type=int, help="worker cap (results do not depend on it)")
    parser.add_argument("--checkpoint", help="checkpoint to fine-tune, evaluate or count")
    parser.add_argument("--setting", choices=MODEL_SETTINGS, help="evaluation setting tag")
    parser.add_argument("--dataset", help="dataset tag overriding the configured role")
    parser.add_argument("--baseline", choices=("cv",), help="evaluate the constant-velocity baseline")
    return parser


# ============================================================
# PIPELINE
# ============================================================

class Pipeline:
    """One CLI invocation: resolved config plus one handler per command."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        overrides = {}
        if args.out:
            overrides["output_dir"] = str(Path(args.out).resolve())
        if args.threads is not None:
            if args.threads < 1:
                raise UsageError("--threads must be >= 1")
            overrides["threads"] = args.threads
        self.config = ConfigManager(args.config, overrides=overrides)
        self.out = self.config.output_dir
        self.threads = self.config["threads"]
        self._datasets: Dict[str, Dataset] = {}

    def run(self) -> None:
        handler = getattr(self, "cmd_" + self.args.command.replace("-", "_"))
        logger.info(f"[CLI] {self.args.command} (output_dir {self.out}, threads {self.threads})")
        handler()

    # ---------------- paths ----------------

    def _path(self, *parts: str) -> Path:
        return self.config.ensure_under_output(self.out.joinpath(*parts))

    def synth_path(self, tag: str) -> Path:
        return self._path("synth", f"{tag}.csv")

    def harmonized_path(self, tag: str) -> Path:
        return self._path("harmonized", f"{tag}.csv")

    def checkpoint_path(self, phase: str) -> Path:
        return self._path("checkpoints", f"{phase}_best.ckpt")

    def log_path(self, phase: str) -> Path:
        return self._path("logs", f"{phase}_log.csv")

    def raw_path(self, tag: str) -> Path:
        """Synthetic datasets are read from synth/ output, recorded ones from their configured path."""
        if tag in self.config.synth_targets():
            path = self.synth_path(tag)
            if not path.exists():
                raise DataError(f"Synthetic dataset '{tag}' not generated yet: {path} (run 'synth' first)")
            return path
        self.config.validate_paths([tag])
        return self.config.dataset(tag).path

    # ---------------- datasets ----------------

    def _tags(self, default: Sequence[str]) -> List[str]:
        if self.args.dataset:
            if self.args.dataset not in self.config.dataset_tags():
                raise ConfigError(f"Dataset '{self.args.dataset}' not defined")
            return [self.args.dataset]
        return list(default)

    def role_tags(self) -> List[str]:
        """Pre-train datasets then the fine-tune and test datasets, without repeats."""
        tags = list(self.config["pretrain_datasets"])
        for tag in (self.config["finetune_dataset"], self.config["test_dataset"]):
            if tag and tag not in tags:
                tags.append(tag)
        return tags

    def dataset(self, tag: str) -> Dataset:
        if tag not in self._datasets:
            from ingest.harmonize import load_harmonized
            self._datasets[tag] = load_harmonized(self.harmonized_path(tag), threads=self.threads)
        return self._datasets[tag]

    def _role(self, key: str) -> str:
        tag = self.config[key]
        if not tag:
            raise ConfigError("Required for this command", key=key)
        return tag

    def rmax(self) -> float:
        """Configured R_max, else the persisted estimate, else a fresh estimate."""
        value = self.config["rmax"]
        if value != "estimate":
            return float(value)
        state = self.config.load_state("rmax.json")
        if state is not None:
            return float(state["rmax"])
        return self._estimate_rmax()

    def _estimate_rmax(self) -> float:
        from graph.scene_graph import RMAX_PERCENTILE, estimate_rmax

        tags = list(self.config["pretrain_datasets"])
        if self.config["finetune_dataset"] and self.config["finetune_dataset"] not in tags:
            tags.append(self.config["finetune_dataset"])
        if not tags:
            raise ConfigError("rmax = estimate needs pretrain_datasets or finetune_dataset", key="rmax")
        rmax = estimate_rmax([self.dataset(t) for t in tags])
        self.config.save_state("rmax.json", {"rmax": rmax, "percentile": RMAX_PERCENTILE, "datasets": tags})
        logger.info(f"[CLI] R_max = {rmax:.3f} m from {', '.join(tags)}")
        return rmax

    # ============================================================
    # COMMANDS
    # ============================================================

    def cmd_synth(self) -> None:
        from synth.simulator import ScenarioSpec, write_scenario

        tags = self._tags(self.config.synth_targets())
        if not tags:
            raise ConfigError("No dataset carries synth_vehicles")
        for tag in tags:
            dc = self.config.dataset(tag)
            if dc.synth_vehicles < 1:
                raise ConfigError("Dataset has no synthetic scenario", key=f"dataset.{tag}.synth_vehicles")
            if dc.schema != "ute":
                raise ConfigError("Synthetic datasets are written in the ute schema", key=f"dataset.{tag}.schema")
            spec = ScenarioSpec(
                lanes=dc.lane_max,
                merge_lane_ids=tuple(dc.merge_lane_ids),
                vehicles=dc.synth_vehicles,
                duration_s=dc.synth_duration_s or ScenarioSpec.duration_s,
                seed=self.config["seed"] if dc.synth_seed is None else dc.synth_seed,
                frame_rate_hz=dc.synth_frame_rate_hz,
            )
            write_scenario(spec, self.synth_path(tag), dc.source_tag)

    def cmd_ingest(self) -> None:
        import json

        from ingest.harmonize import harmonize, write_canonical_csv

        tags = self._tags(self.config.dataset_tags())
        for tag in tags:
            raw = self.raw_path(tag)
            dc = self.config.dataset(tag)
            dataset, report = harmonize(raw, dc.schema, dc.lane_max, dc.merge_lane_ids, source_tag=dc.source_tag,
                                        quality_filter=self.config["quality_filter"], threads=self.threads)
            out = write_canonical_csv(dataset, self.harmonized_path(tag))
            atomic_write_text(self._path("harmonized", f"{tag}.report.json"),
                              json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
            logger.info(f"[CLI] {tag}: {len(dataset.trajectories)} trajectories -> {out}")

    def cmd_estimate_rmax(self) -> None:
        rmax = self._estimate_rmax()
        print(f"{rmax:.6f}")

    def cmd_build_graphs(self) -> None:
        from graph.scene_graph import GraphBuilder, dump_graph

        rmax = self.rmax()
        stride = self.config["graph_dump_stride"]
        if stride < 1:
            raise ConfigError("graph_dump_stride must be >= 1", key="graph_dump_stride")
        for tag in self._tags(self.role_tags() or self.config.dataset_tags()):
            builder = GraphBuilder(self.dataset(tag), rmax, self.config["left_is_lower_lane"])
            frames = [f for f in sorted(builder.frames) if f % stride == 0]
            builder.prebuild(frames, threads=self.threads)
            for frame in frames:
                dump_graph(builder.graph(frame), self._path("graphs", tag, f"frame_{frame}.txt"))
            logger.info(f"[CLI] {tag}: {len(frames)} graphs dumped (every {stride} frames)")

    def cmd_pretrain(self) -> None:
        from training.trainer import run_pretrain

        tags = self._tags(self.config["pretrain_datasets"])
        if not tags:
            raise ConfigError("Required for this command", key="pretrain_datasets")
        result = run_pretrain([self.dataset(t) for t in tags], self.rmax(), self.config.model_config(),
                              self.config.train_config("pretrain"), self.checkpoint_path("pretrain"),
                              self.log_path("pretrain"))
        logger.info(f"[CLI] pretrain: best epoch {result.best_epoch} -> {result.checkpoint_path}")

    def cmd_finetune(self) -> None:
        from training.trainer import run_finetune

        tag = self._tags([self.args.dataset or self._role("finetune_dataset")])[0]
        source = Path(self.args.checkpoint) if self.args.checkpoint else self.checkpoint_path("pretrain")
        result = run_finetune(source, self.dataset(tag), self.rmax(), self.config.train_config("finetune"),
                              self.checkpoint_path("finetune"), self.log_path("finetune"),
                              model_config=self.config.model_config())
        logger.info(f"[CLI] finetune: best epoch {result.best_epoch} -> {result.checkpoint_path}")

    def cmd_evaluate(self) -> None:
        from evaluation.evaluator import Evaluator, constant_velocity, model_predictor
        from evaluation.report import emit_report
        from evaluation.ssm import write_pair_dump
        from model.checkpoint import load_checkpoint, restore_model

        if self.args.baseline == "cv":
            setting = BASELINE_SETTING
        elif self.args.setting:
            setting = self.args.setting
        else:
            raise UsageError("evaluate needs --setting or --baseline cv")

        if setting == BASELINE_SETTING:
            predictor = constant_velocity
        else:
            phase = "pretrain" if setting in ("pretrain-test", "zero-shot") else "finetune"
            path = Path(self.args.checkpoint) if self.args.checkpoint else self.checkpoint_path(phase)
            checkpoint = load_checkpoint(path)
            model = restore_model(checkpoint, self.config.model_config())
            predictor = model_predictor(model, checkpoint.scaler)

        jobs = self._eval_jobs(setting)
        evaluator = Evaluator(self.rmax(), self.config.ssm_config(), stride=self.config["eval_stride"],
                              pairs=self.config["ssm_pairs"], left_is_lower=self.config["left_is_lower_lane"],
                              threads=self.threads)
        rows, dumps = evaluator.evaluate(jobs, predictor, setting)
        emit_report(rows, self._path("metrics", f"{setting}.csv"))
        if self.config["dump_pairs"]:
            write_pair_dump(dumps, self._path("metrics", f"{setting}_pairs.txt"))

    def _eval_jobs(self, setting: str):
        """Datasets and target vehicles scored by each setting."""
        from evaluation.evaluator import EvalJob

        seed = self.config["seed"]
        if setting == "pretrain-test":
            tags = self._tags(self.config["pretrain_datasets"])
            if not tags:
                raise ConfigError("Required for this command", key="pretrain_datasets")
            fractions = tuple(self.config["split_fractions"])
            return [EvalJob(self.dataset(t), split_vehicles(self.dataset(t), fractions, seed)[2]) for t in tags]
        if setting == "fine-tuned-val":
            tag = self._tags([self.args.dataset or self._role("finetune_dataset")])[0]
            train, val = self.config["finetune_split"]
            vehicles = split_vehicles(self.dataset(tag), (train, val, 0.0), seed)[1]
            return [EvalJob(self.dataset(tag), vehicles)]
        tag = self._tags([self.args.dataset or self._role("test_dataset")])[0]
        return [EvalJob(self.dataset(tag))]

    def cmd_report(self) -> None:
        from evaluation.report import read_metrics, write_report_bundle

        metrics_dir = self._path("metrics")
        rows = []
        for path in sorted(metrics_dir.glob("*.csv")) if metrics_dir.exists() else []:
            rows += read_metrics(path)
        if not rows:
            logger.warning(f"[CLI] No metrics under {metrics_dir}; writing header-only tables")
        logs = {phase: self.log_path(phase) for phase in ("pretrain", "finetune")}
        written = write_report_bundle(rows, REFERENCE_TABLE, self._path("report"), logs)
        for name, path in written.items():
            logger.info(f"[CLI] {name} -> {path}")

    def cmd_param_count(self) -> None:
        from model.checkpoint import load_checkpoint, restore_model
        from model.network import LaneAwareGAT

        if self.args.checkpoint:
            model = restore_model(load_checkpoint(self.args.checkpoint), self.config.model_config())
        else:
            model = LaneAwareGAT(self.config.model_config(), seed=self.config["seed"])
        print(model.count_parameters())


# ============================================================
# MAIN ENTRY POINT
# ============================================================

def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one command; returns the process exit code."""
    try:
        args = build_parser().parse_args(argv)
        Pipeline(args).run()
    except LagatError as e:
        logger.error(f"[CLI] {type(e).__name__}: {e}")
        print(f"[CLI] ERROR: {e}", file=sys.stderr)
        return e.exit_code
    except ValueError as e:
        # typed config views already raised ConfigError; what reaches here is data validation
        logger.error(f"[CLI] ValueError: {e}")
        print(f"[CLI] ERROR: {e}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == '__main__':
    install_exception_hook()
    sys.exit(main())
