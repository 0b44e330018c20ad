import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
import pandas as pd

from constants.modes import ModeConstants
from services.checkpoint_service import load_checkpoint, save_checkpoint
from services.dimsep_service import (
    DimensionPartition, compute_partition, masked_accuracy, partition_frame, partition_report,
)
from services.experiment_config import ExperimentConfig, config_to_flat, dump_config, parse_config
from services.inference_service import evaluate, multimodal_accuracy, per_sample_frame
from services.model_service import ModelState, extract_features, init_model
from services.synthdata_service import MultimodalDataset, generate, load_dataset, save_dataset
from services.trainer_service import trainer_service
from utils.error_handlers import InvalidArgumentError, format_error_for_logging

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

CONFIG_ECHO = "config.json"
DATASET_FILE = "dataset.dml"
EPOCH_LOG = "epoch_log.jsonl"
METRICS_FILE = "metrics.json"
DIMS_CSV = "dims.csv"
DIMS_JSON = "dims.json"
PREDICTIONS_CSV = "predictions.csv"
SUMMARY_CSV = "summary.csv"
COMPARISON_CSV = "comparison.csv"
FAILED_MARKER = "FAILED"


def write_json(path: PathLike, payload: Dict[str, Any]) -> Path:
    """Deterministic JSON (sorted keys, fixed indent) so identical runs give identical bytes"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def checkpoint_path(seed_dir: PathLike, stage: str) -> Path:
    return Path(seed_dir) / f"checkpoint_{stage}"


def _run_seed_job(config: ExperimentConfig, seed: int, run_dir: str) -> Dict[str, Any]:
    # module-level so worker processes can unpickle it
    return ExperimentService().run_seed(config, seed, Path(run_dir))


class ExperimentService:
    """End-to-end experiment runs, stage-by-stage helpers for the CLI, exports and comparisons"""

    # ------------------------------------------------------------------ #
    # Individual stages
    # ------------------------------------------------------------------ #
    def generate_data(self, config: ExperimentConfig, seed: int,
                      out_path: PathLike) -> Tuple[MultimodalDataset, MultimodalDataset]:
        recipe = config.recipe_for(seed)
        train, test = generate(recipe)
        save_dataset(out_path, train, test, recipe)
        return train, test

    def train_stage(self, config: ExperimentConfig, dataset_path: PathLike, out_dir: PathLike) -> Path:
        """Encoder stage only (joint mode trains its fused model here); returns the checkpoint manifest"""
        train, _, _ = load_dataset(dataset_path)
        plan = config.plan_for(config.seed)
        model = init_model(config.model, config.seed)
        out_dir = Path(out_dir)
        with _EpochLogWriter(out_dir / EPOCH_LOG) as sink:
            if plan.mode == ModeConstants.JOINT:
                result = trainer_service.train_joint(plan, train, model, sink)
                stage = "joint"
            else:
                result = trainer_service.train_encoders(plan, train, model, sink)
                stage = "encoders"
        if result.partition is not None:
            self.write_dims(result.partition, out_dir)
        return save_checkpoint(checkpoint_path(out_dir, stage), result.model, config_to_flat(config))

    def fuse_stage(self, config: ExperimentConfig, checkpoint: PathLike, dataset_path: PathLike,
                   out_dir: PathLike) -> Path:
        """Fusion head on frozen encoders (probes for a joint checkpoint)"""
        train, _, _ = load_dataset(dataset_path)
        model, _ = load_checkpoint(checkpoint)
        plan = config.plan_for(config.seed)
        out_dir = Path(out_dir)
        with _EpochLogWriter(out_dir / EPOCH_LOG) as sink:
            if plan.mode == ModeConstants.JOINT:
                result = trainer_service.train_probes(plan, train, model, sink)
                stage = "probes"
            else:
                result = trainer_service.train_fusion(plan, train, model, sink)
                stage = "fusion"
        return save_checkpoint(checkpoint_path(out_dir, stage), result.model, config_to_flat(config))

    def dims_stage(self, checkpoint: PathLike, dataset_path: PathLike, out_dir: PathLike,
                   metric: Optional[str] = None) -> DimensionPartition:
        """Export the checkpoint's partition, computing it from the training split if absent"""
        model, _ = load_checkpoint(checkpoint)
        partition = model.metadata.partition
        if partition is None or (metric is not None and metric != partition.metric):
            train, _, _ = load_dataset(dataset_path)
            partition = compute_partition(model, train, metric or "prediction")
        self.write_dims(partition, out_dir)
        return partition

    def evaluate_stage(self, checkpoint: PathLike, dataset_path: PathLike, out_dir: Optional[PathLike] = None,
                       T_lw: float = 1.0, per_sample: bool = False, split: str = "test") -> Dict[str, Any]:
        model, config_echo = load_checkpoint(checkpoint)
        dataset = self._split(dataset_path, split)
        record = {"split": split, "T_lw": T_lw, "accuracy": evaluate(model, dataset, T_lw=T_lw)}
        mode = (config_echo or {}).get("plan.mode")
        if mode:
            record["mode"] = mode
            record["multimodal"] = multimodal_accuracy(record["accuracy"], mode)
        if out_dir is not None:
            write_json(Path(out_dir) / METRICS_FILE, record)
            if per_sample:
                per_sample_frame(model, dataset, T_lw).to_csv(Path(out_dir) / PREDICTIONS_CSV, index=False)
        return record

    @staticmethod
    def _split(dataset_path: PathLike, split: str) -> MultimodalDataset:
        train, test, _ = load_dataset(dataset_path)
        if split not in ("train", "test"):
            raise InvalidArgumentError(f"split must be 'train' or 'test', got '{split}'")
        return train if split == "train" else test

    @staticmethod
    def write_dims(partition: DimensionPartition, out_dir: PathLike) -> Tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / DIMS_CSV
        partition_frame(partition).to_csv(csv_path, index=False)
        json_path = write_json(out_dir / DIMS_JSON, partition_report(partition))
        return csv_path, json_path

    # ------------------------------------------------------------------ #
    # Full runs
    # ------------------------------------------------------------------ #
    def run_seed(self, config: ExperimentConfig, seed: int, run_dir: Path) -> Dict[str, Any]:
        """One seed end to end; leaves a FAILED marker next to partial artifacts on error"""
        seed_dir = run_dir / f"seed_{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        # files of an earlier run in this directory (another mode, a failure marker) must not survive
        for stale in seed_dir.iterdir():
            if stale.is_file():
                stale.unlink()
        seeded = config.with_seed(seed)
        flat = config_to_flat(seeded)
        try:
            dump_config(seeded, seed_dir / CONFIG_ECHO)
            train, test = self.generate_data(config, seed, seed_dir / DATASET_FILE)
            plan = config.plan_for(seed)
            model = init_model(config.model, seed)

            def on_stage(stage: str, staged: ModelState) -> None:
                save_checkpoint(checkpoint_path(seed_dir, stage), staged, flat)

            with _EpochLogWriter(seed_dir / EPOCH_LOG) as sink:
                result = trainer_service.train_baseline(plan, train, model, on_stage=on_stage, on_epoch=sink)

            metrics = self.collect_metrics(config, seed, result.model, test, result.partition, result.warnings,
                                           train=train)
            if result.partition is not None:
                self.write_dims(result.partition, seed_dir)
            write_json(seed_dir / METRICS_FILE, metrics)
            per_sample_frame(result.model, test, plan.loss.T_lw).to_csv(seed_dir / PREDICTIONS_CSV, index=False)
            logger.info(f"[{config.name}] seed {seed}: {metrics['accuracy']}")
            return metrics
        except Exception as e:
            (seed_dir / FAILED_MARKER).write_text(format_error_for_logging(e, f"seed {seed}") + "\n")
            logger.error(f"[{config.name}] seed {seed} failed: {format_error_for_logging(e)}")
            raise

    @staticmethod
    def collect_metrics(config: ExperimentConfig, seed: int, model: ModelState, test: MultimodalDataset,
                        partition: Optional[DimensionPartition], warnings: Sequence[str] = (),
                        train: Optional[MultimodalDataset] = None) -> Dict[str, Any]:
        """
        Per-seed metrics. effective_dims echoes the partition used during training;
        masked_accuracy rates the split of the final model, recomputed on `train`
        when given and falling back to the training partition otherwise.
        """
        plan = config.plan
        m = model.metadata.num_modalities
        if plan.mode == ModeConstants.UNIMODAL:
            modes = [ModeConstants.uni_mode(plan.modality)]
        else:
            modes = ModeConstants.eval_modes(m)
        accuracy = evaluate(model, test, modes, T_lw=plan.loss.T_lw)
        metrics: Dict[str, Any] = {
            "name": config.name,
            "mode": plan.mode,
            "seed": seed,
            "accuracy": accuracy,
            "multimodal": multimodal_accuracy(accuracy, plan.mode),
            "parameter_checksum": model.checksum(),
            "warnings": list(warnings),
        }
        if partition is not None:
            metrics["effective_dims"] = partition_report(partition)["effective_counts"]
            final = compute_partition(model, train, plan.dim_metric) if train is not None else partition
            metrics["masked_accuracy"] = {
                ModeConstants.uni_mode(i): {
                    "effective": masked_accuracy(model, test, i, dims.effective),
                    "ineffective": masked_accuracy(model, test, i, dims.ineffective),
                }
                for i, dims in enumerate(final.modalities)
            }
        return metrics

    def run_experiment(self, config: ExperimentConfig) -> Path:
        """Every seed of `config` under <output_dir>/<name>/, plus summary.csv over seeds"""
        run_dir = Path(config.output_dir) / config.name
        run_dir.mkdir(parents=True, exist_ok=True)
        seeds = config.run_seeds
        logger.info(f"Running experiment '{config.name}' mode={config.plan.mode} seeds={seeds} -> {run_dir}")

        if config.parallel and len(seeds) > 1:
            with ProcessPoolExecutor(max_workers=len(seeds)) as pool:
                futures = [pool.submit(_run_seed_job, config, s, str(run_dir)) for s in seeds]
                results = [f.result() for f in futures]
        else:
            results = [self.run_seed(config, s, run_dir) for s in seeds]

        self.summarize(results).to_csv(run_dir / SUMMARY_CSV, index=False)
        return run_dir

    @staticmethod
    def summarize(results: Sequence[Dict[str, Any]]) -> pd.DataFrame:
        """mean and (population) std over seeds of every accuracy plus the multimodal number"""
        rows = []
        for r in results:
            row = {"seed": r["seed"], **r["accuracy"]}
            if r.get("multimodal") is not None:
                row["multimodal"] = r["multimodal"]
            rows.append(row)
        frame = pd.DataFrame(rows).set_index("seed")
        summary = pd.DataFrame({
            "metric": frame.columns,
            "mean": frame.mean(axis=0).values,
            "std": frame.std(axis=0, ddof=0).values,
            "seeds": len(frame),
        })
        return summary

    # ------------------------------------------------------------------ #
    # Exports and comparisons
    # ------------------------------------------------------------------ #
    def export_features(self, checkpoint: PathLike, dataset_path: PathLike, out_dir: PathLike,
                        split: str = "test") -> List[Path]:
        """One CSV per modality: feature_0..feature_{d-1},label; rows aligned across modalities"""
        model, _ = load_checkpoint(checkpoint)
        dataset = self._split(dataset_path, split)
        if dataset.input_dims != list(model.metadata.input_dims):
            raise InvalidArgumentError(f"dataset widths {dataset.input_dims} do not match the checkpoint "
                                       f"({list(model.metadata.input_dims)})")
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        for i, h in enumerate(extract_features(model, dataset.inputs)):
            frame = pd.DataFrame(h, columns=[f"feature_{j}" for j in range(h.shape[1])])
            frame["label"] = dataset.labels
            path = out_dir / f"features_modality{i + 1}.csv"
            frame.to_csv(path, index=False, float_format="%.17g")
            written.append(path)
        logger.info(f"Exported {split} features for {len(written)} modalities to {out_dir}")
        return written

    @staticmethod
    def read_results(run_dir: PathLike) -> List[Dict[str, Any]]:
        seed_dirs = sorted(Path(run_dir).glob("seed_*"))
        results = []
        for seed_dir in seed_dirs:
            metrics = seed_dir / METRICS_FILE
            if metrics.exists():
                results.append(json.loads(metrics.read_text()))
        if not results:
            raise FileNotFoundError(f"no per-seed metrics under {run_dir}")
        return results

    @staticmethod
    def _unique_label(name: str, used: Set[str]) -> str:
        """name, then name_2, name_3, ... for later sources sharing it"""
        label, n = name, 1
        while label in used:
            n += 1
            label = f"{name}_{n}"
        used.add(label)
        return label

    def compare(self, sources: Sequence[PathLike], out_path: PathLike, seed: Optional[int] = None) -> pd.DataFrame:
        """
        comparison.csv with one row per (config, mode): mean/std over seeds and the
        margin versus the first config's row for the same mode.

        Each source is a flat config file (run first) or an existing run directory.
        Sources sharing a name get distinct labels, and configs sharing a name run
        in distinct directories under the label.
        """
        if not sources:
            raise InvalidArgumentError("compare needs at least one config or results directory")
        rows = []
        used: Set[str] = set()
        for source in sources:
            source = Path(source)
            if source.is_dir():
                results = self.read_results(source)
                label = self._unique_label(results[0].get("name", source.name), used)
                training_mode = results[0].get("mode")
            else:
                config = parse_config(source)
                if seed is not None:
                    config = config.with_seed(seed)
                label = self._unique_label(config.name, used)
                if label != config.name:
                    logger.warning(f"Config name '{config.name}' repeats; running {source} as '{label}'")
                    config = config.model_copy(update={"name": label})
                results = self.read_results(self.run_experiment(config))
                training_mode = config.plan.mode
            summary = self.summarize(results)
            for record in summary.to_dict(orient="records"):
                rows.append({
                    "config": label,
                    "training_mode": training_mode,
                    "mode": record["metric"],
                    "mean": record["mean"],
                    "std": record["std"],
                    "seeds": record["seeds"],
                })
        frame = pd.DataFrame(rows, columns=["config", "training_mode", "mode", "mean", "std", "seeds"])
        first = frame[frame["config"] == frame["config"].iloc[0]].set_index("mode")["mean"]
        frame["margin_vs_first"] = [
            float(row["mean"] - first[row["mode"]]) if row["mode"] in first.index else np.nan
            for _, row in frame.iterrows()
        ]
        out_path = Path(out_path)
        if out_path.suffix != ".csv":
            out_path = out_path / COMPARISON_CSV
        out_path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(out_path, index=False)
        logger.info(f"Wrote comparison of {len(sources)} sources to {out_path}")
        return frame


class _EpochLogWriter:
    """Context manager appending one JSON line per epoch record"""

    def __init__(self, path: Path):
        self.path = path
        self._fh = None

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w")
        return self

    def __call__(self, record: Dict[str, Any]) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")

    def __exit__(self, exc_type, exc, tb):
        self._fh.close()
        return False


# Global experiment service instance
experiment_service = ExperimentService()
