import json

import numpy as np
import pandas as pd
import pytest

from services.checkpoint_service import load_checkpoint, save_checkpoint
from services.dimsep_service import DimensionPartition, ModalityDims, compute_partition, masked_accuracy
from services.experiment_config import ModelConfig, build_experiment_config, dump_config
from services.experiment_service import ExperimentService, checkpoint_path
from services.inference_service import evaluate
from services.model_service import head_logits, init_model
from services.synthdata_service import load_dataset, save_dataset
from services.trainer_service import trainer_service

from conftest import tiny_flat_config


@pytest.fixture
def service():
    return ExperimentService()


def tiny(tmp_path, **overrides):
    return build_experiment_config(tiny_flat_config(tmp_path, **overrides))


def test_run_writes_every_artifact(service, tmp_path):
    run_dir = service.run_experiment(tiny(tmp_path))
    seed_dir = run_dir / "seed_0"
    for name in ("config.json", "dataset.dml", "epoch_log.jsonl", "metrics.json", "dims.csv", "dims.json",
                 "predictions.csv", "checkpoint_encoders.json", "checkpoint_encoders.bin",
                 "checkpoint_fusion.json", "checkpoint_fusion.bin"):
        assert (seed_dir / name).exists(), name
    assert not (seed_dir / "FAILED").exists()
    assert (run_dir / "summary.csv").exists()

    metrics = json.loads((seed_dir / "metrics.json").read_text())
    assert set(metrics["accuracy"]) == {"uni1", "uni2", "fusion", "preds_avg", "weighted"}
    assert metrics["multimodal"] == metrics["accuracy"]["weighted"]
    assert set(metrics["masked_accuracy"]) == {"uni1", "uni2"}
    epochs = [json.loads(line) for line in (seed_dir / "epoch_log.jsonl").read_text().splitlines()]
    assert [e["stage"] for e in epochs] == ["encoders"] * 3 + ["fusion"] * 2

    dims = pd.read_csv(seed_dir / "dims.csv")
    assert list(dims.columns) == ["modality", "dim", "score", "effective"]
    assert len(dims) == 12


def test_config_echo_reproduces_the_run(service, tmp_path):
    run_dir = service.run_experiment(tiny(tmp_path))
    echo = json.loads((run_dir / "seed_0" / "config.json").read_text())
    echo["output_dir"] = str(tmp_path / "again")
    rerun = build_experiment_config(echo)
    again = service.run_experiment(rerun)
    assert (again / "seed_0" / "metrics.json").read_bytes() == (run_dir / "seed_0" / "metrics.json").read_bytes()


def test_identical_configs_give_identical_metrics_bytes(service, tmp_path):
    first = service.run_experiment(tiny(tmp_path / "a"))
    second = service.run_experiment(tiny(tmp_path / "b"))
    assert (first / "seed_0" / "metrics.json").read_bytes() == (second / "seed_0" / "metrics.json").read_bytes()


def test_joint_run_has_no_dimension_files(service, tmp_path):
    run_dir = service.run_experiment(tiny(tmp_path, **{"plan.mode": "joint"}))
    seed_dir = run_dir / "seed_0"
    assert not (seed_dir / "dims.csv").exists() and not (seed_dir / "dims.json").exists()
    assert (seed_dir / "checkpoint_joint.json").exists() and (seed_dir / "checkpoint_probes.json").exists()
    metrics = json.loads((seed_dir / "metrics.json").read_text())
    assert metrics["multimodal"] == metrics["accuracy"]["fusion"]
    assert "effective_dims" not in metrics


def test_unimodal_run_reports_one_modality(service, tmp_path):
    run_dir = service.run_experiment(tiny(tmp_path, **{"plan.mode": "unimodal", "plan.modality": 1}))
    metrics = json.loads((run_dir / "seed_0" / "metrics.json").read_text())
    assert list(metrics["accuracy"]) == ["uni2"]
    assert metrics["multimodal"] is None


def test_multi_seed_summary(service, tmp_path):
    run_dir = service.run_experiment(tiny(tmp_path, seeds=[0, 1]))
    summary = pd.read_csv(run_dir / "summary.csv")
    assert list(summary.columns) == ["metric", "mean", "std", "seeds"]
    assert set(summary["seeds"]) == {2}
    per_seed = [json.loads((run_dir / f"seed_{s}" / "metrics.json").read_text()) for s in (0, 1)]
    row = summary.set_index("metric").loc["fusion"]
    values = [m["accuracy"]["fusion"] for m in per_seed]
    assert row["mean"] == pytest.approx(np.mean(values))
    assert row["std"] == pytest.approx(np.std(values))


def test_failure_leaves_a_marker_and_partial_artifacts(service, tmp_path, monkeypatch):
    def explode(*args, **kwargs):
        raise RuntimeError("diverged")

    monkeypatch.setattr(trainer_service, "train_baseline", explode)
    with pytest.raises(RuntimeError):
        service.run_experiment(tiny(tmp_path))
    seed_dir = tmp_path / "results" / "tiny_run" / "seed_0"
    assert "diverged" in (seed_dir / "FAILED").read_text()
    assert (seed_dir / "config.json").exists() and (seed_dir / "dataset.dml").exists()


def test_stage_by_stage_pipeline(service, tmp_path):
    config = tiny(tmp_path)
    data = tmp_path / "stages" / "dataset.dml"
    service.generate_data(config, config.seed, data)
    encoders = service.train_stage(config, data, tmp_path / "stages")
    assert encoders.name == "checkpoint_encoders.json"
    assert (tmp_path / "stages" / "dims.json").exists()
    fused = service.fuse_stage(config, encoders, data, tmp_path / "stages")

    before, _ = load_checkpoint(encoders)
    after, echo = load_checkpoint(fused)
    frozen = [n for n in before.parameters if not n.startswith("fusion_head")]
    assert before.checksum(frozen) == after.checksum(frozen)
    assert echo["plan.mode"] == "di_mml"

    record = service.evaluate_stage(fused, data, tmp_path / "eval", per_sample=True)
    assert record["multimodal"] == record["accuracy"]["weighted"]
    assert (tmp_path / "eval" / "metrics.json").exists() and (tmp_path / "eval" / "predictions.csv").exists()

    partition = service.dims_stage(fused, data, tmp_path / "dims", metric="l2norm")
    assert partition.metric == "l2norm"


def test_stage_pipeline_matches_the_full_run(service, tmp_path):
    config = tiny(tmp_path)
    run_dir = service.run_experiment(config)
    data = run_dir / "seed_0" / "dataset.dml"
    encoders = service.train_stage(config, data, tmp_path / "stages")
    fused = service.fuse_stage(config, encoders, data, tmp_path / "stages")
    staged, _ = load_checkpoint(fused)
    full, _ = load_checkpoint(checkpoint_path(run_dir / "seed_0", "fusion"))
    assert staged.checksum() == full.checksum()


def test_export_features_of_an_identity_encoder(service, tmp_path, tiny_data, tiny_recipe):
    train, test = tiny_data
    data = save_dataset(tmp_path / "dataset.dml", train, test, tiny_recipe)
    model = init_model(ModelConfig(hidden_dims=[], feature_dim=6, input_dims=[6, 6], num_classes=3), seed=0)
    model = model.with_parameters({"encoder.0.layer.0.weight": np.eye(6), "encoder.1.layer.0.weight": np.eye(6)})
    ckpt = save_checkpoint(tmp_path / "identity", model)

    paths = service.export_features(ckpt, data, tmp_path / "features")
    assert [p.name for p in paths] == ["features_modality1.csv", "features_modality2.csv"]
    accuracy = evaluate(model, test, ["uni1", "uni2"])
    for i, path in enumerate(paths):
        frame = pd.read_csv(path, float_precision="round_trip")
        assert len(frame) == len(test)
        features = frame[[f"feature_{j}" for j in range(6)]].to_numpy()
        np.testing.assert_array_equal(features, test.inputs[i])
        np.testing.assert_array_equal(frame["label"].to_numpy(), test.labels)
        predictions = head_logits(model.uni_head(i), features).numpy().argmax(axis=1)
        assert float((predictions == test.labels).mean()) == accuracy[f"uni{i + 1}"]


def test_export_features_rejects_mismatched_dataset(service, tmp_path, tiny_data, tiny_model):
    train, test = tiny_data
    ckpt = save_checkpoint(tmp_path / "ckpt", tiny_model)
    wide = init_model(ModelConfig(hidden_dims=[8], feature_dim=6, input_dims=[7, 7], num_classes=3), seed=0)
    wide_ckpt = save_checkpoint(tmp_path / "wide", wide)
    data = save_dataset(tmp_path / "dataset.dml", train, test)
    service.export_features(ckpt, data, tmp_path / "ok")
    with pytest.raises(ValueError):
        service.export_features(wide_ckpt, data, tmp_path / "bad")


def test_compare_configs_and_run_directories(service, tmp_path):
    di = tiny_flat_config(tmp_path, name="di")
    joint = tiny_flat_config(tmp_path, name="joint", **{"plan.mode": "joint"})
    di_path = dump_config(build_experiment_config(di), tmp_path / "di.json")
    joint_path = dump_config(build_experiment_config(joint), tmp_path / "joint.json")

    frame = service.compare([di_path, joint_path], tmp_path / "out")
    assert (tmp_path / "out" / "comparison.csv").exists()
    assert list(frame.columns) == ["config", "training_mode", "mode", "mean", "std", "seeds", "margin_vs_first"]
    assert set(frame["config"]) == {"di", "joint"}
    assert (frame[frame["config"] == "di"]["margin_vs_first"] == 0.0).all()

    again = service.compare([tmp_path / "results" / "di", tmp_path / "results" / "joint"], tmp_path / "again.csv")
    pd.testing.assert_frame_equal(again, frame)


def test_compare_keeps_configs_with_the_same_name_apart(service, tmp_path):
    di = tiny_flat_config(tmp_path, name="experiment")
    joint = tiny_flat_config(tmp_path, name="experiment", **{"plan.mode": "joint"})
    di_path = dump_config(build_experiment_config(di), tmp_path / "di.json")
    joint_path = dump_config(build_experiment_config(joint), tmp_path / "joint.json")

    frame = service.compare([di_path, joint_path], tmp_path / "out")
    assert list(frame["config"].unique()) == ["experiment", "experiment_2"]
    assert all(isinstance(v, float) for v in frame["margin_vs_first"])
    assert (frame[frame["config"] == "experiment"]["margin_vs_first"] == 0.0).all()

    di_seed = tmp_path / "results" / "experiment" / "seed_0"
    joint_seed = tmp_path / "results" / "experiment_2" / "seed_0"
    assert json.loads((di_seed / "metrics.json").read_text())["mode"] == "di_mml"
    assert json.loads((joint_seed / "metrics.json").read_text())["mode"] == "joint"
    assert not (joint_seed / "dims.csv").exists() and not (joint_seed / "dims.json").exists()


def test_rerun_in_the_same_directory_drops_stale_artifacts(service, tmp_path):
    run_dir = service.run_experiment(tiny(tmp_path, name="shared"))
    assert (run_dir / "seed_0" / "dims.json").exists()
    again = service.run_experiment(tiny(tmp_path, name="shared", **{"plan.mode": "joint"}))
    seed_dir = again / "seed_0"
    assert again == run_dir
    for name in ("dims.csv", "dims.json", "checkpoint_encoders.json", "checkpoint_fusion.json"):
        assert not (seed_dir / name).exists(), name
    assert (seed_dir / "checkpoint_joint.json").exists()


def test_read_results_needs_metrics(service, tmp_path):
    with pytest.raises(FileNotFoundError):
        service.read_results(tmp_path)


def test_masked_accuracy_rates_the_final_model_partition(service, tiny_config, tiny_model, tiny_data):
    train, test = tiny_data
    rest = (1, 2, 3, 4, 5)
    stale = DimensionPartition((ModalityDims((0,), rest), ModalityDims((0,), rest)))
    metrics = service.collect_metrics(tiny_config, 0, tiny_model, test, stale, train=train)
    assert metrics["effective_dims"] == {"modality1": 1, "modality2": 1}
    final = compute_partition(tiny_model, train, tiny_config.plan.dim_metric)
    for i, dims in enumerate(final.modalities):
        assert metrics["masked_accuracy"][f"uni{i + 1}"] == {
            "effective": masked_accuracy(tiny_model, test, i, dims.effective),
            "ineffective": masked_accuracy(tiny_model, test, i, dims.ineffective),
        }

    without_train = service.collect_metrics(tiny_config, 0, tiny_model, test, stale)
    assert without_train["masked_accuracy"]["uni1"]["effective"] == masked_accuracy(tiny_model, test, 0, [0])
