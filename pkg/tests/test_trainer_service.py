import logging

import numpy as np
import pytest

from services.experiment_config import (
    LossWeights, ModelConfig, OptimizerSettings, SyntheticRecipe, build_experiment_config,
)
from services.inference_service import predict
from services.model_service import init_model
from services.synthdata_service import generate
from services.trainer_service import (
    STAGE_ENCODERS, STAGE_FUSION, STAGE_JOINT, STAGE_PROBES, OptimizerState, TrainerService, sgd_step,
    shuffle_seed,
)
from utils.error_handlers import InvalidArgumentError, NumericError

from conftest import tiny_recipe_fields


def optimizer(lr=0.1, momentum=0.9, weight_decay=0.0, decay_epoch=3, lr_decayed=0.01):
    return OptimizerState(OptimizerSettings(lr=lr, momentum=momentum, weight_decay=weight_decay,
                                            decay_epoch=decay_epoch, lr_decayed=lr_decayed))


def non_fusion_names(model):
    return sorted(n for n in model.parameters if not n.startswith("fusion_head"))


@pytest.fixture
def trainer():
    return TrainerService()


# --------------------------------------------------------------------------- #
# SGD
# --------------------------------------------------------------------------- #
def test_zero_gradient_leaves_parameters_and_decays_momentum():
    opt = optimizer(momentum=0.5)
    p = {"w": np.array([1.0, -2.0])}
    out = sgd_step(p, {"w": np.zeros(2)}, opt)
    np.testing.assert_array_equal(out["w"], p["w"])
    opt.momentum_buffers["w"] = np.array([2.0, 4.0])
    sgd_step(p, {"w": np.zeros(2)}, opt)
    np.testing.assert_array_equal(opt.momentum_buffers["w"], [1.0, 2.0])


def test_plain_gradient_step_without_momentum():
    opt = optimizer(lr=0.25, momentum=0.0)
    out = sgd_step({"w": np.array([1.0, 1.0])}, {"w": np.array([2.0, -4.0])}, opt)
    np.testing.assert_array_equal(out["w"], [0.5, 2.0])


def test_two_steps_match_hand_unrolled_recurrence():
    lr, mu, wd = 0.1, 0.9, 0.01
    opt = optimizer(lr=lr, momentum=mu, weight_decay=wd)
    p0 = np.array([0.5, -1.5])
    g1, g2 = np.array([1.0, 2.0]), np.array([-0.5, 0.25])
    p1 = sgd_step({"w": p0}, {"w": g1}, opt)["w"]
    p2 = sgd_step({"w": p1}, {"w": g2}, opt)["w"]

    v1 = g1 + wd * p0
    q1 = p0 - lr * v1
    v2 = mu * v1 + (g2 + wd * q1)
    np.testing.assert_allclose(p2, q1 - lr * v2, rtol=0, atol=1e-12)


def test_non_finite_gradient_names_the_parameter():
    with pytest.raises(NumericError) as excinfo:
        sgd_step({"enc.w": np.ones(2)}, {"enc.w": np.array([np.nan, 0.0])}, optimizer())
    assert excinfo.value.parameter == "enc.w"


def test_gradient_shape_mismatch():
    with pytest.raises(InvalidArgumentError):
        sgd_step({"w": np.ones(2)}, {"w": np.ones(3)}, optimizer())


def test_learning_rate_schedule_is_exact():
    opt = optimizer(lr=0.1, lr_decayed=0.01, decay_epoch=3)
    assert [opt.lr_at(e) for e in range(5)] == [0.1, 0.1, 0.1, 0.01, 0.01]
    assert opt.begin_epoch(3) == 0.01 and opt.current_lr == 0.01


def test_shuffle_seed_depends_on_stage_and_epoch_only():
    assert shuffle_seed(7, STAGE_ENCODERS, 2) == shuffle_seed(7, STAGE_JOINT, 2)
    assert shuffle_seed(7, STAGE_ENCODERS, 2) != shuffle_seed(7, STAGE_FUSION, 2)
    assert shuffle_seed(7, STAGE_ENCODERS, 2) != shuffle_seed(7, STAGE_ENCODERS, 3)


# --------------------------------------------------------------------------- #
# Encoder stage
# --------------------------------------------------------------------------- #
def test_zero_epochs_return_the_input_parameters(trainer, tiny_plan, tiny_data, tiny_model):
    train, _ = tiny_data
    plan = tiny_plan.model_copy(update={"epochs": 0, "warmup_epochs": 0})
    result = trainer.train_encoders(plan, train, tiny_model)
    assert result.model.checksum() == tiny_model.checksum()
    assert result.epoch_log == []


def test_detached_modality_matches_a_unimodal_run(trainer, tiny_plan, tiny_data, tiny_model):
    train, _ = tiny_data
    detached = tiny_plan.model_copy(update={"loss": LossWeights(lambda_s=0.0, lambda_D=0.0)})
    alone = detached.model_copy(update={"mode": "unimodal", "modality": 0})
    a = trainer.train_encoders(detached, train, tiny_model).model
    b = trainer.train_encoders(alone, train, tiny_model).model
    names = a.encoder_names(0) + a.uni_head_names(0)
    assert a.checksum(names) == b.checksum(names)
    assert a.checksum() != tiny_model.checksum()


def test_encoder_stage_computes_partition_and_logs(trainer, tiny_plan, tiny_data, tiny_model):
    train, _ = tiny_data
    records = []
    result = trainer.train_encoders(tiny_plan, train, tiny_model, on_epoch=records.append)
    assert result.partition is not None
    assert result.model.metadata.partition == result.partition
    assert result.model.metadata.phase == STAGE_ENCODERS
    assert [r["phase"] for r in result.epoch_log] == ["warmup", "main", "main"]
    assert records == result.epoch_log
    assert set(result.epoch_log[0]["accuracy"]) == {"uni1", "uni2"}
    assert [r["lr"] for r in result.epoch_log] == [0.05, 0.05, 0.01]


def test_warmup_covering_every_epoch_still_yields_a_partition(trainer, tiny_plan, tiny_data, tiny_model, caplog):
    train, _ = tiny_data
    plan = tiny_plan.model_copy(update={"epochs": 1, "warmup_epochs": 1})
    with caplog.at_level(logging.WARNING, logger="services.trainer_service"):
        result = trainer.train_encoders(plan, train, tiny_model)
    assert result.partition is not None
    assert "never used" in caplog.text


def test_baselines_without_contrastive_terms_skip_the_partition(trainer, tiny_plan, tiny_data, tiny_model):
    train, _ = tiny_data
    for mode in ("mm_clf", "cm_dist", "preds_avg"):
        result = trainer.train_encoders(tiny_plan.model_copy(update={"mode": mode}), train, tiny_model)
        assert result.partition is None, mode


def test_trainable_names(tiny_plan, tiny_model):
    di = TrainerService.trainable_names(tiny_model, tiny_plan, 0, "main")
    assert "shared_head.weight" in di
    assert not any(n.startswith("encoder.1") for n in di)
    dbc = TrainerService.trainable_names(tiny_model, tiny_plan.model_copy(update={"mode": "ours_dbc"}), 0, "main")
    assert any(n.startswith("encoder.1") for n in dbc)
    cm = TrainerService.trainable_names(tiny_model, tiny_plan.model_copy(update={"mode": "cm_dist"}), 1, "main")
    assert cm == tiny_model.encoder_names(1) + tiny_model.uni_head_names(1)


def test_joint_mode_has_no_encoder_stage(trainer, tiny_plan, tiny_data, tiny_model):
    train, _ = tiny_data
    with pytest.raises(InvalidArgumentError):
        trainer.train_encoders(tiny_plan.model_copy(update={"mode": "joint"}), train, tiny_model)


# --------------------------------------------------------------------------- #
# Fusion stage and full schedules
# --------------------------------------------------------------------------- #
def test_fusion_leaves_everything_else_untouched(trainer, tiny_plan, tiny_data, tiny_model):
    train, _ = tiny_data
    result = trainer.train_fusion(tiny_plan, train, tiny_model)
    names = non_fusion_names(tiny_model)
    assert result.model.checksum(names) == tiny_model.checksum(names)
    assert result.model.checksum(["fusion_head.weight"]) != tiny_model.checksum(["fusion_head.weight"])
    assert [r["stage"] for r in result.epoch_log] == [STAGE_FUSION, STAGE_FUSION]


def test_zero_fusion_epochs_leave_the_fusion_head(trainer, tiny_plan, tiny_data, tiny_model):
    train, _ = tiny_data
    result = trainer.train_fusion(tiny_plan.model_copy(update={"fusion_epochs": 0}), train, tiny_model)
    assert result.model.checksum() == tiny_model.checksum()


def test_training_is_deterministic(trainer, tiny_plan, tiny_data, tiny_model):
    train, _ = tiny_data
    first = trainer.train_baseline(tiny_plan, train, tiny_model)
    second = trainer.train_baseline(tiny_plan, train, tiny_model)
    assert first.model.checksum() == second.model.checksum()
    assert first.epoch_log == second.epoch_log


def test_stage_hook_sees_each_stage(trainer, tiny_plan, tiny_data, tiny_model):
    train, _ = tiny_data
    stages = []
    result = trainer.train_baseline(tiny_plan, train, tiny_model, on_stage=lambda s, m: stages.append((s, m)))
    assert [s for s, _ in stages] == [STAGE_ENCODERS, STAGE_FUSION]
    encoders = stages[0][1]
    names = non_fusion_names(encoders)
    assert result.model.checksum(names) == encoders.checksum(names)


def test_unknown_mode_is_rejected(trainer, tiny_plan, tiny_data, tiny_model):
    train, _ = tiny_data
    with pytest.raises(InvalidArgumentError):
        trainer.train_baseline(tiny_plan.model_copy(update={"mode": "ensemble"}), train, tiny_model)
    with pytest.raises(InvalidArgumentError):
        trainer.train_baseline(tiny_plan, train)


def test_joint_training_then_probes(trainer, tiny_plan, tiny_data, tiny_model):
    train, _ = tiny_data
    stages = {}
    result = trainer.train_baseline(tiny_plan.model_copy(update={"mode": "joint"}), train, tiny_model,
                                    on_stage=lambda s, m: stages.setdefault(s, m))
    assert result.partition is None
    assert list(stages) == [STAGE_JOINT, STAGE_PROBES]
    joint = stages[STAGE_JOINT]
    encoder_names = joint.encoder_names(0) + joint.encoder_names(1) + joint.names_with_prefix("fusion_head")
    assert result.model.checksum(encoder_names) == joint.checksum(encoder_names)
    assert result.model.checksum(joint.names_with_prefix("shared_head")) == \
        tiny_model.checksum(joint.names_with_prefix("shared_head"))
    assert {r["stage"] for r in result.epoch_log} == {STAGE_JOINT, STAGE_PROBES}


def test_unimodal_mode_trains_one_modality(trainer, tiny_plan, tiny_data, tiny_model):
    train, _ = tiny_data
    result = trainer.train_baseline(tiny_plan.model_copy(update={"mode": "unimodal", "modality": 1}),
                                    train, tiny_model)
    untouched = tiny_model.encoder_names(0) + tiny_model.names_with_prefix("fusion_head")
    assert result.model.checksum(untouched) == tiny_model.checksum(untouched)
    assert result.model.checksum(tiny_model.encoder_names(1)) != tiny_model.checksum(tiny_model.encoder_names(1))


def test_three_modalities(trainer, tiny_plan):
    recipe = SyntheticRecipe(**tiny_recipe_fields(
        num_modalities=3, input_dims=[6, 6, 6], informative_dims=[[0, 1]] * 3,
        informative_classes=[[0, 1], [1, 2], [2, 0]],
    ))
    train, test = generate(recipe)
    model = init_model(ModelConfig(hidden_dims=[8], feature_dim=6, input_dims=[6, 6, 6], num_classes=3), seed=0)
    plan = tiny_plan.model_copy(update={"epochs": 2, "fusion_epochs": 1})
    result = trainer.train_baseline(plan, train, model)
    assert len(result.partition.all_cross_sets()) == 6
    bundle = predict(result.model, test.inputs)
    assert bundle.weights.shape == (len(test), 4)
    np.testing.assert_allclose(bundle.weights.sum(axis=1), 1.0, rtol=0, atol=1e-12)


@pytest.mark.slow
def test_zero_noise_warmup_converges_and_fusion_separates(trainer, tmp_path):
    config = build_experiment_config({
        "recipe.name": "zero_noise",
        "plan.epochs": 5,
        "plan.warmup_epochs": 5,
        "plan.fusion_epochs": 20,
        "plan.optimizer.lr": 1e-2,
        "plan.optimizer.lr_decayed": 1e-3,
        "plan.fusion_optimizer.lr": 1e-2,
        "plan.fusion_optimizer.lr_decayed": 1e-3,
        "plan.fusion_optimizer.decay_epoch": 5,
        "recipe.train_samples": 600,
        "recipe.test_samples": 300,
        "output_dir": str(tmp_path),
    })
    train, _ = generate(config.recipe_for(0))
    model = init_model(config.model, seed=0)
    result = trainer.train_baseline(config.plan_for(0), train, model)
    warmup = [sum(r["loss"].values()) for r in result.epoch_log if r["stage"] == STAGE_ENCODERS]
    rises = sum(later > earlier for earlier, later in zip(warmup, warmup[1:]))
    assert len(warmup) == 5 and rises <= 1
    fusion_accuracy = [r["accuracy"]["fusion"] for r in result.epoch_log if r["stage"] == STAGE_FUSION]
    assert fusion_accuracy[-1] >= 0.95
