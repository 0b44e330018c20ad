import json

import pytest

from services.experiment_config import build_experiment_config, config_to_flat, dump_config, flatten, parse_config, unflatten
from utils.error_handlers import ConfigValidationError

from conftest import tiny_flat_config


def write_config(tmp_path, flat, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(flat))
    return path


def test_minimal_config_gets_every_default(tmp_path):
    config = parse_config(write_config(tmp_path, {"seed": 3}))
    assert config.seed == 3 and config.run_seeds == [3]
    assert config.profile == "desk"
    assert config.recipe.name == "complementary"
    assert config.recipe.num_classes == 6 and config.recipe.input_dims == [16, 16]
    assert (config.plan.epochs, config.plan.warmup_epochs, config.plan.fusion_epochs) == (40, 10, 10)
    optimizer = config.plan.optimizer
    assert (optimizer.lr, optimizer.lr_decayed, optimizer.decay_epoch) == (1e-3, 1e-4, 20)
    assert (optimizer.momentum, optimizer.weight_decay) == (0.9, 1e-4)
    assert config.plan.fusion_optimizer.decay_epoch == 10
    assert config.recipe.modality_scales == [3.0, 1.5]
    assert (config.plan.loss.lambda_s, config.plan.loss.lambda_D) == (1.0, 1.0)
    assert (config.plan.loss.T_duc, config.plan.loss.T_kd, config.plan.loss.T_lw) == (1.0, 2.0, 1.0)
    assert config.model.hidden_dims == [64] and config.model.feature_dim == 32
    assert config.model.input_dims == [16, 16] and config.model.num_classes == 6


def test_full_profile_schedule():
    plan = build_experiment_config({"profile": "full"}).plan
    assert (plan.epochs, plan.warmup_epochs, plan.fusion_epochs) == (150, 10, 20)
    assert (plan.optimizer.lr, plan.optimizer.lr_decayed, plan.optimizer.decay_epoch) == (1e-3, 1e-4, 70)
    assert plan.fusion_optimizer.decay_epoch == 10


def test_explicit_keys_override_the_recipe_preset():
    config = build_experiment_config({"recipe.name": "zero_noise", "recipe.train_samples": 120})
    assert config.recipe.noise_std == 0.0
    assert config.recipe.train_samples == 120


@pytest.mark.parametrize("flat, key", [
    ({"plan.loss.lambda_D": -1}, "plan.loss.lambda_D"),
    ({"plan.epochz": 3}, "plan.epochz"),
    ({"recipe.name": "mnist"}, "recipe.name"),
    ({"profile": "cluster"}, "profile"),
    ({"plan.warmup_epochs": 50}, "plan"),
    ({"model.num_classes": 4}, "model.num_classes"),
    ({"plan.mode": "unimodal", "plan.modality": 2}, "plan.modality"),
    ({"plan.loss.T_duc": 0}, "plan.loss.T_duc"),
    ({"recipe.shared_dims": [0]}, "recipe"),
])
def test_invalid_values_name_the_key(flat, key):
    with pytest.raises(ConfigValidationError) as excinfo:
        build_experiment_config(flat)
    assert excinfo.value.key == key
    assert key in str(excinfo.value)


def test_file_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        parse_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigValidationError):
        parse_config(bad)
    with pytest.raises(ConfigValidationError):
        parse_config(write_config(tmp_path, [1, 2, 3], "list.json"))


def test_write_then_parse_round_trip(tmp_path):
    config = build_experiment_config(tiny_flat_config(tmp_path, **{"plan.loss.T_lw": 0.5, "seeds": [1, 2]}))
    reparsed = parse_config(dump_config(config, tmp_path / "echo.json"))
    assert reparsed == config
    assert config_to_flat(reparsed) == config_to_flat(config)


def test_nested_sections_are_accepted_and_flattened():
    nested = unflatten({"plan.loss.lambda_s": 0.5, "plan": {"epochs": 3}})
    assert nested == {"plan": {"loss": {"lambda_s": 0.5}, "epochs": 3}}
    assert flatten(nested) == {"plan.loss.lambda_s": 0.5, "plan.epochs": 3}
    with pytest.raises(ConfigValidationError):
        unflatten({"plan": 1, "plan.epochs": 3})


def test_seed_override_clears_the_seed_list(tmp_path):
    config = build_experiment_config(tiny_flat_config(tmp_path, seeds=[0, 1, 2]))
    assert config.run_seeds == [0, 1, 2]
    assert config.with_seed(9).run_seeds == [9]
    assert config.recipe_for(4).seed == 4


def test_desk_profile_only_shortens_the_published_schedule():
    desk = build_experiment_config({"profile": "desk"}).plan
    full = build_experiment_config({"profile": "full"}).plan
    assert (desk.epochs, desk.optimizer.decay_epoch, desk.fusion_epochs) == (40, 20, 10)
    assert desk.warmup_epochs == full.warmup_epochs
    assert desk.batch_size == full.batch_size and desk.loss == full.loss
    for name in ("lr", "lr_decayed", "momentum", "weight_decay"):
        assert getattr(desk.optimizer, name) == getattr(full.optimizer, name), name
        assert getattr(desk.fusion_optimizer, name) == getattr(full.fusion_optimizer, name), name
    assert desk.fusion_optimizer.decay_epoch == full.fusion_optimizer.decay_epoch
