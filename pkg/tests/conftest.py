import numpy as np
import pytest

from services.experiment_config import (
    LossWeights, ModelConfig, OptimizerSettings, SyntheticRecipe, TrainPlan, build_experiment_config,
)
from services.model_service import init_model
from services.synthdata_service import generate


def tiny_recipe_fields(**overrides):
    fields = {
        "name": "tiny",
        "num_classes": 3,
        "num_modalities": 2,
        "input_dims": [6, 6],
        "informative_dims": [[0, 1], [0, 1]],
        "informative_classes": [[0, 1], [1, 2]],
        "shared_dims": [2],
        "prototype_scale": 1.5,
        "shared_scale": 0.5,
        "noise_std": 0.3,
        "modality_scales": [],
        "train_samples": 48,
        "test_samples": 24,
        "seed": 0,
    }
    fields.update(overrides)
    return fields


def tiny_flat_config(tmp_path, **overrides):
    """Flat config that trains in well under a second per seed"""
    flat = {
        "name": "tiny_run",
        "seed": 0,
        "output_dir": str(tmp_path / "results"),
        "model.hidden_dims": [8],
        "model.feature_dim": 6,
        "plan.epochs": 3,
        "plan.warmup_epochs": 1,
        "plan.fusion_epochs": 2,
        "plan.batch_size": 16,
    }
    for key, value in tiny_recipe_fields().items():
        flat[f"recipe.{key}"] = value
    flat.pop("recipe.seed")
    # named presets only; the explicit fields above override the preset
    flat["recipe.name"] = "complementary"
    flat.update(overrides)
    return flat


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_recipe():
    return SyntheticRecipe(**tiny_recipe_fields())


@pytest.fixture
def tiny_data(tiny_recipe):
    return generate(tiny_recipe)


@pytest.fixture
def tiny_model_config():
    return ModelConfig(hidden_dims=[8], feature_dim=6, input_dims=[6, 6], num_classes=3, num_modalities=2)


@pytest.fixture
def tiny_model(tiny_model_config):
    return init_model(tiny_model_config, seed=0)


@pytest.fixture
def tiny_plan():
    optimizer = OptimizerSettings(lr=0.05, lr_decayed=0.01, decay_epoch=2, momentum=0.9, weight_decay=1e-4)
    return TrainPlan(
        mode="di_mml",
        epochs=3,
        warmup_epochs=1,
        fusion_epochs=2,
        batch_size=16,
        seed=0,
        loss=LossWeights(),
        optimizer=optimizer,
        fusion_optimizer=optimizer,
    )


@pytest.fixture
def tiny_config(tmp_path):
    return build_experiment_config(tiny_flat_config(tmp_path))
