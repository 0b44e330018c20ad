"""
Experiment configuration models.

On disk a configuration is flat JSON with dotted keys (``"plan.loss.lambda_D": 1.0``).
Parsing unflattens the keys, lays the user's values over the selected profile and
recipe preset, validates every section with pydantic (unknown keys are errors),
and finally checks the cross-field constraints.
"""

from __future__ import annotations

import copy
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from config import Config
from constants.modes import ModeConstants
from constants.profiles import ProfileConstants
from constants.recipes import RecipeConstants
from utils.error_handlers import ConfigValidationError, InvalidRecipeError

logger = logging.getLogger(__name__)

TrainingMode = Literal["di_mml", "joint", "mm_clf", "preds_avg", "cm_dist", "ours_c", "ours_dbc", "unimodal"]


class SyntheticRecipe(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: Optional[str] = None
    num_classes: int = Field(6, ge=2)
    num_modalities: int = Field(2, ge=2)
    input_dims: List[int] = Field(default_factory=lambda: [16, 16])
    informative_dims: List[List[int]] = Field(default_factory=lambda: [[0, 1, 2, 3, 4, 5], [0, 1, 2, 3, 4, 5]])
    # classes with distinct prototypes on modality i's informative dims; empty means all
    informative_classes: List[List[int]] = Field(default_factory=list)
    shared_dims: List[int] = Field(default_factory=list)
    prototype_scale: float = Field(1.0, gt=0)
    shared_scale: float = Field(0.35, ge=0)
    noise_std: float = Field(0.6, ge=0)
    corruption_rate: float = Field(0.0, ge=0, le=1)
    corruption_std: float = Field(0.0, ge=0)
    # per-modality multiplier on the whole input row; empty means 1.0 everywhere
    modality_scales: List[float] = Field(default_factory=list)

    train_samples: int = Field(600, ge=1)
    test_samples: int = Field(300, ge=1)
    seed: Optional[int] = None

    def classes_for(self, modality: int) -> List[int]:
        if self.informative_classes and self.informative_classes[modality]:
            return list(self.informative_classes[modality])
        return list(range(self.num_classes))


def check_recipe(recipe: SyntheticRecipe) -> None:
    """Structural checks the field constraints cannot express"""
    m = recipe.num_modalities
    for field_name in ("input_dims", "informative_dims"):
        if len(getattr(recipe, field_name)) != m:
            raise InvalidRecipeError(f"{field_name} needs one entry per modality ({m})")
    if recipe.informative_classes and len(recipe.informative_classes) != m:
        raise InvalidRecipeError(f"informative_classes needs one entry per modality ({m})")
    if recipe.modality_scales:
        if len(recipe.modality_scales) != m:
            raise InvalidRecipeError(f"modality_scales needs one entry per modality ({m})")
        if any(not s > 0 for s in recipe.modality_scales):
            raise InvalidRecipeError("modality_scales must be positive")

    if recipe.train_samples < recipe.num_classes or recipe.test_samples < recipe.num_classes:
        raise InvalidRecipeError("train and test sample counts must be at least num_classes")
    for i in range(m):
        width = recipe.input_dims[i]
        informative = list(recipe.informative_dims[i])
        shared = list(recipe.shared_dims)
        every = informative + shared
        if len(set(every)) != len(every):
            raise InvalidRecipeError(f"modality {i}: informative and shared dimension sets overlap")
        if any(d < 0 or d >= width for d in every):
            raise InvalidRecipeError(f"modality {i}: dimension index outside [0, {width})")
        if any(k < 0 or k >= recipe.num_classes for k in recipe.classes_for(i)):
            raise InvalidRecipeError(f"modality {i}: informative class outside [0, {recipe.num_classes})")


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    hidden_dims: List[int] = Field(default_factory=lambda: [64])
    feature_dim: int = Field(32, ge=1)
    # derived from the recipe when absent; must agree with it when given
    input_dims: Optional[List[int]] = None
    num_classes: Optional[int] = Field(None, ge=2)
    num_modalities: Optional[int] = Field(None, ge=1)


class LossWeights(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lambda_s: float = Field(1.0, ge=0)
    lambda_D: float = Field(1.0, ge=0)
    lambda_kd: float = Field(1.0, ge=0)
    T_duc: float = Field(1.0, gt=0)
    T_kd: float = Field(2.0, gt=0)
    T_lw: float = Field(1.0, gt=0)


class OptimizerSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lr: float = Field(1e-3, gt=0)
    lr_decayed: float = Field(1e-4, gt=0)
    decay_epoch: int = Field(20, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(1e-4, ge=0)


class TrainPlan(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mode: TrainingMode = "di_mml"
    modality: int = Field(0, ge=0)
    epochs: int = Field(40, ge=0)
    warmup_epochs: int = Field(10, ge=0)
    fusion_epochs: int = Field(10, ge=0)
    batch_size: int = Field(16, ge=1)
    seed: int = 0
    dim_metric: Literal["prediction", "l2norm"] = "prediction"
    recompute_partition_every: int = Field(0, ge=0)
    loss: LossWeights = Field(default_factory=LossWeights)
    optimizer: OptimizerSettings = Field(default_factory=OptimizerSettings)
    fusion_optimizer: OptimizerSettings = Field(default_factory=lambda: OptimizerSettings(decay_epoch=10))

    @model_validator(mode="after")
    def _warmup_within_epochs(self):
        if self.warmup_epochs > self.epochs:
            raise ValueError("warmup_epochs must not exceed epochs")
        return self

    @property
    def variant(self) -> str:
        return ModeConstants.VARIANT_BY_MODE.get(self.mode, "none")


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "experiment"
    seed: int = 0
    seeds: List[int] = Field(default_factory=list)
    profile: Literal["desk", "full"] = "desk"
    output_dir: str = Field(default_factory=lambda: Config.RESULTS_DIR)
    parallel: bool = False
    recipe: SyntheticRecipe = Field(default_factory=SyntheticRecipe)
    model: ModelConfig = Field(default_factory=ModelConfig)
    plan: TrainPlan = Field(default_factory=TrainPlan)

    @property
    def run_seeds(self) -> List[int]:
        return list(self.seeds) if self.seeds else [self.seed]

    def plan_for(self, seed: int) -> TrainPlan:
        return self.plan.model_copy(update={"seed": seed})

    def recipe_for(self, seed: int) -> SyntheticRecipe:
        return self.recipe if self.recipe.seed is not None else self.recipe.model_copy(update={"seed": seed})

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return self.model_copy(update={"seed": seed, "seeds": []})


# --------------------------------------------------------------------------- #
# Flat dotted-key <-> nested conversion
# --------------------------------------------------------------------------- #
def unflatten(flat: Dict[str, Any]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    for key, value in flat.items():
        if not isinstance(key, str) or not key:
            raise ConfigValidationError(str(key), "config keys must be non-empty strings")
        parts = key.split(".")
        node = nested
        for depth, part in enumerate(parts[:-1]):
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigValidationError(".".join(parts[:depth + 1]), "key is both a value and a section")
            node = child
        leaf = parts[-1]
        if isinstance(value, dict):
            existing = node.setdefault(leaf, {})
            if not isinstance(existing, dict):
                raise ConfigValidationError(key, "key is both a value and a section")
            for sub_key, sub_value in unflatten(value).items():
                existing[sub_key] = sub_value
        else:
            if isinstance(node.get(leaf), dict):
                raise ConfigValidationError(key, "key is both a value and a section")
            node[leaf] = value
    return nested


def flatten(nested: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    flat: Dict[str, Any] = {}
    for key, value in nested.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten(value, dotted + "."))
        else:
            flat[dotted] = value
    return flat


def _deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _defaults_for(nested: Dict[str, Any]) -> Dict[str, Any]:
    profile_name = nested.get("profile", ProfileConstants.DEFAULT_PROFILE)
    profile = ProfileConstants.get_profile(profile_name) if isinstance(profile_name, str) else None
    if profile is None:
        raise ConfigValidationError("profile", f"unknown profile {profile_name!r}")

    recipe_section = nested.get("recipe", {})
    recipe_name = recipe_section.get("name", RecipeConstants.DEFAULT_RECIPE) if isinstance(recipe_section, dict) else None
    preset = RecipeConstants.get_recipe(recipe_name) if isinstance(recipe_name, str) else None
    if preset is None:
        raise ConfigValidationError("recipe.name", f"unknown recipe {recipe_name!r}")

    return {
        "profile": profile.name,
        "recipe": {"name": preset.name, **copy.deepcopy(preset.fields)},
        "plan": profile.plan_defaults(),
    }


def _check_cross_fields(config: ExperimentConfig) -> ExperimentConfig:
    recipe, model = config.recipe, config.model
    try:
        check_recipe(recipe)
    except InvalidRecipeError as e:
        raise ConfigValidationError("recipe", str(e))

    expected = {
        "num_classes": recipe.num_classes,
        "num_modalities": recipe.num_modalities,
        "input_dims": list(recipe.input_dims),
    }
    for field_name, value in expected.items():
        given = getattr(model, field_name)
        if given is None:
            setattr(model, field_name, value)
        elif given != value:
            raise ConfigValidationError(f"model.{field_name}", f"{given} does not match the recipe ({value})")

    if config.plan.mode == ModeConstants.UNIMODAL and config.plan.modality >= recipe.num_modalities:
        raise ConfigValidationError("plan.modality", f"must be below num_modalities ({recipe.num_modalities})")
    return config


def build_experiment_config(flat: Dict[str, Any]) -> ExperimentConfig:
    """Validate a flat dotted-key mapping into a fully resolved ExperimentConfig"""
    if not isinstance(flat, dict):
        raise ConfigValidationError("<root>", "config must be a JSON object")
    nested = unflatten(flat)
    merged = _deep_merge(_defaults_for(nested), nested)
    try:
        config = ExperimentConfig.model_validate(merged)
    except ValidationError as e:
        first = e.errors()[0]
        key = ".".join(str(part) for part in first["loc"]) or "<root>"
        raise ConfigValidationError(key, first["msg"])
    return _check_cross_fields(config)


def parse_config(path: Union[str, Path]) -> ExperimentConfig:
    """Read and validate a flat JSON config file"""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        flat = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigValidationError("<root>", f"invalid JSON: {e}")
    config = build_experiment_config(flat)
    logger.info(f"Parsed config {path} (profile={config.profile}, mode={config.plan.mode}, recipe={config.recipe.name})")
    return config


def config_to_flat(config: ExperimentConfig) -> Dict[str, Any]:
    return flatten(config.model_dump(mode="json"))


def dump_config(config: ExperimentConfig, path: Union[str, Path]) -> Path:
    """Write a config as flat dotted-key JSON; parse_config reads it back unchanged"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config_to_flat(config), indent=2))
    return path
