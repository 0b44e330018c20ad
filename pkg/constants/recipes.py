from dataclasses import dataclass, field
from typing import Any, Dict, List


@dataclass(frozen=True)
class RecipePreset:
    name: str
    description: str
    fields: Dict[str, Any] = field(default_factory=dict)


_COMPLEMENTARY: Dict[str, Any] = {
    "num_classes": 6,
    "num_modalities": 2,
    "input_dims": [16, 16],
    # modality 1 tells apart {0..3}, modality 2 tells apart {2..5}
    "informative_dims": [[0, 1, 2, 3, 4, 5], [0, 1, 2, 3, 4, 5]],
    "informative_classes": [[0, 1, 2, 3], [2, 3, 4, 5]],
    "shared_dims": [6, 7],
    "prototype_scale": 1.0,
    "shared_scale": 0.35,
    "noise_std": 0.9,
    "corruption_rate": 0.0,
    "corruption_std": 0.0,
    # modality 1 is the louder input and wins the race under one fused objective
    "modality_scales": [3.0, 1.5],
    "train_samples": 1200,
    "test_samples": 600,
}


class RecipeConstants:
    """Named synthetic recipes selectable with `recipe.name`"""

    RECIPE_MAP: Dict[str, RecipePreset] = {
        "complementary": RecipePreset(
            "complementary",
            "K=6, M=2; each modality separates four classes, shared dims weakly separate all",
            dict(_COMPLEMENTARY),
        ),
        "reliability_skewed": RecipePreset(
            "reliability_skewed",
            "complementary where one random modality of a sample is replaced by noise",
            {**_COMPLEMENTARY, "corruption_rate": 0.35, "corruption_std": 0.9},
        ),
        "zero_noise": RecipePreset(
            "zero_noise",
            "complementary without any Gaussian noise",
            {**_COMPLEMENTARY, "noise_std": 0.0, "modality_scales": []},
        ),
        "three_modal": RecipePreset(
            "three_modal",
            "K=6, M=3; each modality separates three classes",
            {
                **_COMPLEMENTARY,
                "num_modalities": 3,
                "input_dims": [12, 12, 12],
                "informative_dims": [[0, 1, 2, 3], [0, 1, 2, 3], [0, 1, 2, 3]],
                "informative_classes": [[0, 1, 2], [2, 3, 4], [4, 5, 0]],
                "shared_dims": [4, 5],
                "modality_scales": [],
            },
        ),
    }

    DEFAULT_RECIPE = "complementary"

    @classmethod
    def get_recipe(cls, name: str) -> RecipePreset:
        """Get recipe preset by name"""
        return cls.RECIPE_MAP.get(name.lower().strip())

    @classmethod
    def get_all_names(cls) -> List[str]:
        """Get all available recipe names"""
        return list(cls.RECIPE_MAP.keys())
