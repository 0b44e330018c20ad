from dataclasses import dataclass, asdict
from typing import Any, Dict, List


@dataclass(frozen=True)
class TrainingProfile:
    name: str
    epochs: int
    warmup_epochs: int
    fusion_epochs: int
    batch_size: int
    lr: float
    lr_decayed: float
    decay_epoch: int
    fusion_decay_epoch: int
    momentum: float
    weight_decay: float
    lambda_s: float
    lambda_D: float

    def plan_defaults(self) -> Dict[str, Any]:
        """Nested plan section filled from this profile"""
        optimizer = {
            "lr": self.lr,
            "lr_decayed": self.lr_decayed,
            "decay_epoch": self.decay_epoch,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
        }
        return {
            "epochs": self.epochs,
            "warmup_epochs": self.warmup_epochs,
            "fusion_epochs": self.fusion_epochs,
            "batch_size": self.batch_size,
            "loss": {"lambda_s": self.lambda_s, "lambda_D": self.lambda_D},
            "optimizer": optimizer,
            "fusion_optimizer": {**optimizer, "decay_epoch": self.fusion_decay_epoch},
        }


class ProfileConstants:
    """Training schedules: the published full-scale schedule and the desk-scale one"""

    PROFILE_MAP: Dict[str, TrainingProfile] = {
        "full": TrainingProfile(
            name="full", epochs=150, warmup_epochs=10, fusion_epochs=20, batch_size=16,
            lr=1e-3, lr_decayed=1e-4, decay_epoch=70, fusion_decay_epoch=10,
            momentum=0.9, weight_decay=1e-4, lambda_s=1.0, lambda_D=1.0,
        ),
        # the published schedule shortened: fewer encoder and fusion epochs, earlier decay
        "desk": TrainingProfile(
            name="desk", epochs=40, warmup_epochs=10, fusion_epochs=10, batch_size=16,
            lr=1e-3, lr_decayed=1e-4, decay_epoch=20, fusion_decay_epoch=10,
            momentum=0.9, weight_decay=1e-4, lambda_s=1.0, lambda_D=1.0,
        ),
    }

    DEFAULT_PROFILE = "desk"

    @classmethod
    def get_profile(cls, name: str) -> TrainingProfile:
        """Get training profile by name"""
        return cls.PROFILE_MAP.get(name.lower().strip())

    @classmethod
    def describe(cls) -> List[Dict[str, Any]]:
        return [asdict(p) for p in cls.PROFILE_MAP.values()]
