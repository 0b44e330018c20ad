from typing import Dict, List


class ModeConstants:
    """Training modes and the evaluation mode each one reports as its multimodal number"""

    DI_MML = "di_mml"
    JOINT = "joint"
    MM_CLF = "mm_clf"
    PREDS_AVG = "preds_avg"
    CM_DIST = "cm_dist"
    OURS_C = "ours_c"
    OURS_DBC = "ours_dbc"
    UNIMODAL = "unimodal"

    TRAINING_MODES: List[str] = [DI_MML, JOINT, MM_CLF, PREDS_AVG, CM_DIST, OURS_C, OURS_DBC, UNIMODAL]

    # objective variant used inside the detached trainer
    VARIANT_BY_MODE: Dict[str, str] = {
        DI_MML: "duc",
        OURS_C: "full",
        OURS_DBC: "dbc",
        CM_DIST: "cm_dist",
        MM_CLF: "none",
        PREDS_AVG: "none",
        UNIMODAL: "none",
    }

    MULTIMODAL_EVAL: Dict[str, str] = {
        DI_MML: "weighted",
        OURS_C: "weighted",
        OURS_DBC: "weighted",
        JOINT: "fusion",
        MM_CLF: "fusion",
        CM_DIST: "fusion",
        PREDS_AVG: "preds_avg",
    }

    FUSION = "fusion"
    WEIGHTED = "weighted"

    @staticmethod
    def uni_mode(modality: int) -> str:
        """Evaluation mode name of modality `modality` (0-based) -> 'uni1', 'uni2', ..."""
        return f"uni{modality + 1}"

    @classmethod
    def eval_modes(cls, num_modalities: int) -> List[str]:
        return [cls.uni_mode(i) for i in range(num_modalities)] + [cls.FUSION, cls.PREDS_AVG, cls.WEIGHTED]
