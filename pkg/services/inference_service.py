import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from constants.modes import ModeConstants
from services.model_service import ModelState, extract_features, fuse_concat, head_logits
from services.synthdata_service import MultimodalDataset
from utils.autograd import softmax
from utils.error_handlers import InvalidArgumentError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PredictionBundle:
    """Logits of every source for one batch, with per-sample certainties and weights"""
    uni_logits: Tuple[np.ndarray, ...]
    fusion_logits: np.ndarray
    certainties: np.ndarray  # B x (M + 1), modality order then fusion
    weights: np.ndarray      # B x (M + 1)
    weighted: np.ndarray     # B x K

    @property
    def num_modalities(self) -> int:
        return len(self.uni_logits)

    def predictions(self, mode: str) -> np.ndarray:
        if mode == ModeConstants.FUSION:
            return self.fusion_logits.argmax(axis=1)
        if mode == ModeConstants.WEIGHTED:
            return self.weighted.argmax(axis=1)
        if mode == ModeConstants.PREDS_AVG:
            probs = np.mean([softmax(z).numpy() for z in self.uni_logits], axis=0)
            return probs.argmax(axis=1)
        for i in range(self.num_modalities):
            if mode == ModeConstants.uni_mode(i):
                return self.uni_logits[i].argmax(axis=1)
        raise InvalidArgumentError(f"unknown evaluation mode '{mode}'")


def certainty(logits: np.ndarray) -> np.ndarray:
    """c_j = max_k softmax(z_j)_k, in [1/K, 1]"""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] < 1:
        raise InvalidArgumentError(f"certainty needs a B x K matrix with K >= 1, got {z.shape}")
    return softmax(z).numpy().max(axis=1)


def weighted_logits(sources: Sequence[np.ndarray], T_lw: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Certainty-weighted combination of logit sources.

    w_j = softmax over sources of c_j / T_lw and Z_j = sum_s w_j^s z_j^s.

    Returns:
        (Z [B x K], weights [B x S]) with weight columns in source order
    """
    if not sources:
        raise InvalidArgumentError("weighted_logits needs at least one source")
    if not T_lw > 0 or not np.isfinite(T_lw):
        raise InvalidArgumentError(f"T_lw must be a positive finite number, got {T_lw}")
    stacked = [np.asarray(z, dtype=np.float64) for z in sources]
    if len({z.shape for z in stacked}) != 1 or stacked[0].ndim != 2:
        raise InvalidArgumentError(f"logit sources must share one B x K shape, got {[z.shape for z in stacked]}")
    if len(stacked) == 1:
        return stacked[0].copy(), np.ones((stacked[0].shape[0], 1))
    scores = np.stack([certainty(z) for z in stacked], axis=1) / T_lw
    weights = softmax(scores).numpy()
    combined = np.einsum("bs,sbk->bk", weights, np.stack(stacked, axis=0))
    return combined, weights


def predict(model: ModelState, inputs: Sequence[np.ndarray], T_lw: float = 1.0) -> PredictionBundle:
    """Per-modality head logits, fusion logits and their certainty-weighted combination"""
    features = extract_features(model, inputs)
    uni = tuple(head_logits(model.uni_head(i), h).numpy() for i, h in enumerate(features))
    fusion = head_logits(model.fusion_head(), fuse_concat(features)).numpy()
    sources = [*uni, fusion]
    combined, weights = weighted_logits(sources, T_lw)
    certainties = np.stack([certainty(z) for z in sources], axis=1)
    return PredictionBundle(uni, fusion, certainties, weights, combined)


def accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise InvalidArgumentError("accuracy of an empty dataset")
    return float((np.asarray(predictions) == labels).mean())


def evaluate(model: ModelState, dataset: MultimodalDataset, modes: Optional[Sequence[str]] = None,
             T_lw: float = 1.0) -> Dict[str, float]:
    """Top-1 accuracy per requested mode (uni1..uniM, fusion, preds_avg, weighted)"""
    known = ModeConstants.eval_modes(model.metadata.num_modalities)
    modes = list(modes) if modes is not None else known
    for mode in modes:
        if mode not in known:
            raise InvalidArgumentError(f"unknown evaluation mode '{mode}'; expected one of {known}")
    bundle = predict(model, dataset.inputs, T_lw)
    return {mode: accuracy(bundle.predictions(mode), dataset.labels) for mode in modes}


def per_sample_frame(model: ModelState, dataset: MultimodalDataset, T_lw: float = 1.0) -> pd.DataFrame:
    """sample,label,pred_uni1..M,pred_fusion,pred_weighted,c1..M,cf,w1..M,wf"""
    bundle = predict(model, dataset.inputs, T_lw)
    m = bundle.num_modalities
    frame: Dict[str, np.ndarray] = {"sample": np.arange(len(dataset)), "label": dataset.labels}
    for i in range(m):
        frame[f"pred_{ModeConstants.uni_mode(i)}"] = bundle.predictions(ModeConstants.uni_mode(i))
    frame["pred_fusion"] = bundle.predictions(ModeConstants.FUSION)
    frame["pred_weighted"] = bundle.predictions(ModeConstants.WEIGHTED)
    for i in range(m):
        frame[f"c{i + 1}"] = bundle.certainties[:, i]
    frame["cf"] = bundle.certainties[:, m]
    for i in range(m):
        frame[f"w{i + 1}"] = bundle.weights[:, i]
    frame["wf"] = bundle.weights[:, m]
    return pd.DataFrame(frame)


def multimodal_accuracy(metrics: Dict[str, float], mode: str) -> Optional[float]:
    """The accuracy a training mode reports as its multimodal number"""
    key = ModeConstants.MULTIMODAL_EVAL.get(mode)
    return metrics.get(key) if key else None


def source_order(num_modalities: int) -> List[str]:
    return [ModeConstants.uni_mode(i) for i in range(num_modalities)] + [ModeConstants.FUSION]
