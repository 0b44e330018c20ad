"""
Per-dimension effectiveness analysis of encoder features.

Each feature dimension is rated by how well a one-dimensional nearest-centroid
rule recovers the labels (or, alternatively, by its RMS magnitude). Dimensions
scoring above the modality's mean score are effective; the rest, ties
included, are ineffective. Cross sets pair one modality's ineffective
dimensions with another's effective ones.
"""

import logging
from dataclasses import dataclass
from itertools import permutations
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from services.model_service import ModelState, extract_features, head_logits
from services.synthdata_service import MultimodalDataset
from utils.error_handlers import InvalidArgumentError, MissingClassError

logger = logging.getLogger(__name__)

TIE_RTOL = 1e-12
TIE_ATOL = 1e-12

DimMetric = Literal["prediction", "l2norm"]


@dataclass(frozen=True)
class CentroidTable:
    centroids: np.ndarray  # K x d
    counts: np.ndarray     # K
    total: int


@dataclass(frozen=True)
class DimScores:
    scores: np.ndarray  # d, each in [0, 1] for the prediction metric

    @property
    def mean(self) -> float:
        return float(self.scores.mean())


@dataclass(frozen=True)
class ModalityDims:
    effective: Tuple[int, ...]
    ineffective: Tuple[int, ...]

    @property
    def feature_dim(self) -> int:
        return len(self.effective) + len(self.ineffective)


@dataclass(frozen=True)
class DimensionPartition:
    modalities: Tuple[ModalityDims, ...]
    metric: str = "prediction"
    scores: Optional[Tuple[Tuple[float, ...], ...]] = None

    def __post_init__(self):
        widths = {m.feature_dim for m in self.modalities}
        if len(widths) > 1:
            raise InvalidArgumentError(f"partitions cover different feature widths: {sorted(widths)}")

    @property
    def num_modalities(self) -> int:
        return len(self.modalities)

    @property
    def feature_dim(self) -> int:
        return self.modalities[0].feature_dim if self.modalities else 0

    def cross_set(self, learner: int, teacher: int) -> List[int]:
        """Dimensions ineffective for `learner` and effective for `teacher`, sorted"""
        return cross_sets(self.modalities[learner], self.modalities[teacher])[0]

    def all_cross_sets(self) -> Dict[Tuple[int, int], List[int]]:
        return {(a, b): self.cross_set(a, b) for a, b in permutations(range(self.num_modalities), 2)}

    def to_dict(self) -> Dict:
        return {
            "metric": self.metric,
            "modalities": [
                {"effective": list(m.effective), "ineffective": list(m.ineffective)} for m in self.modalities
            ],
            "scores": [list(s) for s in self.scores] if self.scores is not None else None,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "DimensionPartition":
        modalities = tuple(
            ModalityDims(tuple(int(x) for x in m["effective"]), tuple(int(x) for x in m["ineffective"]))
            for m in data["modalities"]
        )
        scores = data.get("scores")
        return cls(
            modalities=modalities,
            metric=data.get("metric", "prediction"),
            scores=tuple(tuple(float(v) for v in s) for s in scores) if scores is not None else None,
        )


def _check_features(features: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2 or labels.shape != (features.shape[0],):
        raise InvalidArgumentError(f"features {features.shape} and labels {labels.shape} disagree")
    return features, labels


def class_centroids(features: np.ndarray, labels: np.ndarray, num_classes: int) -> CentroidTable:
    features, labels = _check_features(features, labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise InvalidArgumentError(f"labels must lie in [0, {num_classes})")
    counts = np.bincount(labels, minlength=num_classes)
    for k in range(num_classes):
        if counts[k] == 0:
            raise MissingClassError(k)
    centroids = np.zeros((num_classes, features.shape[1]))
    np.add.at(centroids, labels, features)
    centroids /= counts[:, None]
    return CentroidTable(centroids, counts, int(counts.sum()))


def dimension_scores(features: np.ndarray, labels: np.ndarray, centroids: CentroidTable) -> DimScores:
    """
    Per-dimension nearest-centroid accuracy.

    For every sample and dimension m the predicted class is argmin_k
    |h[j, m] - centroid[k, m]|; equal distances resolve to the lowest class.
    """
    features, labels = _check_features(features, labels)
    if centroids.centroids.shape[1] != features.shape[1]:
        raise InvalidArgumentError(f"centroid width {centroids.centroids.shape[1]} != feature width {features.shape[1]}")
    # N x d x K distances; argmin returns the first minimum
    dist = np.abs(features[:, :, None] - centroids.centroids.T[None, :, :])
    predicted = dist.argmin(axis=2)
    scores = (predicted == labels[:, None]).mean(axis=0)
    return DimScores(scores)


def l2norm_scores(features: np.ndarray) -> DimScores:
    """Column RMS: sqrt(mean_j h[j, m]^2)"""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise InvalidArgumentError(f"l2norm_scores needs a non-empty N x d matrix, got {features.shape}")
    return DimScores(np.sqrt((features * features).mean(axis=0)))


def separate_dimensions(scores: DimScores) -> ModalityDims:
    """Effective iff strictly above the mean score; values equal to the mean are ineffective"""
    r = scores.scores
    mean = scores.mean
    above = (r > mean) & ~np.isclose(r, mean, rtol=TIE_RTOL, atol=TIE_ATOL)
    effective = tuple(int(m) for m in np.flatnonzero(above))
    ineffective = tuple(int(m) for m in np.flatnonzero(~above))
    return ModalityDims(effective, ineffective)


def cross_sets(p1: ModalityDims, p2: ModalityDims) -> Tuple[List[int], List[int]]:
    """(ineffective_1 & effective_2, effective_1 & ineffective_2), each sorted"""
    if p1.feature_dim != p2.feature_dim:
        raise InvalidArgumentError(f"partitions over different widths: {p1.feature_dim} vs {p2.feature_dim}")
    forward = sorted(set(p1.ineffective) & set(p2.effective))
    backward = sorted(set(p1.effective) & set(p2.ineffective))
    return forward, backward


def build_partition(per_modality: Sequence[DimScores], metric: str = "prediction") -> DimensionPartition:
    return DimensionPartition(
        modalities=tuple(separate_dimensions(s) for s in per_modality),
        metric=metric,
        scores=tuple(tuple(float(v) for v in s.scores) for s in per_modality),
    )


def compute_partition(model: ModelState, dataset: MultimodalDataset,
                      metric: DimMetric = "prediction") -> DimensionPartition:
    """Score every modality's features over the whole dataset once and separate the dimensions"""
    features = extract_features(model, dataset.inputs)
    per_modality = []
    for h in features:
        if metric == "prediction":
            table = class_centroids(h, dataset.labels, dataset.num_classes)
            per_modality.append(dimension_scores(h, dataset.labels, table))
        elif metric == "l2norm":
            per_modality.append(l2norm_scores(h))
        else:
            raise InvalidArgumentError(f"unknown dimension metric '{metric}'")
    partition = build_partition(per_modality, metric)
    for i, dims in enumerate(partition.modalities):
        logger.info(f"Modality {i + 1}: {len(dims.effective)} effective / {len(dims.ineffective)} ineffective "
                    f"dimensions (mean score {per_modality[i].mean:.4f}, metric={metric})")
    for (a, b), dims in partition.all_cross_sets().items():
        if not dims:
            logger.warning(f"Cross set for learner {a + 1} / teacher {b + 1} is empty")
    return partition


def masked_accuracy(model: ModelState, dataset: MultimodalDataset, modality: int,
                    keep_dims: Sequence[int], head: Literal["uni", "shared"] = "uni") -> float:
    """Top-1 accuracy of one modality with every feature outside keep_dims set to zero"""
    d = model.metadata.feature_dim
    keep = np.asarray(sorted(set(int(m) for m in keep_dims)), dtype=np.int64)
    if keep.size and (keep.min() < 0 or keep.max() >= d):
        raise InvalidArgumentError(f"keep_dims must lie in [0, {d})")
    h = extract_features(model, dataset.inputs)[modality]
    masked = np.zeros_like(h)
    masked[:, keep] = h[:, keep]
    if head == "uni":
        classifier = model.uni_head(modality)
    elif head == "shared":
        classifier = model.shared_head()
    else:
        raise InvalidArgumentError(f"unknown head '{head}'")
    predictions = head_logits(classifier, masked).numpy().argmax(axis=1)
    return float((predictions == dataset.labels).mean())


def partition_report(partition: DimensionPartition) -> Dict:
    """Effective counts per modality and pairwise effective overlap"""
    counts = {f"modality{i + 1}": len(m.effective) for i, m in enumerate(partition.modalities)}
    overlap = {}
    for a in range(partition.num_modalities):
        for b in range(a + 1, partition.num_modalities):
            shared = set(partition.modalities[a].effective) & set(partition.modalities[b].effective)
            overlap[f"modality{a + 1}_modality{b + 1}"] = len(shared)
    cross = {f"{a + 1}->{b + 1}": dims for (a, b), dims in partition.all_cross_sets().items()}
    return {
        "feature_dim": partition.feature_dim,
        "metric": partition.metric,
        "effective_counts": counts,
        "effective_overlap": overlap,
        "cross_sets": cross,
        "partition": partition.to_dict(),
    }


def partition_frame(partition: DimensionPartition) -> pd.DataFrame:
    """Rows of modality,dim,score,effective (modality is 1-based)"""
    rows = []
    for i, dims in enumerate(partition.modalities):
        effective = set(dims.effective)
        for m in range(dims.feature_dim):
            score = partition.scores[i][m] if partition.scores is not None else float("nan")
            rows.append({"modality": i + 1, "dim": m, "score": score, "effective": m in effective})
    return pd.DataFrame(rows, columns=["modality", "dim", "score", "effective"])
