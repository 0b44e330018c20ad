import logging
from typing import Dict, List, Literal, Mapping, Optional, Sequence

import numpy as np

from services.dimsep_service import DimensionPartition
from services.experiment_config import LossWeights
from services.model_service import ModelState, encode, fuse_concat, head_logits
from services.synthdata_service import MultimodalBatch
from utils.autograd import (
    ArrayLike, Tensor, add, as_tensor, log_softmax, mean, mul, pairwise_distance, pick, scale,
    softmax, stop_gradient, sub, take_columns, total,
)
from utils.error_handlers import InvalidArgumentError

logger = logging.getLogger(__name__)

Phase = Literal["warmup", "main"]
Variant = Literal["duc", "full", "dbc", "cm_dist", "none"]

PHASES = ("warmup", "main")
VARIANTS = ("duc", "full", "dbc", "cm_dist", "none")


def _zero() -> Tensor:
    return Tensor(0.0)


def _check_temperature(name: str, value: float) -> None:
    if not value > 0 or not np.isfinite(value):
        raise InvalidArgumentError(f"{name} must be a positive finite number, got {value}")


def cross_entropy(logits: ArrayLike, labels: Sequence[int]) -> Tensor:
    """Batch mean of -log softmax(z)[y]"""
    z = as_tensor(logits)
    y = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or y.shape != (z.shape[0],):
        raise InvalidArgumentError(f"cross_entropy: logits {z.shape} with labels {y.shape}")
    if y.size == 0:
        raise InvalidArgumentError("cross_entropy of an empty batch")
    if y.min() < 0 or y.max() >= z.shape[1]:
        raise InvalidArgumentError(f"labels must lie in [0, {z.shape[1]})")
    return scale(mean(pick(log_softmax(z), y)), -1.0)


def directional_contrastive(learner: ArrayLike, teacher: ArrayLike, dims: Optional[Sequence[int]],
                            temperature: float, detach_teacher: bool) -> Tensor:
    """
    In-batch InfoNCE with similarity -||a_j - b_l|| / T over the selected dimensions.

    Row j of the learner is pulled toward row j of the teacher; the softmax
    denominator runs over the whole batch including the positive. `dims=None`
    uses every dimension; an empty list gives exactly 0.
    """
    _check_temperature("temperature", temperature)
    a, b = as_tensor(learner), as_tensor(teacher)
    if a.ndim != 2 or a.shape != b.shape:
        raise InvalidArgumentError(f"contrastive: learner {a.shape} and teacher {b.shape} disagree")
    if a.shape[0] == 0:
        raise InvalidArgumentError("contrastive loss of an empty batch")
    if dims is not None:
        if len(dims) == 0:
            return _zero()
        a, b = take_columns(a, dims), take_columns(b, dims)
    if detach_teacher:
        b = stop_gradient(b)
    logits = scale(pairwise_distance(a, b), -1.0 / temperature)
    return scale(mean(pick(log_softmax(logits), np.arange(a.shape[0]))), -1.0)


def _empty_cross_set(learner: int, teacher: int, warnings: Optional[List[str]]) -> None:
    message = f"empty cross set for learner modality {learner + 1} / teacher modality {teacher + 1}; DUC term is 0"
    logger.debug(message)
    if warnings is not None:
        warnings.append(message)


def duc_term(features: Sequence[ArrayLike], partition: DimensionPartition, learner: int, teacher: int,
             temperature: float, warnings: Optional[List[str]] = None) -> Tensor:
    """Unidirectional term: learner's ineffective dims toward teacher's effective dims, teacher stop-gradient"""
    _check_temperature("T_duc", temperature)
    dims = partition.cross_set(learner, teacher)
    if not dims:
        _empty_cross_set(learner, teacher, warnings)
        return _zero()
    return directional_contrastive(features[learner], features[teacher], dims, temperature, detach_teacher=True)


def duc_loss(h1: ArrayLike, h2: ArrayLike, partition: DimensionPartition, T: float, direction: int,
             warnings: Optional[List[str]] = None) -> Tensor:
    """direction 1 learns h1 on ne1 & e2 from a frozen h2; direction 2 learns h2 on e1 & ne2 from a frozen h1"""
    if direction == 1:
        return duc_term((h1, h2), partition, 0, 1, T, warnings)
    if direction == 2:
        return duc_term((h1, h2), partition, 1, 0, T, warnings)
    raise InvalidArgumentError(f"direction must be 1 or 2, got {direction}")


def contrastive_loss_full(h1: ArrayLike, h2: ArrayLike, T: float) -> Tensor:
    """Symmetric InfoNCE over every dimension, both sides receiving gradient"""
    forward = directional_contrastive(h1, h2, None, T, detach_teacher=False)
    backward = directional_contrastive(h2, h1, None, T, detach_teacher=False)
    return scale(add(forward, backward), 0.5)


def dbc_loss(h1: ArrayLike, h2: ArrayLike, partition: DimensionPartition, T: float,
             warnings: Optional[List[str]] = None) -> Tensor:
    """Both DUC directions summed, without stop-gradient on either side"""
    _check_temperature("T_duc", T)
    total_loss = _zero()
    for learner, teacher, (a, b) in ((0, 1, (h1, h2)), (1, 0, (h2, h1))):
        dims = partition.cross_set(learner, teacher)
        if not dims:
            _empty_cross_set(learner, teacher, warnings)
            continue
        total_loss = add(total_loss, directional_contrastive(a, b, dims, T, detach_teacher=False))
    return total_loss


def cm_dist_loss(z_self: ArrayLike, z_other: ArrayLike, T_kd: float) -> Tensor:
    """T^2 * KL(softmax(z_other / T) || softmax(z_self / T)), batch mean; z_other is the frozen teacher"""
    _check_temperature("T_kd", T_kd)
    student, teacher = as_tensor(z_self), stop_gradient(z_other)
    if student.ndim != 2 or student.shape != teacher.shape:
        raise InvalidArgumentError(f"cm_dist: logits {student.shape} and {teacher.shape} disagree")
    log_q = log_softmax(scale(student, 1.0 / T_kd))
    log_p = log_softmax(scale(teacher, 1.0 / T_kd))
    p = softmax(scale(teacher, 1.0 / T_kd))
    kl_sum = total(mul(p, sub(log_p, log_q)))
    return scale(kl_sum, T_kd * T_kd / student.shape[0])


# --------------------------------------------------------------------------- #
# Per-modality objective
# --------------------------------------------------------------------------- #
def _mean_of(terms: List[Tensor]) -> Tensor:
    if not terms:
        return _zero()
    acc = terms[0]
    for t in terms[1:]:
        acc = add(acc, t)
    return scale(acc, 1.0 / len(terms))


def modality_objective_terms(batch: MultimodalBatch, model: ModelState, modality: int,
                             partition: Optional[DimensionPartition], weights: LossWeights,
                             phase: Phase, variant: Variant = "duc",
                             bound: Optional[Mapping[str, Tensor]] = None,
                             warnings: Optional[List[str]] = None) -> Dict[str, Tensor]:
    """
    Weighted terms of one modality's training objective.

    Keys: "ce", optionally "shared_ce", "contrastive" or "distill", and "total".
    Terms whose weight is zero are not evaluated. Only the terms listed for a
    variant touch other modalities' parameters; for "duc" those are behind a
    stop-gradient.
    """
    if phase not in PHASES:
        raise InvalidArgumentError(f"unknown phase '{phase}'")
    if variant not in VARIANTS:
        raise InvalidArgumentError(f"unknown objective variant '{variant}'")
    m = model.metadata.num_modalities
    if not 0 <= modality < m:
        raise InvalidArgumentError(f"modality {modality} outside [0, {m})")
    if variant in ("duc", "full", "dbc") and phase == "main" and partition is None:
        raise InvalidArgumentError("the main phase needs a dimension partition")

    labels = batch.labels
    features: Dict[int, Tensor] = {}

    def feature(i: int) -> Tensor:
        if i not in features:
            features[i] = encode(model.encoder(i, bound), batch.inputs[i])
        return features[i]

    h = feature(modality)
    terms: Dict[str, Tensor] = {"ce": cross_entropy(head_logits(model.uni_head(modality, bound), h), labels)}
    others = [j for j in range(m) if j != modality]

    if variant == "cm_dist":
        if weights.lambda_kd > 0:
            z_self = head_logits(model.uni_head(modality, bound), h)
            kd = [cm_dist_loss(z_self, head_logits(model.uni_head(j, bound), feature(j)), weights.T_kd)
                  for j in others]
            terms["distill"] = scale(_mean_of(kd), weights.lambda_kd)
    elif variant in ("duc", "full", "dbc"):
        if weights.lambda_s > 0:
            shared = cross_entropy(head_logits(model.shared_head(bound), h), labels)
            terms["shared_ce"] = scale(shared, weights.lambda_s)
        if phase == "main" and weights.lambda_D > 0:
            pulls = []
            for j in others:
                if variant == "duc":
                    feats = {modality: h, j: stop_gradient(feature(j))}
                    pulls.append(duc_term(feats, partition, modality, j, weights.T_duc, warnings))
                elif variant == "dbc":
                    dims = partition.cross_set(modality, j)
                    if not dims:
                        _empty_cross_set(modality, j, warnings)
                        pulls.append(_zero())
                    else:
                        pulls.append(directional_contrastive(h, feature(j), dims, weights.T_duc, False))
                else:
                    pulls.append(directional_contrastive(h, feature(j), None, weights.T_duc, False))
            terms["contrastive"] = scale(_mean_of(pulls), weights.lambda_D)

    objective = terms["ce"]
    for name in ("shared_ce", "contrastive", "distill"):
        if name in terms:
            objective = add(objective, terms[name])
    terms["total"] = objective
    return terms


def modality_objective(batch: MultimodalBatch, model: ModelState, modality: int,
                       partition: Optional[DimensionPartition], weights: LossWeights,
                       phase: Phase, variant: Variant = "duc",
                       bound: Optional[Mapping[str, Tensor]] = None,
                       warnings: Optional[List[str]] = None) -> Tensor:
    """warmup: CE + lambda_s * shared CE; main: additionally + lambda_D * contrastive term"""
    return modality_objective_terms(batch, model, modality, partition, weights, phase, variant,
                                    bound, warnings)["total"]


def fused_objective(batch: MultimodalBatch, model: ModelState,
                    bound: Optional[Mapping[str, Tensor]] = None) -> Tensor:
    """Cross-entropy of the fusion head on concatenated features from every encoder"""
    features = [encode(model.encoder(i, bound), x) for i, x in enumerate(batch.inputs)]
    return cross_entropy(head_logits(model.fusion_head(bound), fuse_concat(features)), batch.labels)
