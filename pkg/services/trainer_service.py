import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from constants.modes import ModeConstants
from services.dimsep_service import DimensionPartition, compute_partition
from services.experiment_config import ModelConfig, OptimizerSettings, TrainPlan
from services.loss_service import cross_entropy, fused_objective, modality_objective
from services.model_service import (
    FUSION_HEAD, SHARED_HEAD, ModelState, encode, extract_features, fuse_concat, head_logits, init_model,
)
from services.synthdata_service import MultimodalDataset, iterate_batches
from utils.autograd import GradientTape, backward
from utils.error_handlers import InvalidArgumentError, NumericError

logger = logging.getLogger(__name__)

EpochSink = Callable[[Dict], None]
StageHook = Callable[[str, ModelState], None]

STAGE_ENCODERS = "encoders"
STAGE_FUSION = "fusion"
STAGE_PROBES = "probes"
STAGE_JOINT = "joint"

_STAGE_STREAMS = {STAGE_ENCODERS: 0, STAGE_JOINT: 0, STAGE_FUSION: 1, STAGE_PROBES: 2}


class OptimizerState:
    """SGD with momentum, coupled weight decay and a single step-decay learning rate"""

    def __init__(self, settings: OptimizerSettings):
        self.settings = settings
        self.momentum_buffers: Dict[str, np.ndarray] = {}
        self.current_lr = settings.lr

    def lr_at(self, epoch: int) -> float:
        return self.settings.lr if epoch < self.settings.decay_epoch else self.settings.lr_decayed

    def begin_epoch(self, epoch: int) -> float:
        self.current_lr = self.lr_at(epoch)
        return self.current_lr


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
             opt: OptimizerState) -> Dict[str, np.ndarray]:
    """
    v <- mu * v + (g + wd * p); p <- p - lr * v

    Only parameters present in `grads` are stepped; the returned mapping holds
    their new values.
    """
    mu, wd, lr = opt.settings.momentum, opt.settings.weight_decay, opt.current_lr
    updated: Dict[str, np.ndarray] = {}
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise InvalidArgumentError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter '{name}'", parameter=name)
        v = opt.momentum_buffers.get(name)
        v = (g + wd * p) if v is None else mu * v + (g + wd * p)
        opt.momentum_buffers[name] = v
        updated[name] = p - lr * v
    return updated


def shuffle_seed(seed: int, stage: str, epoch: int) -> int:
    """Batch order depends only on (seed, stage, epoch), never on the training mode"""
    sequence = np.random.SeedSequence([seed % (2 ** 32), _STAGE_STREAMS[stage], epoch])
    return int(sequence.generate_state(1)[0])


def modality_accuracy(model: ModelState, dataset: MultimodalDataset, modality: int) -> float:
    h = encode(model.encoder(modality), dataset.inputs[modality])
    predictions = head_logits(model.uni_head(modality), h).numpy().argmax(axis=1)
    return float((predictions == dataset.labels).mean())


@dataclass
class TrainingResult:
    model: ModelState
    partition: Optional[DimensionPartition] = None
    epoch_log: List[Dict] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)


class TrainerService:
    """Two-stage detached training, fusion training, and the baseline schedules"""

    def __init__(self):
        self.epoch_sink: Optional[EpochSink] = None

    def _emit(self, record: Dict, log: List[Dict], sink: Optional[EpochSink]) -> None:
        log.append(record)
        logger.info(json.dumps(record, sort_keys=True))
        target = sink or self.epoch_sink
        if target is not None:
            target(record)

    # ------------------------------------------------------------------ #
    # Encoder stage
    # ------------------------------------------------------------------ #
    @staticmethod
    def trainable_names(model: ModelState, plan: TrainPlan, modality: int, phase: str) -> List[str]:
        """Parameters stepped by modality `modality`'s objective"""
        names = model.encoder_names(modality) + model.uni_head_names(modality)
        variant = plan.variant
        if variant in ("duc", "full", "dbc") and plan.loss.lambda_s > 0:
            names += model.names_with_prefix(SHARED_HEAD)
        if variant in ("full", "dbc") and phase == "main" and plan.loss.lambda_D > 0:
            for j in range(model.metadata.num_modalities):
                if j != modality:
                    names += model.encoder_names(j)
        return names

    @staticmethod
    def _needs_partition(plan: TrainPlan) -> bool:
        return plan.variant in ("duc", "full", "dbc")

    def train_encoders(self, plan: TrainPlan, dataset: MultimodalDataset, model: ModelState,
                       on_epoch: Optional[EpochSink] = None) -> TrainingResult:
        """
        Detached encoder training.

        Epochs before warmup_epochs optimize CE (+ shared-head CE); at warmup_epochs
        the dimension partition is computed once on the full training set and the
        contrastive term joins the objective. Every modality takes its own
        backward and step per batch, in modality order.
        """
        if plan.warmup_epochs > plan.epochs:
            raise InvalidArgumentError("warmup_epochs must not exceed epochs")
        if plan.mode == ModeConstants.JOINT:
            raise InvalidArgumentError("joint training has no detached encoder stage")
        m = model.metadata.num_modalities
        if plan.mode == ModeConstants.UNIMODAL:
            if not 0 <= plan.modality < m:
                raise InvalidArgumentError(f"modality {plan.modality} outside [0, {m})")
            modalities = [plan.modality]
        else:
            modalities = list(range(m))

        variant = plan.variant
        opt = OptimizerState(plan.optimizer)
        partition: Optional[DimensionPartition] = None
        log: List[Dict] = []
        warnings: List[str] = []
        every = plan.recompute_partition_every

        for epoch in range(plan.epochs):
            if self._needs_partition(plan):
                if epoch == plan.warmup_epochs:
                    partition = compute_partition(model, dataset, plan.dim_metric)
                    model = model.with_metadata(partition=partition)
                elif every and epoch > plan.warmup_epochs and (epoch - plan.warmup_epochs) % every == 0:
                    logger.warning(f"Recomputing dimension partition at epoch {epoch}")
                    partition = compute_partition(model, dataset, plan.dim_metric)
                    model = model.with_metadata(partition=partition)

            phase = "warmup" if epoch < plan.warmup_epochs else "main"
            lr = opt.begin_epoch(epoch)
            loss_sums = {i: 0.0 for i in modalities}
            for batch in iterate_batches(dataset, plan.batch_size, shuffle_seed(plan.seed, STAGE_ENCODERS, epoch)):
                for i in modalities:
                    with GradientTape() as tape:
                        bound = model.bind(tape, self.trainable_names(model, plan, i, phase))
                        loss = modality_objective(batch, model, i, partition, plan.loss, phase, variant,
                                                  bound, warnings)
                    grads = backward(loss, tape)
                    model = model.with_parameters(sgd_step(model.parameters, grads, opt))
                    loss_sums[i] += loss.item() * batch.size

            record = {
                "stage": STAGE_ENCODERS,
                "epoch": epoch,
                "phase": phase,
                "lr": lr,
                "loss": {ModeConstants.uni_mode(i): loss_sums[i] / len(dataset) for i in modalities},
                "accuracy": {ModeConstants.uni_mode(i): modality_accuracy(model, dataset, i) for i in modalities},
            }
            self._emit(record, log, on_epoch)

        if self._needs_partition(plan) and partition is None:
            logger.warning(f"warmup_epochs == epochs ({plan.epochs}): partition computed but the "
                           f"contrastive term was never used")
            partition = compute_partition(model, dataset, plan.dim_metric)
            model = model.with_metadata(partition=partition)

        for message in sorted(set(warnings)):
            logger.warning(message)
        return TrainingResult(model.with_metadata(phase=STAGE_ENCODERS), partition, log, sorted(set(warnings)))

    # ------------------------------------------------------------------ #
    # Frozen-feature stages
    # ------------------------------------------------------------------ #
    def _train_linear_head(self, plan: TrainPlan, model: ModelState, features: Sequence[np.ndarray],
                           labels: np.ndarray, num_classes: int, head_prefix: str, stage: str,
                           label: str, log: List[Dict], on_epoch: Optional[EpochSink]) -> ModelState:
        names = model.names_with_prefix(head_prefix)
        frozen = MultimodalDataset(tuple(features), labels, num_classes)
        opt = OptimizerState(plan.fusion_optimizer)
        for epoch in range(plan.fusion_epochs):
            lr = opt.begin_epoch(epoch)
            loss_sum = 0.0
            for batch in iterate_batches(frozen, plan.batch_size, shuffle_seed(plan.seed, stage, epoch)):
                with GradientTape() as tape:
                    bound = model.bind(tape, names)
                    head = model.head(head_prefix, bound)
                    loss = cross_entropy(head_logits(head, fuse_concat(batch.inputs)), batch.labels)
                grads = backward(loss, tape)
                model = model.with_parameters(sgd_step(model.parameters, grads, opt))
                loss_sum += loss.item() * batch.size
            logits = head_logits(model.head(head_prefix, None), fuse_concat(frozen.inputs)).numpy()
            record = {
                "stage": stage,
                "epoch": epoch,
                "phase": stage,
                "lr": lr,
                "loss": {label: loss_sum / len(frozen)},
                "accuracy": {label: float((logits.argmax(axis=1) == labels).mean())},
            }
            self._emit(record, log, on_epoch)
        return model

    def train_fusion(self, plan: TrainPlan, dataset: MultimodalDataset, model: ModelState,
                     on_epoch: Optional[EpochSink] = None) -> TrainingResult:
        """Train only the fusion head on concatenated features from the frozen encoders"""
        features = extract_features(model, dataset.inputs)
        log: List[Dict] = []
        model = self._train_linear_head(plan, model, features, dataset.labels, dataset.num_classes,
                                        FUSION_HEAD, STAGE_FUSION, ModeConstants.FUSION, log, on_epoch)
        return TrainingResult(model.with_metadata(phase=STAGE_FUSION), model.metadata.partition, log)

    def train_probes(self, plan: TrainPlan, dataset: MultimodalDataset, model: ModelState,
                     on_epoch: Optional[EpochSink] = None) -> TrainingResult:
        """Fresh per-modality linear heads on frozen encoder features (unimodal accuracy of joint training)"""
        features = extract_features(model, dataset.inputs)
        fresh = init_model_heads(model, plan.seed)
        log: List[Dict] = []
        for i, h in enumerate(features):
            fresh = self._train_linear_head(plan, fresh, [h], dataset.labels, dataset.num_classes,
                                            f"uni_head.{i}", STAGE_PROBES, ModeConstants.uni_mode(i),
                                            log, on_epoch)
        return TrainingResult(fresh.with_metadata(phase=STAGE_PROBES), model.metadata.partition, log)

    # ------------------------------------------------------------------ #
    # Joint baseline
    # ------------------------------------------------------------------ #
    def train_joint(self, plan: TrainPlan, dataset: MultimodalDataset, model: ModelState,
                    on_epoch: Optional[EpochSink] = None) -> TrainingResult:
        """One fused cross-entropy objective updating every encoder and the fusion head"""
        m = model.metadata.num_modalities
        names = [n for i in range(m) for n in model.encoder_names(i)] + model.names_with_prefix(FUSION_HEAD)
        opt = OptimizerState(plan.optimizer)
        log: List[Dict] = []
        for epoch in range(plan.epochs):
            lr = opt.begin_epoch(epoch)
            loss_sum = 0.0
            for batch in iterate_batches(dataset, plan.batch_size, shuffle_seed(plan.seed, STAGE_JOINT, epoch)):
                with GradientTape() as tape:
                    bound = model.bind(tape, names)
                    loss = fused_objective(batch, model, bound)
                grads = backward(loss, tape)
                model = model.with_parameters(sgd_step(model.parameters, grads, opt))
                loss_sum += loss.item() * batch.size
            features = extract_features(model, dataset.inputs)
            logits = head_logits(model.fusion_head(), fuse_concat(features)).numpy()
            record = {
                "stage": STAGE_JOINT,
                "epoch": epoch,
                "phase": "main",
                "lr": lr,
                "loss": {ModeConstants.FUSION: loss_sum / len(dataset)},
                "accuracy": {ModeConstants.FUSION: float((logits.argmax(axis=1) == dataset.labels).mean())},
            }
            self._emit(record, log, on_epoch)
        return TrainingResult(model.with_metadata(phase=STAGE_JOINT), None, log)

    # ------------------------------------------------------------------ #
    # Pipelines
    # ------------------------------------------------------------------ #
    def train_baseline(self, plan: TrainPlan, dataset: MultimodalDataset, model: Optional[ModelState] = None,
                       model_seed: Optional[int] = None, on_stage: Optional[StageHook] = None,
                       on_epoch: Optional[EpochSink] = None,
                       config: Optional[ModelConfig] = None) -> TrainingResult:
        """
        Full schedule for `plan.mode`.

        joint: fused training then linear probes; unimodal: one modality alone;
        every other mode: detached encoder stage then the frozen fusion stage.
        `on_stage` is called with the stage name and the model after each stage.
        """
        if plan.mode not in ModeConstants.TRAINING_MODES:
            raise InvalidArgumentError(f"unknown training mode '{plan.mode}'")
        if model is None:
            if config is None:
                raise InvalidArgumentError("either a model or a model config is required")
            model = init_model(config, plan.seed if model_seed is None else model_seed)

        logger.info(f"Training mode={plan.mode} seed={plan.seed} epochs={plan.epochs} "
                    f"warmup={plan.warmup_epochs} fusion_epochs={plan.fusion_epochs}")
        log: List[Dict] = []

        if plan.mode == ModeConstants.JOINT:
            joint = self.train_joint(plan, dataset, model, on_epoch)
            log += joint.epoch_log
            if on_stage:
                on_stage(STAGE_JOINT, joint.model)
            probes = self.train_probes(plan, dataset, joint.model, on_epoch)
            log += probes.epoch_log
            if on_stage:
                on_stage(STAGE_PROBES, probes.model)
            return TrainingResult(probes.model, None, log)

        encoders = self.train_encoders(plan, dataset, model, on_epoch)
        log += encoders.epoch_log
        if on_stage:
            on_stage(STAGE_ENCODERS, encoders.model)
        if plan.mode == ModeConstants.UNIMODAL:
            return TrainingResult(encoders.model, encoders.partition, log, encoders.warnings)

        fusion = self.train_fusion(plan, dataset, encoders.model, on_epoch)
        log += fusion.epoch_log
        if on_stage:
            on_stage(STAGE_FUSION, fusion.model)
        return TrainingResult(fusion.model, encoders.partition, log, encoders.warnings)


def init_model_heads(model: ModelState, seed: int) -> ModelState:
    """`model` with every per-modality head reset to its seeded initial value"""
    meta = model.metadata
    fresh = init_model(ModelConfig(
        hidden_dims=list(meta.hidden_dims),
        feature_dim=meta.feature_dim,
        input_dims=list(meta.input_dims),
        num_classes=meta.num_classes,
        num_modalities=meta.num_modalities,
    ), seed)
    resets = {}
    for i in range(meta.num_modalities):
        for name in fresh.uni_head_names(i):
            resets[name] = fresh.parameters[name]
    return model.with_parameters(resets)


# Global trainer instance
trainer_service = TrainerService()
