from __future__ import annotations

import hashlib
import logging
import zlib
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from services.experiment_config import ModelConfig
from utils.autograd import ArrayLike, GradientTape, Tensor, add, as_tensor, concat, matmul, relu, transpose
from utils.error_handlers import InvalidArgumentError

if TYPE_CHECKING:
    from services.dimsep_service import DimensionPartition

logger = logging.getLogger(__name__)

SHARED_HEAD = "shared_head"
FUSION_HEAD = "fusion_head"


def encoder_prefix(modality: int) -> str:
    return f"encoder.{modality}"


def uni_head_prefix(modality: int) -> str:
    return f"uni_head.{modality}"


@dataclass(frozen=True)
class EncoderParams:
    """MLP layers as (weight [out x in], bias [out]) pairs; ReLU between layers, none after the last"""
    layers: Tuple[Tuple[Tensor, Tensor], ...]

    def __post_init__(self):
        if not self.layers:
            raise InvalidArgumentError("an encoder needs at least one layer")
        for k, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise InvalidArgumentError(f"layer {k}: weight {w.shape} and bias {b.shape} disagree")
            if k and w.shape[1] != self.layers[k - 1][0].shape[0]:
                raise InvalidArgumentError(f"layer {k}: input width {w.shape[1]} does not chain "
                                           f"from {self.layers[k - 1][0].shape[0]}")

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1][0].shape[0]


@dataclass(frozen=True)
class LinearHead:
    weight: Tensor  # [d_in x K]
    bias: Tensor    # [K]

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise InvalidArgumentError(f"head weight {self.weight.shape} and bias {self.bias.shape} disagree")

    @property
    def input_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]


@dataclass(frozen=True)
class ModelMetadata:
    input_dims: Tuple[int, ...]
    hidden_dims: Tuple[int, ...]
    feature_dim: int
    num_classes: int
    phase: str = "init"
    partition: Optional["DimensionPartition"] = None

    @property
    def num_modalities(self) -> int:
        return len(self.input_dims)

    def layer_sizes(self, modality: int) -> List[int]:
        return [self.input_dims[modality], *self.hidden_dims, self.feature_dim]

    def to_dict(self) -> Dict:
        return {
            "input_dims": list(self.input_dims),
            "hidden_dims": list(self.hidden_dims),
            "feature_dim": self.feature_dim,
            "num_classes": self.num_classes,
            "phase": self.phase,
        }


@dataclass(frozen=True)
class ModelState:
    """
    Every trainable array of the model keyed by dotted parameter name.

    Naming: encoder.{i}.layer.{l}.weight|bias, uni_head.{i}.weight|bias,
    shared_head.weight|bias, fusion_head.weight|bias. Arrays are read-only;
    updates produce a new state through `with_parameters`.
    """
    metadata: ModelMetadata
    parameters: Dict[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        for arr in self.parameters.values():
            if arr.flags.writeable:
                arr.setflags(write=False)

    # -- views ------------------------------------------------------------ #
    def encoder(self, modality: int, bound: Optional[Mapping[str, ArrayLike]] = None) -> EncoderParams:
        source = self.parameters if bound is None else bound
        prefix = encoder_prefix(modality)
        layers = []
        for layer in range(len(self.metadata.hidden_dims) + 1):
            layers.append((as_tensor(source[f"{prefix}.layer.{layer}.weight"]),
                           as_tensor(source[f"{prefix}.layer.{layer}.bias"])))
        return EncoderParams(tuple(layers))

    def head(self, prefix: str, bound: Optional[Mapping[str, ArrayLike]] = None) -> LinearHead:
        source = self.parameters if bound is None else bound
        return LinearHead(as_tensor(source[f"{prefix}.weight"]), as_tensor(source[f"{prefix}.bias"]))

    def uni_head(self, modality: int, bound: Optional[Mapping[str, ArrayLike]] = None) -> LinearHead:
        return self.head(uni_head_prefix(modality), bound)

    def shared_head(self, bound: Optional[Mapping[str, ArrayLike]] = None) -> LinearHead:
        return self.head(SHARED_HEAD, bound)

    def fusion_head(self, bound: Optional[Mapping[str, ArrayLike]] = None) -> LinearHead:
        return self.head(FUSION_HEAD, bound)

    # -- parameter groups --------------------------------------------------- #
    def names_with_prefix(self, prefix: str) -> List[str]:
        return [name for name in self.parameters if name == prefix or name.startswith(prefix + ".")]

    def encoder_names(self, modality: int) -> List[str]:
        return self.names_with_prefix(encoder_prefix(modality))

    def uni_head_names(self, modality: int) -> List[str]:
        return self.names_with_prefix(uni_head_prefix(modality))

    def bind(self, tape: GradientTape, trainable: Iterable[str]) -> Dict[str, Tensor]:
        """Tensors for a forward pass: trainable names are watched on `tape`, the rest are constants"""
        trainable = set(trainable)
        unknown = trainable - set(self.parameters)
        if unknown:
            raise InvalidArgumentError(f"unknown parameters: {sorted(unknown)}")
        return {name: tape.watch(value, name) if name in trainable else Tensor(value)
                for name, value in self.parameters.items()}

    # -- updates ------------------------------------------------------------ #
    def with_parameters(self, updates: Mapping[str, np.ndarray]) -> "ModelState":
        merged = dict(self.parameters)
        for name, value in updates.items():
            if name not in merged:
                raise InvalidArgumentError(f"unknown parameter '{name}'")
            if np.shape(value) != merged[name].shape:
                raise InvalidArgumentError(f"{name}: shape {np.shape(value)} != {merged[name].shape}")
            merged[name] = np.array(value, dtype=np.float64)
        return ModelState(self.metadata, merged)

    def with_metadata(self, **changes) -> "ModelState":
        return ModelState(replace(self.metadata, **changes), self.parameters)

    @property
    def parameter_count(self) -> int:
        return int(sum(arr.size for arr in self.parameters.values()))

    def checksum(self, names: Optional[Sequence[str]] = None) -> str:
        """SHA-256 over names, shapes and raw bytes of the selected parameters"""
        digest = hashlib.sha256()
        for name in (names if names is not None else sorted(self.parameters)):
            arr = np.ascontiguousarray(self.parameters[name], dtype="<f8")
            digest.update(name.encode("utf-8"))
            digest.update(str(arr.shape).encode("utf-8"))
            digest.update(arr.tobytes())
        return digest.hexdigest()


# --------------------------------------------------------------------------- #
# Forward operations
# --------------------------------------------------------------------------- #
def encode(enc: EncoderParams, x: ArrayLike) -> Tensor:
    """h = phi(x); x is B x d_in"""
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != enc.input_dim:
        raise InvalidArgumentError(f"encoder expects width {enc.input_dim}, got shape {x.shape}")
    h = x
    last = len(enc.layers) - 1
    for k, (w, b) in enumerate(enc.layers):
        h = add(matmul(h, transpose(w)), b)
        if k < last:
            h = relu(h)
    return h


def head_logits(head: LinearHead, h: ArrayLike) -> Tensor:
    h = as_tensor(h)
    if h.ndim != 2 or h.shape[1] != head.input_dim:
        raise InvalidArgumentError(f"head expects width {head.input_dim}, got shape {h.shape}")
    return add(matmul(h, head.weight), head.bias)


def fuse_concat(features: Sequence[ArrayLike]) -> Tensor:
    """Column block i of the result is modality i's features"""
    tensors = [as_tensor(f) for f in features]
    if not tensors:
        raise InvalidArgumentError("fuse_concat needs at least one feature matrix")
    if len({t.shape for t in tensors}) != 1:
        raise InvalidArgumentError(f"fuse_concat: ragged feature shapes {[t.shape for t in tensors]}")
    return concat(tensors, axis=1)


# --------------------------------------------------------------------------- #
# Construction
# --------------------------------------------------------------------------- #
def _uniform(seed: int, name: str, fan_in: int, fan_out: int, shape: Tuple[int, ...]) -> np.ndarray:
    # one stream per parameter name so a modality's init is independent of M and the training mode
    rng = np.random.default_rng([seed % (2 ** 32), zlib.crc32(name.encode("utf-8"))])
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def _linear(params: Dict[str, np.ndarray], seed: int, prefix: str, fan_in: int, fan_out: int,
            transposed: bool) -> None:
    shape = (fan_out, fan_in) if transposed else (fan_in, fan_out)
    params[f"{prefix}.weight"] = _uniform(seed, f"{prefix}.weight", fan_in, fan_out, shape)
    params[f"{prefix}.bias"] = np.zeros(fan_out)


def init_model(config: ModelConfig, seed: int) -> ModelState:
    """Seeded Glorot-uniform weights and zero biases; same (config, seed) gives a bitwise-identical state"""
    if config.input_dims is None or config.num_classes is None:
        raise InvalidArgumentError("model config needs input_dims and num_classes resolved")
    if any(d < 1 for d in [*config.input_dims, *config.hidden_dims]):
        raise InvalidArgumentError("all layer widths must be positive")
    metadata = ModelMetadata(
        input_dims=tuple(config.input_dims),
        hidden_dims=tuple(config.hidden_dims),
        feature_dim=config.feature_dim,
        num_classes=config.num_classes,
    )
    d, k, m = metadata.feature_dim, metadata.num_classes, metadata.num_modalities
    params: Dict[str, np.ndarray] = {}
    for i in range(m):
        sizes = metadata.layer_sizes(i)
        for layer, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            _linear(params, seed, f"{encoder_prefix(i)}.layer.{layer}", fan_in, fan_out, transposed=True)
    for i in range(m):
        _linear(params, seed, uni_head_prefix(i), d, k, transposed=False)
    _linear(params, seed, SHARED_HEAD, d, k, transposed=False)
    _linear(params, seed, FUSION_HEAD, m * d, k, transposed=False)

    state = ModelState(metadata, params)
    logger.debug(f"Initialized model seed={seed}: M={m}, d={d}, K={k}, {state.parameter_count} parameters")
    return state


def expected_parameter_count(input_dims: Sequence[int], hidden_dims: Sequence[int],
                             feature_dim: int, num_classes: int) -> int:
    m, d, k = len(input_dims), feature_dim, num_classes
    count = 0
    for d_in in input_dims:
        sizes = [d_in, *hidden_dims, d]
        count += sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
    count += m * (d * k + k)      # per-modality heads
    count += d * k + k            # shared head
    count += m * d * k + k        # fusion head
    return count


def extract_features(model: ModelState, inputs: Sequence[np.ndarray]) -> List[np.ndarray]:
    """Encoder outputs per modality, computed without a tape"""
    if len(inputs) != model.metadata.num_modalities:
        raise InvalidArgumentError(f"expected {model.metadata.num_modalities} modalities, got {len(inputs)}")
    return [encode(model.encoder(i), x).numpy() for i, x in enumerate(inputs)]
