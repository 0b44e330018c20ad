import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from services.experiment_config import SyntheticRecipe, check_recipe
from utils.container_io import pack_arrays, read_framed, unpack_arrays, write_framed
from utils.error_handlers import ContainerFormatError, InvalidArgumentError

logger = logging.getLogger(__name__)

DATASET_FORMAT_VERSION = 1


@dataclass(frozen=True)
class MultimodalBatch:
    """Paired samples across modalities; inputs[i] is B x d_in_i"""
    inputs: Tuple[np.ndarray, ...]
    labels: np.ndarray

    @property
    def size(self) -> int:
        return int(self.labels.shape[0])


@dataclass(frozen=True)
class MultimodalDataset:
    inputs: Tuple[np.ndarray, ...]
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        n = self.labels.shape[0]
        for i, x in enumerate(self.inputs):
            if x.ndim != 2 or x.shape[0] != n:
                raise InvalidArgumentError(f"modality {i}: expected {n} rows, got shape {x.shape}")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InvalidArgumentError(f"labels must lie in [0, {self.num_classes})")
        for arr in (*self.inputs, self.labels):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def num_modalities(self) -> int:
        return len(self.inputs)

    @property
    def input_dims(self) -> List[int]:
        return [x.shape[1] for x in self.inputs]

    def as_batch(self) -> MultimodalBatch:
        return MultimodalBatch(self.inputs, self.labels)

    def subset(self, indices: Sequence[int]) -> "MultimodalDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return MultimodalDataset(tuple(x[idx] for x in self.inputs), self.labels[idx], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


# --------------------------------------------------------------------------- #
# Generation
# --------------------------------------------------------------------------- #
def _balanced_labels(rng: np.random.Generator, n: int, num_classes: int) -> np.ndarray:
    return rng.permutation(np.arange(n) % num_classes).astype(np.int64)


def _draw_split(recipe: SyntheticRecipe, rng: np.random.Generator, n: int,
                informative_protos: List[np.ndarray], shared_proto: np.ndarray) -> MultimodalDataset:
    labels = _balanced_labels(rng, n, recipe.num_classes)
    inputs = []
    for i in range(recipe.num_modalities):
        width = recipe.input_dims[i]
        x = recipe.noise_std * rng.standard_normal((n, width))
        informative = list(recipe.informative_dims[i])
        if informative:
            x[:, informative] += recipe.prototype_scale * informative_protos[i][labels]
        if recipe.shared_dims:
            x[:, list(recipe.shared_dims)] += recipe.shared_scale * shared_proto[labels]
        inputs.append(x)

    # a corrupted sample loses one random modality: that row becomes pure noise
    corrupted = rng.random(n) < recipe.corruption_rate
    victim = rng.integers(0, recipe.num_modalities, size=n)
    for i, x in enumerate(inputs):
        rows = np.flatnonzero(corrupted & (victim == i))
        if rows.size:
            x[rows] = recipe.corruption_std * rng.standard_normal((rows.size, x.shape[1]))
    if recipe.modality_scales:
        inputs = [s * x for s, x in zip(recipe.modality_scales, inputs)]
    return MultimodalDataset(tuple(inputs), labels, recipe.num_classes)


def generate(recipe: SyntheticRecipe) -> Tuple[MultimodalDataset, MultimodalDataset]:
    """
    Draw the (train, test) pair described by `recipe`.

    Class prototypes are drawn once per modality from a seeded standard normal;
    classes outside a modality's informative class list share the zero prototype
    there. Shared dimensions carry one prototype table common to every modality.
    """
    check_recipe(recipe)
    seed = 0 if recipe.seed is None else int(recipe.seed)
    rng = np.random.default_rng(seed)

    informative_protos = []
    for i in range(recipe.num_modalities):
        protos = rng.standard_normal((recipe.num_classes, len(recipe.informative_dims[i])))
        carried = set(recipe.classes_for(i))
        for k in range(recipe.num_classes):
            if k not in carried:
                protos[k] = 0.0
        informative_protos.append(protos)
    shared_proto = rng.standard_normal((recipe.num_classes, len(recipe.shared_dims)))

    train = _draw_split(recipe, rng, recipe.train_samples, informative_protos, shared_proto)
    test = _draw_split(recipe, rng, recipe.test_samples, informative_protos, shared_proto)
    logger.info(f"Generated recipe {recipe.name or '<custom>'} seed={seed}: "
                f"{len(train)} train / {len(test)} test samples, M={recipe.num_modalities}, K={recipe.num_classes}")
    return train, test


def iterate_batches(dataset: MultimodalDataset, batch_size: int,
                    shuffle_seed: Optional[int] = None) -> List[MultimodalBatch]:
    """One epoch of batches; the last partial batch is kept. No shuffle when shuffle_seed is None."""
    if batch_size < 1:
        raise InvalidArgumentError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    if n == 0:
        raise InvalidArgumentError("cannot batch an empty dataset")
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(n)
    batches = []
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        batches.append(MultimodalBatch(tuple(x[idx] for x in dataset.inputs), dataset.labels[idx]))
    return batches


# --------------------------------------------------------------------------- #
# On-disk formats
# --------------------------------------------------------------------------- #
def save_dataset(path: Union[str, Path], train: MultimodalDataset, test: MultimodalDataset,
                 recipe: Optional[SyntheticRecipe] = None) -> Path:
    """Write the `.dml` container: JSON header plus float64 modality blobs and int32 label blobs"""
    arrays: Dict[str, np.ndarray] = {}
    for split_name, split in (("train", train), ("test", test)):
        for i, x in enumerate(split.inputs):
            arrays[f"{split_name}.modality.{i}"] = x
        arrays[f"{split_name}.labels"] = split.labels.astype(np.int32)
    directory, blob = pack_arrays(arrays)
    header = {
        "format_version": DATASET_FORMAT_VERSION,
        "recipe": recipe.model_dump(mode="json") if recipe is not None else None,
        "num_classes": train.num_classes,
        "num_modalities": train.num_modalities,
        "counts": {"train": len(train), "test": len(test)},
        "input_dims": train.input_dims,
        "tensors": directory,
    }
    written = write_framed(path, header, blob)
    logger.info(f"Saved dataset to {written} ({len(blob)} data bytes)")
    return written


def load_dataset(path: Union[str, Path]) -> Tuple[MultimodalDataset, MultimodalDataset, Optional[SyntheticRecipe]]:
    header, blob = read_framed(path)
    if header.get("format_version") != DATASET_FORMAT_VERSION:
        raise ContainerFormatError(f"unsupported dataset format version {header.get('format_version')}")
    arrays = unpack_arrays(header["tensors"], blob)
    k, m = int(header["num_classes"]), int(header["num_modalities"])
    splits = []
    for split_name in ("train", "test"):
        inputs = tuple(arrays[f"{split_name}.modality.{i}"] for i in range(m))
        labels = arrays[f"{split_name}.labels"].astype(np.int64)
        splits.append(MultimodalDataset(inputs, labels, k))
    recipe = SyntheticRecipe.model_validate(header["recipe"]) if header.get("recipe") else None
    return splits[0], splits[1], recipe


def modality_frame(dataset: MultimodalDataset, modality: int, column_prefix: str = "dim_") -> pd.DataFrame:
    x = dataset.inputs[modality]
    df = pd.DataFrame(x, columns=[f"{column_prefix}{j}" for j in range(x.shape[1])])
    df["label"] = dataset.labels
    return df


def export_csv(dataset: MultimodalDataset, out_dir: Union[str, Path], prefix: str = "train") -> List[Path]:
    """One CSV per modality with header dim_0..dim_{d-1},label"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i in range(dataset.num_modalities):
        path = out_dir / f"{prefix}_modality{i + 1}.csv"
        modality_frame(dataset, i).to_csv(path, index=False)
        written.append(path)
    return written
