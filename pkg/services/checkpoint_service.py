"""
Checkpoint containers: `<stem>.json` manifest plus `<stem>.bin` holding every
parameter as little-endian float64, back to back in manifest order.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from services.dimsep_service import DimensionPartition
from services.model_service import ModelMetadata, ModelState
from utils.container_io import pack_arrays, unpack_arrays
from utils.error_handlers import ContainerFormatError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


def _paths(path: Union[str, Path]) -> Tuple[Path, Path]:
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".json", ".bin") else path
    return stem.with_name(stem.name + ".json"), stem.with_name(stem.name + ".bin")


def save_checkpoint(path: Union[str, Path], model: ModelState,
                    config: Optional[Dict[str, Any]] = None) -> Path:
    """Write manifest and blob; returns the manifest path"""
    manifest_path, blob_path = _paths(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    directory, blob = pack_arrays(model.parameters)
    partition = model.metadata.partition
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": config,
        "model": model.metadata.to_dict(),
        "phase": model.metadata.phase,
        "partition": partition.to_dict() if partition is not None else None,
        "blob": blob_path.name,
        "checksum": model.checksum(),
        "tensors": directory,
    }
    blob_path.write_bytes(blob)
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    logger.info(f"Saved checkpoint {manifest_path} (phase={model.metadata.phase}, "
                f"{model.parameter_count} parameters)")
    return manifest_path


def load_checkpoint(path: Union[str, Path]) -> Tuple[ModelState, Optional[Dict[str, Any]]]:
    """Restore the model bitwise; also returns the echoed config"""
    manifest_path, blob_path = _paths(path)
    if not manifest_path.exists():
        raise FileNotFoundError(f"checkpoint manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise ContainerFormatError(f"{manifest_path}: unreadable manifest ({e})")
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ContainerFormatError(f"unsupported checkpoint format version {manifest.get('format_version')}")
    blob_path = manifest_path.with_name(manifest.get("blob", blob_path.name))
    if not blob_path.exists():
        raise FileNotFoundError(f"checkpoint blob not found: {blob_path}")

    arrays = unpack_arrays(manifest["tensors"], blob_path.read_bytes())
    meta = manifest["model"]
    partition = DimensionPartition.from_dict(manifest["partition"]) if manifest.get("partition") else None
    metadata = ModelMetadata(
        input_dims=tuple(meta["input_dims"]),
        hidden_dims=tuple(meta["hidden_dims"]),
        feature_dim=int(meta["feature_dim"]),
        num_classes=int(meta["num_classes"]),
        phase=manifest.get("phase", meta.get("phase", "init")),
        partition=partition,
    )
    model = ModelState(metadata, {name: np.asarray(arr, dtype=np.float64) for name, arr in arrays.items()})
    expected = manifest.get("checksum")
    if expected and model.checksum() != expected:
        raise ContainerFormatError(f"{manifest_path}: parameter checksum mismatch")
    return model, manifest.get("config")
