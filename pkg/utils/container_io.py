"""
Binary containers: a JSON header describing named little-endian arrays and one
contiguous blob holding them back to back.
"""

import json
import struct
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import numpy as np

from utils.error_handlers import ContainerFormatError

FRAME_MAGIC = b"DML1"
SUPPORTED_DTYPES = {"<f8": np.float64, "<i4": np.int32}


def pack_arrays(arrays: Dict[str, np.ndarray]) -> Tuple[List[Dict[str, Any]], bytes]:
    """Directory entries (name, dtype, shape, offset, nbytes) and the concatenated blob"""
    directory: List[Dict[str, Any]] = []
    chunks: List[bytes] = []
    offset = 0
    for name, value in arrays.items():
        arr = np.asarray(value)
        dtype = "<i4" if np.issubdtype(arr.dtype, np.integer) else "<f8"
        raw = np.ascontiguousarray(arr, dtype=np.dtype(dtype)).tobytes()
        directory.append({
            "name": name,
            "dtype": dtype,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    return directory, b"".join(chunks)


def unpack_arrays(directory: List[Dict[str, Any]], blob: bytes) -> Dict[str, np.ndarray]:
    """Inverse of pack_arrays; entries must tile the blob exactly"""
    arrays: Dict[str, np.ndarray] = {}
    expected_offset = 0
    for entry in directory:
        dtype = SUPPORTED_DTYPES.get(entry.get("dtype"))
        if dtype is None:
            raise ContainerFormatError(f"unsupported dtype {entry.get('dtype')!r} for {entry.get('name')}")
        offset, nbytes, shape = entry["offset"], entry["nbytes"], tuple(entry["shape"])
        if offset != expected_offset:
            raise ContainerFormatError(f"entry {entry['name']} starts at {offset}, expected {expected_offset}")
        count = int(np.prod(shape)) if shape else 1
        if count * np.dtype(dtype).itemsize != nbytes:
            raise ContainerFormatError(f"entry {entry['name']}: shape {list(shape)} does not match {nbytes} bytes")
        if offset + nbytes > len(blob):
            raise ContainerFormatError(f"entry {entry['name']} runs past the end of the blob")
        arr = np.frombuffer(blob, dtype=np.dtype(entry["dtype"]), count=count, offset=offset).reshape(shape)
        arrays[entry["name"]] = arr.astype(dtype)
        expected_offset = offset + nbytes
    if expected_offset != len(blob):
        raise ContainerFormatError(f"blob has {len(blob) - expected_offset} trailing bytes")
    return arrays


def write_framed(path: Union[str, Path], header: Dict[str, Any], blob: bytes) -> Path:
    """Single-file container: magic, u64 header length, JSON header, blob"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(FRAME_MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(blob)
    return path


def read_framed(path: Union[str, Path]) -> Tuple[Dict[str, Any], bytes]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"container not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != FRAME_MAGIC or len(raw) < 12:
        raise ContainerFormatError(f"{path} is not a dataset container")
    (length,) = struct.unpack("<Q", raw[4:12])
    try:
        header = json.loads(raw[12:12 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerFormatError(f"{path}: unreadable header ({e})")
    return header, raw[12 + length:]
