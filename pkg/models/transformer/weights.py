"""
Binary tensor container shared by model weights and cached second moments.

Layout (little-endian):
    b"TLMW" | u32 format version | u64 header length | JSON header | tensor bytes

The JSON header holds the container kind, the serialized config, free-form
metadata and, per tensor, its name, shape and byte offset into the data
section. Tensors are row-major float64.
"""

import logging
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Mapping, Union

import numpy as np
import orjson

from models.errors import IoError, WeightFormatError
from models.transformer.config import ModelConfig
from models.transformer.tiny_lm import TinyLM

logger = logging.getLogger(__name__)

MAGIC = b"TLMW"
FORMAT_VERSION = 1
PREAMBLE_SIZE = 16
KIND_MODEL = "tiny_lm"

PathLike = Union[str, Path]


@dataclass(frozen=True)
class Container:
    kind: str
    config: Dict[str, Any]
    metadata: Dict[str, Any]
    tensors: Dict[str, np.ndarray]


def atomic_write_bytes(path: PathLike, payload: bytes) -> Path:
    """Write bytes through a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except OSError as e:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise IoError(f"could not write {path}: {e}") from e
    return path


def encode_container(
    kind: str,
    tensors: Mapping[str, np.ndarray],
    config: Mapping[str, Any],
    metadata: Mapping[str, Any] | None = None,
) -> bytes:
    index = []
    chunks = []
    offset = 0
    for name, tensor in tensors.items():
        raw = np.ascontiguousarray(tensor, dtype="<f8").tobytes(order="C")
        index.append({"name": name, "shape": list(np.shape(tensor)), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = orjson.dumps(
        {
            "format_version": FORMAT_VERSION,
            "kind": kind,
            "config": dict(config),
            "metadata": dict(metadata or {}),
            "tensors": index,
        },
        option=orjson.OPT_SORT_KEYS,
    )
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + b"".join(chunks)


def decode_container(payload: bytes) -> Container:
    if len(payload) < PREAMBLE_SIZE or payload[:4] != MAGIC:
        raise WeightFormatError("not a tensor container (bad magic or truncated preamble)")
    version, header_len = struct.unpack("<IQ", payload[4:PREAMBLE_SIZE])
    if version != FORMAT_VERSION:
        raise WeightFormatError(f"unsupported container version {version}")
    if len(payload) < PREAMBLE_SIZE + header_len:
        raise WeightFormatError(f"header of {header_len} bytes runs past the end of the file")
    data = payload[PREAMBLE_SIZE + header_len:]
    try:
        header = orjson.loads(payload[PREAMBLE_SIZE:PREAMBLE_SIZE + header_len])
        tensors: Dict[str, np.ndarray] = {}
        for entry in header["tensors"]:
            shape = tuple(int(n) for n in entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            start = int(entry["offset"])
            stop = start + 8 * count
            if start < 0 or stop > len(data):
                raise WeightFormatError(f"tensor {entry['name']} runs past the end of the file")
            tensors[entry["name"]] = np.frombuffer(data[start:stop], dtype="<f8").astype(np.float64).reshape(shape)
        return Container(
            kind=header["kind"],
            config=header["config"],
            metadata=header.get("metadata", {}),
            tensors=tensors,
        )
    except WeightFormatError:
        raise
    except orjson.JSONDecodeError as e:
        raise WeightFormatError(f"container header is not valid JSON: {e}") from e
    except (KeyError, TypeError, AttributeError, ValueError) as e:
        raise WeightFormatError(f"malformed container header: {e!r}") from e


def write_container(path: PathLike, kind: str, tensors, config, metadata=None) -> Path:
    return atomic_write_bytes(path, encode_container(kind, tensors, config, metadata))


def read_container(path: PathLike, expected_kind: str | None = None) -> Container:
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as e:
        raise IoError(f"could not read {path}: {e}") from e
    container = decode_container(payload)
    if expected_kind is not None and container.kind != expected_kind:
        raise WeightFormatError(f"{path} holds a {container.kind!r} container, expected {expected_kind!r}")
    return container


def save_weights(model: TinyLM, path: PathLike, metadata: Mapping[str, Any] | None = None) -> Path:
    """
    Persist a model's weights and configuration.

    Args:
        model: Model to save
        path: Destination file
        metadata: Extra JSON-serialisable provenance stored in the header

    Returns:
        The written path
    """
    out = write_container(path, KIND_MODEL, model.params, model.config.model_dump(), metadata)
    logger.info(f"Saved {model.n_parameters()} weights to {out}")
    return out


def load_weights(path: PathLike) -> TinyLM:
    container = read_container(path, KIND_MODEL)
    return TinyLM(ModelConfig(**container.config), container.tensors)
