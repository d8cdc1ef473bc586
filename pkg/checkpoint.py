"""
Checkpoint Format
Versioned binary container for a model: config snapshot plus named float64 arrays.

Layout:
    MAGIC (8 bytes) | version (uint32 LE) | header length (uint32 LE)
    | header (UTF-8 JSON, sorted keys) | payload (little-endian float64)

The header holds the model config, free-form extras (normalization, k_max, ...) and a
table of parameter names with shapes and payload offsets. Nothing time-dependent is
stored, so identical training runs produce identical bytes.
"""

import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from file_lock import atomic_write_bytes
from model import ModelConfig, ModelConfigError, RsaModel, model_from_parameters, parameter_shapes

logger = logging.getLogger(__name__)

MAGIC = b"RSARANK\0"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sII")


class CheckpointError(ValueError):
    """Raised for a corrupt, truncated or incompatible checkpoint."""


def encode_checkpoint(model: RsaModel, extras: Optional[Dict[str, Any]] = None) -> bytes:
    table = []
    chunks = []
    offset = 0
    for name, value in model.parameters().items():
        array = np.asarray(value, dtype="<f8")
        table.append({"name": name, "shape": list(array.shape), "offset": offset})
        chunks.append(array.tobytes())
        offset += array.size
    header = json.dumps(
        {"config": model.config.to_dict(), "extras": extras or {}, "parameters": table},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + b"".join(chunks)


def decode_checkpoint(blob: bytes) -> Tuple[RsaModel, Dict[str, Any]]:
    if len(blob) < _PREFIX.size:
        raise CheckpointError("checkpoint truncated before header")
    magic, version, header_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"not a checkpoint (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}; expected {FORMAT_VERSION}")
    start = _PREFIX.size
    if len(blob) < start + header_len:
        raise CheckpointError("checkpoint truncated inside header")
    try:
        header = json.loads(blob[start:start + header_len].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        table = header["parameters"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ModelConfigError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from e

    expected = parameter_shapes(config)
    stored = {entry["name"]: tuple(entry["shape"]) for entry in table}
    if stored != expected:
        diff = {
            name: (stored.get(name), expected.get(name))
            for name in sorted(set(stored) | set(expected))
            if stored.get(name) != expected.get(name)
        }
        raise CheckpointError(f"parameter table does not match config (stored, expected): {diff}")

    total = sum(int(np.prod(shape)) for shape in expected.values())
    body = len(blob) - start - header_len
    if body != 8 * total:
        raise CheckpointError(f"payload holds {body} bytes, expected {8 * total}")
    payload = np.frombuffer(blob, dtype="<f8", offset=start + header_len)

    flat = {}
    for entry in table:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape))
        flat[entry["name"]] = payload[entry["offset"]:entry["offset"] + size].astype(np.float64).reshape(shape)
    return model_from_parameters(config, flat), header.get("extras", {})


def save_checkpoint(model: RsaModel, path: Union[str, Path], extras: Optional[Dict[str, Any]] = None) -> Path:
    """Write a model checkpoint atomically."""
    path = atomic_write_bytes(path, encode_checkpoint(model, extras))
    logger.info(f"Saved {model.config.variant} checkpoint ({model.num_parameters()} parameters) to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> RsaModel:
    model, _ = load_checkpoint_with_extras(path)
    return model


def load_checkpoint_with_extras(path: Union[str, Path]) -> Tuple[RsaModel, Dict[str, Any]]:
    with open(path, "rb") as f:
        blob = f.read()
    model, extras = decode_checkpoint(blob)
    logger.info(f"Loaded {model.config.variant} checkpoint from {path}")
    return model, extras
