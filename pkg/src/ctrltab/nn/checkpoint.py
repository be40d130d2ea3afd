"""Model checkpoint serialization.

Layout: 8-byte magic "CTABNET1", an 8-byte little-endian header length, a
UTF-8 JSON header (model kind, config, seed, vocabulary, tensor
name/shape/offset table), then the raw little-endian float64 tensor data at
the stated offsets.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import CheckpointError
from .layers import ModelConfig, ParameterSet

MAGIC = b"CTABNET1"


def save_checkpoint(
    path: str | Path,
    model_kind: str,
    config: ModelConfig,
    seed: int,
    params: ParameterSet,
    vocab_tokens: list[str],
) -> None:
    names = sorted(params.names())
    tensors = []
    offset = 0
    blobs = []
    for name in names:
        value = params[name].value
        blob = np.ascontiguousarray(value, dtype="<f8").tobytes()
        tensors.append({"name": name, "shape": list(value.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "model_kind": model_kind,
        "config": config.as_dict(),
        "seed": seed,
        "vocab": vocab_tokens,
        "tensors": tensors,
    }
    header_bytes = json.dumps(header, ensure_ascii=False, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[str, ModelConfig, int, list[str], dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        try:
            header = json.loads(fh.read(header_len).decode("utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise CheckpointError(f"{path}: malformed header ({exc})") from exc
        data = fh.read()
    config = ModelConfig(**header["config"])
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * 8
        if end > len(data):
            raise CheckpointError(f"{path}: tensor {entry['name']} overruns the data section")
        arr = np.frombuffer(data[start:end], dtype="<f8").reshape(shape).astype(np.float64)
        tensors[entry["name"]] = arr
    if "embed" in tensors and tensors["embed"].shape != (config.vocab_size, config.d_model):
        raise CheckpointError(
            f"{path}: embedding shape {tensors['embed'].shape} does not match config "
            f"({config.vocab_size}, {config.d_model})"
        )
    return header["model_kind"], config, header["seed"], header["vocab"], tensors


def params_from_tensors(tensors: dict[str, np.ndarray], seed: int) -> ParameterSet:
    params = ParameterSet(seed)
    for name in sorted(tensors):
        t = params.add(name, tensors[name].shape, init="zeros")
        t.value = tensors[name].copy()
    return params
