"""Versioned binary checkpoint with bit-exact round-trips.

Layout: magic ``BGML``, u32 little-endian format version, u32 little-endian
JSON header length, the JSON header (architecture config plus a parameter
manifest of name/shape/byte offset), then raw little-endian float32 blobs
in manifest order. Offsets are relative to the start of the blob section.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, ToyBagNet

MAGIC = b"BGML"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Malformed or unreadable checkpoint file."""


def save_checkpoint(model: ToyBagNet, path) -> None:
    path = Path(path)
    if model.dtype != np.float32:
        raise CheckpointError(f"checkpoints store float32 parameters, model is {model.dtype}")
    manifest = []
    blobs = []
    offset = 0
    for name, tensor in model.named_parameters():
        blob = np.ascontiguousarray(tensor.data, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(tensor.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "config": {
            "in_channels": model.config.in_channels,
            "channels": model.config.channels,
            "n3": model.config.n3,
            "n1": model.config.n1,
            "classes": model.config.classes,
        },
        "params": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> ToyBagNet:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header_len = struct.unpack("<I", raw[8:12])[0]
    if len(raw) < 12 + header_len:
        raise CheckpointError(f"{path}: truncated header ({header_len} bytes declared)")
    try:
        header = json.loads(raw[12:12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    try:
        config = ModelConfig(**header["config"])
        manifest = header["params"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid header contents: {exc}") from exc

    model = ToyBagNet(config, seed=0)
    params = dict(model.named_parameters())
    if {entry["name"] for entry in manifest} != set(params):
        raise CheckpointError(f"{path}: parameter manifest does not match the architecture")
    blob_start = 12 + header_len
    for entry in manifest:
        tensor = params[entry["name"]]
        shape = tuple(entry["shape"])
        if shape != tensor.shape:
            raise CheckpointError(
                f"{path}: parameter {entry['name']} has shape {shape}, expected {tensor.shape}"
            )
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = blob_start + entry["offset"]
        end = start + 4 * n
        if end > len(raw):
            raise CheckpointError(f"{path}: blob for {entry['name']} runs past end of file")
        tensor.data = np.frombuffer(raw[start:end], dtype="<f4").reshape(shape).astype(np.float32)
        tensor.data = np.ascontiguousarray(tensor.data)
    return model
