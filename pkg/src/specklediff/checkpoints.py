"""Checkpoint files: a JSON manifest plus a flat little-endian f32 payload.

Layout: 8-byte magic, little-endian u32 manifest length, UTF-8 JSON
manifest, then the tensor payload. The manifest records the format
version, the predictor configuration, schedule parameters, the iteration
count, and a tensor table of (name, shape, byte offset). Loading
validates the whole file before constructing anything, so a truncated or
inconsistent file never yields a partial parameter map.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path
from typing import Mapping

import numpy as np

from .autodiff import Tensor
from .predictor import PredictorConfig, parameter_shapes

__all__ = [
    "CheckpointError",
    "CheckpointVersionError",
    "FORMAT_VERSION",
    "save_checkpoint",
    "load_checkpoint",
]

MAGIC = b"SPKLDIF\x01"
FORMAT_VERSION = 1
_ITEM = np.dtype("<f4")


class CheckpointError(ValueError):
    """The file is not a readable checkpoint (corrupt or inconsistent)."""


class CheckpointVersionError(CheckpointError):
    """The checkpoint format version is not supported."""


def save_checkpoint(
    path,
    params: Mapping[str, Tensor],
    config: PredictorConfig,
    schedule: Mapping[str, object],
    iteration: int,
) -> None:
    """Serialize a parameter map; tensors are stored as little-endian f32."""
    tensors = []
    chunks = []
    offset = 0
    for name in sorted(params):
        data = np.ascontiguousarray(params[name].data, dtype=_ITEM)
        tensors.append({"name": name, "shape": list(data.shape), "offset": offset})
        chunks.append(data.tobytes())
        offset += data.nbytes
    manifest = {
        "format_version": FORMAT_VERSION,
        "predictor_config": asdict(config),
        "schedule": dict(schedule),
        "iteration": int(iteration),
        "payload_bytes": offset,
        "tensors": tensors,
    }
    blob = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for chunk in chunks:
            fh.write(chunk)


def load_checkpoint(path) -> tuple[dict[str, Tensor], PredictorConfig, dict, int]:
    """Read and validate a checkpoint; returns (params, config, schedule, iteration)."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + 4 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (manifest_len,) = struct.unpack_from("<I", raw, len(MAGIC))
    header_end = len(MAGIC) + 4 + manifest_len
    if len(raw) < header_end:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[len(MAGIC) + 4 : header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest: {exc}") from exc

    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: unsupported format version {version!r}")

    cfg_dict = dict(manifest["predictor_config"])
    for key in ("channel_mults", "attention_resolutions"):
        if cfg_dict.get(key) is not None:
            cfg_dict[key] = tuple(cfg_dict[key])
    config = PredictorConfig(**cfg_dict)

    payload = raw[header_end:]
    declared = manifest.get("payload_bytes")
    if declared != len(payload):
        raise CheckpointError(
            f"{path}: payload is {len(payload)} bytes but manifest declares {declared}"
        )

    expected = parameter_shapes(config)
    table = {entry["name"]: entry for entry in manifest["tensors"]}
    if set(table) != set(expected):
        extra = sorted(set(table) - set(expected))
        missing = sorted(set(expected) - set(table))
        raise CheckpointError(
            f"{path}: tensor names do not match the embedded config "
            f"(missing {missing[:3]}, unexpected {extra[:3]})"
        )

    params: dict[str, Tensor] = {}
    for name, entry in table.items():
        shape = tuple(int(s) for s in entry["shape"])
        if shape != expected[name]:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {shape}, config implies {expected[name]}"
            )
        nbytes = int(np.prod(shape)) * _ITEM.itemsize
        offset = int(entry["offset"])
        if offset < 0 or offset + nbytes > len(payload):
            raise CheckpointError(f"{path}: tensor {name!r} overruns the payload")
        data = np.frombuffer(payload, dtype=_ITEM, count=int(np.prod(shape)), offset=offset)
        params[name] = Tensor(data.reshape(shape).copy(), requires_grad=True, name=name)
    return params, config, dict(manifest["schedule"]), int(manifest["iteration"])
