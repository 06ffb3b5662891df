"""Checkpoint files: JSON header followed by raw little-endian float32 tensors.

Layout::

    b"VLCKPT" | uint64 LE header length | header JSON (utf-8) | tensor bytes

The header carries the format version, the model hyperparameters, a
provenance flag (``init``, ``pretrained``, ``finetuned-retrieval``,
``finetuned-vcr``) and one ``{name, shape, offset}`` entry per tensor, with
offsets counted in bytes from the start of the tensor block.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, init_params
from .numerics import ParameterStore

MAGIC = b"VLCKPT"
FORMAT_VERSION = 1
PROVENANCES = ("init", "pretrained", "finetuned-retrieval", "finetuned-vcr")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: ParameterStore
    config: ModelConfig
    provenance: str = "init"
    meta: dict = field(default_factory=dict)


def save_checkpoint(store: ParameterStore, path, config: ModelConfig, provenance: str = "init",
                    meta: dict | None = None) -> None:
    if provenance not in PROVENANCES:
        raise ValueError(f"unknown provenance {provenance!r}")
    entries, blobs, offset = [], [], 0
    for name, p in store.items():
        blob = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(p.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": FORMAT_VERSION,
        "model": config.to_dict(),
        "provenance": provenance,
        "step_count": store.step_count,
        "meta": meta or {},
        "data_bytes": offset,
        "entries": entries,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def resolve_path(path) -> Path:
    """A checkpoint file, or ``final.ckpt`` inside a checkpoint directory."""
    path = Path(path)
    return path / "final.ckpt" if path.is_dir() else path


def load_checkpoint(path, expected: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint, validating version, sizes and (optionally) the model shape."""
    path = resolve_path(path)
    data = path.read_bytes()
    if not data.startswith(MAGIC) or len(data) < len(MAGIC) + 8:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack_from("<Q", data, len(MAGIC))
    start = len(MAGIC) + 8
    if len(data) < start + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {header.get('format_version')} != {FORMAT_VERSION}")
    body = data[start + hlen:]
    if len(body) != header["data_bytes"]:
        raise CheckpointError(f"{path}: expected {header['data_bytes']} tensor bytes, found {len(body)}")
    config = ModelConfig.from_dict(header["model"])
    if expected is not None and expected != config:
        raise CheckpointError(f"{path}: model config {config} does not match the configured {expected}")
    reference = init_params(config)
    store = ParameterStore()
    names = set()
    for entry in header["entries"]:
        name, shape, off = entry["name"], tuple(entry["shape"]), entry["offset"]
        if name not in reference or reference[name].shape != shape:
            raise CheckpointError(f"{path}: tensor {name} with shape {shape} does not fit the model")
        count = int(np.prod(shape))
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=off).reshape(shape)
        store.add(name, arr.astype(np.float32))
        names.add(name)
    missing = set(reference.names()) - names
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)[:5]}")
    store.step_count = int(header.get("step_count", 0))
    return Checkpoint(store, config, header["provenance"], header.get("meta", {}))
