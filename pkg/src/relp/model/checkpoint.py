"""Binary checkpoint format.

Layout::

    b"RELPCKPT" | version: u32 LE | manifest length: u64 LE | manifest JSON | payload

The manifest lists every tensor (name, shape, dtype, byte offset into the
payload, byte length) and carries free-form metadata such as the model
config and the vocabulary table.  Payload arrays are little-endian.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"RELPCKPT"
VERSION = 1
_HEADER = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


def write_tensors(path, tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any]) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name, "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    manifest = dict(meta)
    manifest["tensors"] = entries
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    data = _HEADER.pack(MAGIC, VERSION, len(head)) + head + b"".join(blobs)
    Path(path).write_bytes(data)


def read_tensors(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise CheckpointError("file too short for header")
    magic, version, mlen = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _HEADER.size
    if len(raw) < start + mlen:
        raise CheckpointError("truncated manifest")
    try:
        manifest = json.loads(raw[start : start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt manifest: {exc}") from exc
    payload = memoryview(raw)[start + mlen :]
    tensors: dict[str, np.ndarray] = {}
    for e in manifest.get("tensors", []):
        name = e["name"]
        if name in tensors:
            raise CheckpointError(f"tensor {name!r} listed twice")
        dtype = np.dtype(e["dtype"]).newbyteorder("<")
        count = int(np.prod(e["shape"], dtype=np.int64))
        if count * dtype.itemsize != e["nbytes"]:
            raise CheckpointError(f"{name}: nbytes does not match shape and dtype")
        end = e["offset"] + e["nbytes"]
        if e["offset"] < 0 or end > len(payload):
            raise CheckpointError(f"{name}: payload truncated")
        arr = np.frombuffer(payload[e["offset"] : end], dtype=dtype).reshape(e["shape"])
        tensors[name] = arr.astype(dtype.newbyteorder("="))
    meta = {k: v for k, v in manifest.items() if k != "tensors"}
    return tensors, meta


def save(model, path, vocab: Mapping[str, int] | None = None) -> None:
    """Write a :class:`~relp.model.transformer.Transformer` checkpoint."""
    meta = {"kind": "model", "sae": False, "config": model.config.to_dict(), "vocab": dict(vocab) if vocab else None}
    write_tensors(path, model.params, meta)


def load(path):
    """Read a model checkpoint; returns ``(model, vocab_table_or_None)``."""
    from .transformer import ConfigError, ModelConfig, Transformer, param_shapes

    tensors, meta = read_tensors(path)
    if meta.get("kind") != "model" or meta.get("sae"):
        raise CheckpointError("not a model checkpoint")
    try:
        cfg = ModelConfig(**meta["config"])
    except (TypeError, KeyError, ConfigError) as exc:
        raise CheckpointError(f"bad model config: {exc}") from exc
    expected = param_shapes(cfg)
    if list(tensors) != list(expected):
        raise CheckpointError("shape manifest does not list the parameters implied by the config")
    for k, shape in expected.items():
        if tuple(tensors[k].shape) != shape:
            raise CheckpointError(f"{k}: shape {tensors[k].shape} != {shape}")
    return Transformer(cfg, tensors), meta.get("vocab")
