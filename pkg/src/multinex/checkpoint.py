"""Binary checkpoint format.

Layout::

    b"MNX1"                      magic
    uint32 little-endian         length of the JSON manifest in bytes
    manifest                     UTF-8 JSON
    payload                      little-endian float32 tensors in registry order

The manifest holds ``{"variant": {...}, "tensors": [{"name", "shape",
"offset", "count", "dtype"}, ...]}``; ``offset`` is the byte offset of the
tensor inside the payload and ``dtype`` is always ``"f32le"``.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .nn import ModelParams, VariantConfig, param_shapes

MAGIC = b"MNX1"
DTYPE_TAG = "f32le"


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: ModelParams, path) -> None:
    records = []
    offset = 0
    for name, arr in params.items():
        records.append({
            "name": name,
            "shape": list(arr.shape),
            "offset": offset,
            "count": int(arr.size),
            "dtype": DTYPE_TAG,
        })
        offset += 4 * int(arr.size)
    manifest = json.dumps({"variant": params.config.to_dict(), "tensors": records}, sort_keys=True).encode()
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for arr in params.tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_manifest(path) -> tuple[dict, bytes]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {blob[:4]!r})")
    (size,) = struct.unpack("<I", blob[4:8])
    try:
        manifest = json.loads(blob[8:8 + size].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest") from exc
    return manifest, blob[8 + size:]


def load_checkpoint(path, expect: VariantConfig | None = None) -> ModelParams:
    """Load a checkpoint; with ``expect`` the layers are validated against that architecture."""
    manifest, payload = read_manifest(path)
    cfg = VariantConfig(**manifest["variant"])
    if expect is not None:
        check_layout(manifest, expect)
        cfg = expect
    tensors = {}
    for rec in manifest["tensors"]:
        if rec["dtype"] != DTYPE_TAG:
            raise CheckpointError(f"layer {rec['name']}: unsupported dtype tag {rec['dtype']!r}")
        end = rec["offset"] + 4 * rec["count"]
        if end > len(payload):
            raise CheckpointError(f"layer {rec['name']}: payload truncated")
        arr = np.frombuffer(payload[rec["offset"]:end], dtype="<f4").astype(np.float32)
        tensors[rec["name"]] = arr.reshape(rec["shape"])
    try:
        return ModelParams(cfg, tensors)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc


def check_layout(manifest: dict, cfg: VariantConfig) -> None:
    """Raise naming the first layer whose name or shape disagrees with ``cfg``."""
    records = manifest["tensors"]
    expected = param_shapes(cfg)
    for i, (name, shape) in enumerate(expected):
        if i >= len(records):
            raise CheckpointError(f"checkpoint is missing layer {name} (expected shape {shape})")
        rec = records[i]
        if rec["name"] != name or tuple(rec["shape"]) != shape:
            raise CheckpointError(
                f"layer mismatch at {name}: expected shape {shape}, checkpoint has "
                f"{rec['name']} with shape {tuple(rec['shape'])}"
            )
    if len(records) > len(expected):
        raise CheckpointError(f"checkpoint has unexpected extra layer {records[len(expected)]['name']}")
