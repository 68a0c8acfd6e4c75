"""Checkpoint format: one file, JSON manifest + flat little-endian float32 data.

Layout:
    bytes 0-7    magic ``PGCKPT01``
    bytes 8-15   little-endian uint64: manifest length in bytes
    manifest     UTF-8 JSON: format version, architecture descriptor
                 (including the vocabulary), and a parameter table of
                 {name, shape, offset} entries; offsets are byte positions
                 into the data section, in declaration order
    data         concatenated parameter arrays, little-endian float32, C order
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .model import DenoiserModel, ModelConfig, param_specs

MAGIC = b"PGCKPT01"
FORMAT_VERSION = 1


def save_checkpoint(model: DenoiserModel, path: str | Path) -> None:
    specs = param_specs(model.config)
    entries = []
    chunks = []
    offset = 0
    for name, shape, _ in specs:
        arr = np.ascontiguousarray(model.params[name], dtype="<f4")
        if tuple(arr.shape) != tuple(shape):
            raise ValueError(f"{name}: shape {arr.shape} != spec {shape}")
        entries.append({"name": name, "shape": list(shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {
        "format": "placegen-checkpoint",
        "version": FORMAT_VERSION,
        "architecture": model.config.to_dict(),
        "vocabulary": list(model.config.vocab),
        "params": entries,
        "data_bytes": offset,
    }
    blob = json.dumps(manifest).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(np.array(len(blob), dtype="<u8").tobytes())
        f.write(blob)
        for c in chunks:
            f.write(c)
    tmp.replace(path)  # atomic: no truncated checkpoints on interruption


def load_checkpoint(path: str | Path) -> DenoiserModel:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a placegen checkpoint (magic {magic!r})")
        (n,) = np.frombuffer(f.read(8), dtype="<u8")
        manifest = json.loads(f.read(int(n)).decode("utf-8"))
        data = f.read()
    if manifest.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
    config = ModelConfig.from_dict(manifest["architecture"])
    params = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=start)
        params[entry["name"]] = arr.reshape(shape).astype(np.float32)
    expected = {name for name, _, _ in param_specs(config)}
    missing = expected - params.keys()
    if missing:
        raise ValueError(f"checkpoint missing parameters: {sorted(missing)[:4]}...")
    return DenoiserModel(config=config, params=params)
