"""Checkpoint container.

Layout: ``UNIREFCKPT1\\n``, one line of JSON header, then the arrays as raw
little-endian float32 in header order. The header carries names, shapes,
element type, model config, training step and the content hash, which the
loader re-checks.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .backbone import ModelConfig, ModelParams

MAGIC = b"UNIREFCKPT1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, params: ModelParams, step: int, extra: dict | None = None) -> Path:
    path = Path(path)
    names = sorted(params.arrays)
    arrays = [params.arrays[n].detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4") for n in names]
    header = {
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in zip(names, arrays)],
        "dtype": "<f4",
        "config": params.config.to_dict(),
        "step": int(step),
        "hash": params.content_hash(),
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as f:
        f.write(MAGIC + b"\n")
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for a in arrays:
            f.write(a.tobytes())
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path, dtype: torch.dtype = torch.float32) -> tuple[ModelParams, dict]:
    path = Path(path)
    data = path.read_bytes()
    if not data.startswith(MAGIC + b"\n"):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    body = data[len(MAGIC) + 1:]
    nl = body.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(body[:nl])
    if header.get("dtype") != "<f4":
        raise CheckpointError(f"{path}: unsupported element type {header.get('dtype')}")
    payload = memoryview(body)[nl + 1:]
    arrays, offset = {}, 0
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = 4 * count
        if offset + nbytes > len(payload):
            raise CheckpointError(f"{path}: payload truncated at array {entry['name']}")
        a = np.frombuffer(payload[offset:offset + nbytes], dtype="<f4").reshape(entry["shape"])
        arrays[entry["name"]] = torch.from_numpy(a.copy()).to(dtype)
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - offset} trailing bytes")
    params = ModelParams(ModelConfig(**header["config"]), arrays)
    if params.content_hash() != header["hash"]:
        raise CheckpointError(f"{path}: content hash mismatch")
    params.check()
    return params, header
