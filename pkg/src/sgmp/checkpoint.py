"""Binary checkpoint: magic line, JSON header line, raw little-endian float64 blocks."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np

from .autodiff import Tensor
from .errors import ParseError
from .model import ModelParams

MAGIC = b"SGMP-CKPT 1\n"


def save_checkpoint(path: str | Path, params: ModelParams, meta: dict[str, Any] | None = None) -> None:
    header = {
        "sizes": params.sizes,
        "meta": meta or {},
        "params": [{"name": name, "shape": list(t.shape)} for name, t in params.named_tensors()],
    }
    blob = bytearray(MAGIC)
    blob += json.dumps(header, sort_keys=True).encode() + b"\n"
    for _, t in params.named_tensors():
        blob += np.ascontiguousarray(t.data, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict[str, Any]]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ParseError(f"{path}: not an sgmp checkpoint", line=1)
    end = raw.find(b"\n", len(MAGIC))
    if end < 0:
        raise ParseError(f"{path}: truncated header", line=2)
    try:
        header = json.loads(raw[len(MAGIC):end])
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: malformed header: {exc.msg}", line=2) from exc
    offset = end + 1
    tensors = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        chunk = raw[offset: offset + 8 * count]
        if len(chunk) != 8 * count:
            raise ParseError(f"{path}: truncated data for parameter {entry['name']}")
        tensors[entry["name"]] = Tensor(np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64),
                                        requires_grad=True)
        offset += 8 * count
    if offset != len(raw):
        raise ParseError(f"{path}: {len(raw) - offset} trailing bytes")
    return ModelParams(tensors, **header["sizes"]), header["meta"]
