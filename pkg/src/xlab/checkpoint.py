"""Binary checkpoint format.

Layout (little-endian)::

    b"XLAB" | version u32 | meta_len u32 | meta JSON (UTF-8)
    then per record: name_len u32 | name | rank u32 | extents u64*rank | f64 values

``meta`` holds the model config plus optional training state.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Optional

import numpy as np

from .model import ModelConfig, Transformer, param_shapes

MAGIC = b"XLAB"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _records_bytes(records: dict[str, np.ndarray]) -> bytes:
    out = bytearray()
    for name, arr in records.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += arr.tobytes()
    return bytes(out)


def dumps(meta: dict, records: dict[str, np.ndarray]) -> bytes:
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<II", VERSION, len(blob)) + blob + _records_bytes(records)


def loads(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic bytes")
    if len(data) < 12:
        raise CheckpointError("truncated header")
    version, meta_len = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    try:
        meta = json.loads(data[pos : pos + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt metadata: {exc}") from None
    pos += meta_len
    records = {}
    try:
        while pos < len(data):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * count > len(data):
                raise CheckpointError(f"record {name!r} is truncated")
            records[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
            pos += 8 * count
    except struct.error as exc:
        raise CheckpointError(f"truncated record table: {exc}") from None
    return meta, records


def atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, model: Transformer, train_state: Optional[dict] = None, extra_records: Optional[dict] = None) -> None:
    meta = {"model": model.config.to_dict(), "dtype": model.dtype.name}
    if train_state is not None:
        meta["train"] = train_state
    records = {name: p.data for name, p in model.params.items()}
    if extra_records:
        records.update(extra_records)
    atomic_write(path, dumps(meta, records))


def load(path) -> tuple[Transformer, dict, dict[str, np.ndarray]]:
    """Returns (model, meta, non-parameter records)."""
    meta, records = loads(Path(path).read_bytes())
    try:
        config = ModelConfig.from_dict(meta["model"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"metadata lacks a valid model config: {exc}") from None
    shapes = param_shapes(config)
    for name, shape in shapes.items():
        if name not in records:
            raise CheckpointError(f"missing parameter {name!r}")
        if records[name].shape != shape:
            raise CheckpointError(f"{name}: stored shape {records[name].shape} != expected {shape}")
    params = {name: records.pop(name) for name in shapes}
    model = Transformer(config, params, dtype=np.dtype(meta.get("dtype", "float64")))
    return model, meta, records
