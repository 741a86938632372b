"""Versioned binary checkpoint container.

Layout: an 8-byte magic, a little-endian uint64 header length, a JSON header
(format version, embedded model config, a manifest of named arrays with
shape/dtype/offset), then the raw little-endian array payload. Round trips
are bit-exact.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..dsp import InvalidArgument
from .model import ModelConfig

MAGIC = b"VDCKPT01"

_DTYPES = {"float32": "<f4", "float64": "<f8"}


def save_checkpoint(path: str | Path, cfg: ModelConfig,
                    params: dict[str, np.ndarray],
                    buffers: dict[str, np.ndarray] | None = None) -> None:
    buffers = buffers or {}
    manifest = []
    blobs = []
    offset = 0
    for kind, arrays in (("param", params), ("buffer", buffers)):
        for name in sorted(arrays):
            arr = arrays[name]
            dtype = str(arr.dtype)
            if dtype not in _DTYPES:
                raise InvalidArgument(f"{name}: unsupported checkpoint dtype {dtype}")
            raw = np.ascontiguousarray(arr).astype(_DTYPES[dtype], copy=False).tobytes()
            manifest.append(
                {
                    "name": name,
                    "kind": kind,
                    "shape": list(arr.shape),
                    "dtype": dtype,
                    "offset": offset,
                    "nbytes": len(raw),
                }
            )
            blobs.append(raw)
            offset += len(raw)
    header = json.dumps(
        {"format_version": 1, "config": cfg.to_dict(), "arrays": manifest},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path: str | Path) -> tuple[ModelConfig, dict[str, np.ndarray], dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise InvalidArgument(f"{path}: not a {MAGIC.decode()} checkpoint")
    (header_len,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + header_len].decode())
    if header.get("format_version") != 1:
        raise InvalidArgument(f"{path}: unsupported checkpoint version")
    cfg = ModelConfig.from_dict(header["config"])
    payload = data[16 + header_len :]
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"])
        arr = arr.astype(entry["dtype"])  # native byte order, writable
        (params if entry["kind"] == "param" else buffers)[entry["name"]] = arr
    return cfg, params, buffers
