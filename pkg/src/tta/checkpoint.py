"""Versioned binary parameter container.

Layout: 8-byte magic ``TTACKPT1``, little-endian uint32 header length, a
UTF-8 JSON header listing schema version, model metadata, and the ordered
parameter names/shapes, then the raw float64 little-endian blocks in header
order. A sidecar ``<path>.meta.json`` records the training config and seed.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .models import ParamStore

MAGIC = b"TTACKPT1"
SCHEMA_VERSION = 1


def save_params(path, params: ParamStore, meta: dict | None = None) -> None:
    header = {
        "schema_version": SCHEMA_VERSION,
        "meta": meta or {},
        "params": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr in params.items():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_params(path) -> tuple[ParamStore, dict]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ConfigError(f"{path} is not a parameter checkpoint")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(f"unsupported checkpoint schema in {path}")
        params = ParamStore()
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * n)
            if len(buf) != 8 * n:
                raise ConfigError(f"truncated checkpoint {path}")
            params[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return params, header["meta"]


def write_sidecar(path, doc: dict) -> None:
    Path(str(path) + ".meta.json").write_text(
        json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
