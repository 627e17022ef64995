"""Versioned JSON parameter checkpoints.

Layout (version 1)::

    {
      "format": "mhavio-params",
      "version": 1,
      "meta": {...},                      # free-form, e.g. resolved model config
      "params": {
        "<dotted.name>": {"shape": [d0, d1, ...], "values": [row-major floats]}
      }
    }

Floats are written with ``repr`` precision, so a save/load cycle is
bit-identical for float64 data.
"""

from __future__ import annotations

import json
import os
import tempfile
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .errors import FormatError

FORMAT_NAME = "mhavio-params"
FORMAT_VERSION = 1


def encode_params(params: dict, meta: dict | None = None) -> dict:
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "meta": meta or {},
        "params": {name: {"shape": list(np.shape(a)), "values": np.asarray(a, dtype=np.float64).ravel().tolist()}
                   for name, a in params.items()},
    }


def decode_params(doc: dict) -> "OrderedDict[str, np.ndarray]":
    if not isinstance(doc, dict) or doc.get("format") != FORMAT_NAME:
        raise FormatError("not a parameter checkpoint")
    if doc.get("version") != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {doc.get('version')!r}")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for name, entry in doc.get("params", {}).items():
        try:
            shape = tuple(int(d) for d in entry["shape"])
            values = np.asarray(entry["values"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed entry for parameter {name!r}") from exc
        if values.size != int(np.prod(shape, dtype=np.int64)):
            raise FormatError(f"parameter {name!r}: {values.size} values for shape {shape}")
        out[name] = values.reshape(shape)
    return out


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_params(path: str | Path, params: dict, meta: dict | None = None) -> None:
    atomic_write_text(path, json.dumps(encode_params(params, meta)))


def read_checkpoint(path: str | Path) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    """Parse a checkpoint file fully; returns (params, meta)."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc.msg})") from exc
    return decode_params(doc), doc.get("meta", {})


def load_params(path: str | Path) -> "OrderedDict[str, np.ndarray]":
    return read_checkpoint(path)[0]
