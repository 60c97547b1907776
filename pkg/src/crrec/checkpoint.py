"""Checkpoint container: JSON manifest followed by raw little-endian payloads.

Layout::

    8 bytes   manifest length N (unsigned little-endian)
    N bytes   UTF-8 JSON manifest
    ...       tensor payloads, concatenated, offsets relative to payload start

The manifest holds ``format_version``, free-form ``metadata`` and one entry
per tensor with ``name``, ``shape``, ``dtype``, ``offset`` and ``nbytes``.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

from .errors import DataError

FORMAT_VERSION = 1

_DTYPES = {
    torch.float32: ("float32", "<f4"),
    torch.float64: ("float64", "<f8"),
    torch.int64: ("int64", "<i8"),
}
_BY_NAME = {name: (tdtype, code) for tdtype, (name, code) in _DTYPES.items()}


def save_checkpoint(path, tensors, metadata=None) -> None:
    entries = []
    payloads = []
    offset = 0
    for name, t in tensors.items():
        t = t.detach().cpu()
        if t.dtype not in _DTYPES:
            raise TypeError(f"unsupported dtype {t.dtype} for tensor {name!r}")
        dtype_name, code = _DTYPES[t.dtype]
        raw = np.ascontiguousarray(t.numpy()).astype(code, copy=False).tobytes()
        entries.append(
            {"name": name, "shape": list(t.shape), "dtype": dtype_name, "offset": offset, "nbytes": len(raw)}
        )
        payloads.append(raw)
        offset += len(raw)
    manifest = {"format_version": FORMAT_VERSION, "metadata": metadata or {}, "tensors": entries}
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in payloads:
            fh.write(raw)


def read_manifest(path) -> dict:
    with open(path, "rb") as fh:
        (n,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(n).decode("utf-8"))


def load_checkpoint(path):
    """Return ``(tensors, metadata)``; tensors keep manifest order."""
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise DataError("truncated checkpoint", location=str(path))
    (n,) = struct.unpack("<Q", data[:8])
    try:
        manifest = json.loads(data[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"bad manifest: {exc}", location=str(path)) from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported format version {manifest.get('format_version')}", location=str(path))
    base = 8 + n
    tensors = OrderedDict()
    for e in manifest["tensors"]:
        tdtype, code = _BY_NAME[e["dtype"]]
        start = base + e["offset"]
        chunk = data[start : start + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise DataError(f"payload for {e['name']!r} truncated", location=str(path))
        arr = np.frombuffer(chunk, dtype=code).reshape(e["shape"]).copy()
        tensors[e["name"]] = torch.from_numpy(arr).to(tdtype)
    return tensors, manifest["metadata"]
