"""Versioned tensor archive.

Layout: one JSON header line followed by the concatenated raw tensor bytes.

    CAMWORDS <kind> <version>\n
    {"meta": {...}, "tensors": [{"name", "dtype", "shape", "offset", "nbytes", "sha256"}]}\n
    <raw bytes>

The header is written with sorted keys and tensors in caller order, so the
same content always produces the same bytes.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError

MAGIC = "CAMWORDS"


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def array_checksum(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def _to_numpy(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        return value.detach().cpu().contiguous().numpy()
    return np.ascontiguousarray(value)


def write_archive(path, kind: str, version: int, tensors: dict, meta: dict) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, value in tensors.items():
        arr = _to_numpy(value)
        raw = arr.tobytes()
        entries.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
            "sha256": hashlib.sha256(raw).hexdigest(),
        })
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"{MAGIC} {kind} {version}\n".encode())
        fh.write(header.encode() + b"\n")
        for raw in blobs:
            fh.write(raw)


def read_archive(path, kind: str, version: int) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        first = fh.readline().decode(errors="replace").split()
        if len(first) != 3 or first[0] != MAGIC:
            raise FormatError(f"{path}: not a camwords archive")
        if first[1] != kind:
            raise FormatError(f"{path}: expected a {kind!r} archive, found {first[1]!r}")
        if first[2] != str(version):
            raise FormatError(
                f"{path}: unsupported {kind} version {first[2]!r} (this build reads version {version})"
            )
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: corrupted header ({exc})") from None
        payload = fh.read()

    tensors = {}
    for entry in header.get("tensors", []):
        start, n = entry["offset"], entry["nbytes"]
        raw = payload[start:start + n]
        if len(raw) != n or hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise FormatError(f"{path}: checksum mismatch for tensor {entry['name']!r}")
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
        tensors[entry["name"]] = arr
    return tensors, header.get("meta", {})
