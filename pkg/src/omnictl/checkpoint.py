"""Checkpoint directory format: manifest.txt + weights.bin.

manifest.txt holds UTF-8 lines `name shape dtype offset length` where shape
is comma-joined dims, offset/length are byte positions into weights.bin, and
weights.bin is the little-endian float64 data concatenated in manifest order.
Round-trips are bit-exact.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from .tensor import Parameter


def save_params(dirpath, params: dict[str, Parameter]) -> None:
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    blobs = []
    offset = 0
    for name in sorted(params):
        p = params[name]
        raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        shape = ",".join(str(s) for s in p.shape)
        lines.append(f"{name} {shape} f64 {offset} {len(raw)}")
        blobs.append(raw)
        offset += len(raw)
    (d / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (d / "weights.bin").write_bytes(b"".join(blobs))


def load_arrays(dirpath) -> dict[str, np.ndarray]:
    d = Path(dirpath)
    blob = (d / "weights.bin").read_bytes()
    out: dict[str, np.ndarray] = {}
    for line in (d / "manifest.txt").read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        name, shape, dtype, offset, length = line.split(" ")
        if dtype != "f64":
            raise ValueError(f"unsupported dtype {dtype!r} in manifest")
        dims = tuple(int(s) for s in shape.split(",")) if shape else ()
        arr = np.frombuffer(blob[int(offset):int(offset) + int(length)], dtype="<f8")
        out[name] = arr.reshape(dims).astype(np.float64)
    return out


def load_into(dirpath, params: dict[str, Parameter]) -> None:
    arrays = load_arrays(dirpath)
    for name, p in params.items():
        if name not in arrays:
            raise KeyError(f"checkpoint missing parameter {name!r}")
        if arrays[name].shape != p.shape:
            raise ValueError(f"shape mismatch for {name!r}: {arrays[name].shape} vs {p.shape}")
        p.data = np.ascontiguousarray(arrays[name])


def params_sha256(params) -> str:
    """Hash of named parameter contents, order-independent (sorted by name)."""
    items = sorted((p.name, p) for p in params)
    h = hashlib.sha256()
    for name, p in items:
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()


def checkpoint_sha256(dirpath) -> str:
    d = Path(dirpath)
    h = hashlib.sha256()
    h.update((d / "manifest.txt").read_bytes())
    h.update((d / "weights.bin").read_bytes())
    return h.hexdigest()
