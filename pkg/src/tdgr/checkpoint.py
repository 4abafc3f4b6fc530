"""Flat binary checkpoints: a versioned text header plus little-endian float64 blobs.

Layout:
    line 1: magic ``CKPT64LE``
    line 2: one-line JSON manifest ``{"version": 1, "arrays": [[name, shape], ...], "meta": {...}}``
    then the raw ``<f8`` bytes of every array, in manifest order.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .nn import Mlp

MAGIC = b"CKPT64LE"
VERSION = 1


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    manifest = {
        "version": VERSION,
        "arrays": [[name, list(np.asarray(a).shape)] for name, a in arrays.items()],
        "meta": meta or {},
    }
    with open(path, "wb") as f:
        f.write(MAGIC + b"\n")
        f.write(json.dumps(manifest, sort_keys=True).encode("utf-8") + b"\n")
        for a in arrays.values():
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    nl1 = data.find(b"\n")
    if nl1 < 0 or data[:nl1] != MAGIC:
        raise CheckpointError(f"{path}: not a {MAGIC.decode()} checkpoint")
    nl2 = data.find(b"\n", nl1 + 1)
    if nl2 < 0:
        raise CheckpointError(f"{path}: truncated header")
    try:
        manifest = json.loads(data[nl1 + 1 : nl2].decode("utf-8"))
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: bad manifest: {e}") from e
    if manifest.get("version") != VERSION:
        raise CheckpointError(
            f"{path}: format version {manifest.get('version')}, expected {VERSION}"
        )
    arrays: dict[str, np.ndarray] = {}
    off = nl2 + 1
    for name, shape in manifest["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if off + nbytes > len(data):
            raise CheckpointError(f"{path}: array '{name}' runs past end of file")
        arrays[name] = np.frombuffer(data[off : off + nbytes], dtype="<f8").reshape(shape).copy()
        off += nbytes
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    return arrays, manifest.get("meta", {})


def save_mlp(path, mlp: Mlp, meta: dict | None = None) -> None:
    arrays = {}
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        arrays[f"layer{i}.weight"] = w
        arrays[f"layer{i}.bias"] = b
    full_meta = {"kind": "mlp", "sizes": list(mlp.sizes)}
    full_meta.update(meta or {})
    save_arrays(path, arrays, full_meta)


def load_mlp(path) -> tuple[Mlp, dict]:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "mlp":
        raise CheckpointError(f"{path}: checkpoint kind {meta.get('kind')!r}, expected 'mlp'")
    sizes = tuple(meta["sizes"])
    flat = np.empty(sum(a.size for a in arrays.values()), dtype=np.float64)
    off = 0
    for i in range(len(sizes) - 1):
        for part in ("weight", "bias"):
            a = arrays[f"layer{i}.{part}"]
            flat[off : off + a.size] = a.ravel()
            off += a.size
    mlp = Mlp(sizes, flat)
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        if w.shape != arrays[f"layer{i}.weight"].shape or b.shape != arrays[f"layer{i}.bias"].shape:
            raise CheckpointError(f"{path}: layer {i} shape mismatch against sizes manifest")
    return mlp, meta
