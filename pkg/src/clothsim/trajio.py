"""Trajectory, diagnostics, and manifest output.

The binary positions file is frame-major 64-bit little-endian floats with a
16-byte header: magic "DFCL", version, node count, frame count (u32 each).
"""

from __future__ import annotations

import csv
import hashlib
import json
import platform
import struct
import sys
from pathlib import Path

import numpy as np

from .errors import ParseError

__all__ = [
    "write_trajectory",
    "read_trajectory",
    "write_csv",
    "write_manifest",
    "config_hash",
]

_MAGIC = b"DFCL"
_VERSION = 1


def write_trajectory(path, positions: np.ndarray) -> None:
    """positions: (frames, 3m) stacked nodal positions."""
    arr = np.ascontiguousarray(positions, dtype="<f8")
    if arr.ndim != 2 or arr.shape[1] % 3 != 0:
        raise ValueError("positions must be (frames, 3m)")
    frames, dof = arr.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<III", _VERSION, dof // 3, frames))
        fh.write(arr.tobytes())


def read_trajectory(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ParseError(f"bad magic {magic!r}, expected {_MAGIC!r}")
        version, m, frames = struct.unpack("<III", fh.read(12))
        if version != _VERSION:
            raise ParseError(f"unsupported version {version}")
        data = np.frombuffer(fh.read(), dtype="<f8")
    expected = frames * 3 * m
    if data.size != expected:
        raise ParseError(f"expected {expected} floats, found {data.size}")
    return data.reshape(frames, 3 * m).astype(np.float64)


def write_csv(path, rows: list[dict]) -> None:
    if not rows:
        Path(path).write_text("")
        return
    fields = list(rows[0].keys())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


def config_hash(config_text: str) -> str:
    return hashlib.sha256(config_text.encode("utf-8")).hexdigest()


def write_manifest(path, config_text: str, seed: int, extra: dict | None = None) -> dict:
    """Everything needed to reproduce the run bitwise: config, seed, versions."""
    import numpy
    import scipy

    from . import __version__

    manifest = {
        "config_sha256": config_hash(config_text),
        "config": config_text,
        "seed": seed,
        "package_version": __version__,
        "numpy_version": numpy.__version__,
        "scipy_version": scipy.__version__,
        "python_version": sys.version.split()[0],
        "platform": platform.platform(),
        "argv": sys.argv,
    }
    if extra:
        manifest.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest
