"""Raster and label file formats.

Rasters are stored either as binary PGM (P5, 8/16-bit, linearly rescaled) or as
raw little-endian float32 (``.f32``). Both carry a ``<name>.meta.json`` sidecar
with ``{"min", "max", "height", "width"}``. Label maps are plain 8-bit PGM.
"""
from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np

from .grid import LabelMap, Raster

_HEADER_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def write_json(path, obj) -> None:
    """Canonical JSON: sorted keys, fixed indentation, trailing newline."""
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_sidecar(path, arr: np.ndarray) -> None:
    write_json(sidecar_path(path), {
        "min": float(arr.min()),
        "max": float(arr.max()),
        "height": int(arr.shape[0]),
        "width": int(arr.shape[1]),
    })


def _read_sidecar(path) -> dict:
    side = sidecar_path(path)
    if not side.exists():
        raise FileNotFoundError(f"missing sidecar {side}")
    meta = json.loads(side.read_text())
    for key in ("min", "max", "height", "width"):
        if key not in meta:
            raise ValueError(f"sidecar {side} lacks {key!r}")
    return meta


def write_pgm_bytes(path, data: np.ndarray, maxval: int) -> None:
    data = np.asarray(data)
    h, w = data.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    if maxval < 256:
        body = data.astype(np.uint8).tobytes()
    else:
        body = data.astype(">u2").tobytes()
    Path(path).write_bytes(header + body)


def read_pgm_bytes(path) -> tuple[np.ndarray, int]:
    """Parse a binary P5 PGM. Returns (integer array, maxval)."""
    raw = Path(path).read_bytes()
    pos = 0
    tokens = []
    for _ in range(4):
        m = _HEADER_TOKEN.match(raw, pos)
        if m is None:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    width, height, maxval = (int(t) for t in tokens[1:])
    if not 0 < maxval < 65536:
        raise ValueError(f"{path}: invalid maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    dtype = np.dtype(np.uint8) if maxval < 256 else np.dtype(">u2")
    need = width * height * dtype.itemsize
    body = raw[pos:pos + need]
    if len(body) != need:
        raise ValueError(f"{path}: expected {need} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=dtype).reshape(height, width).astype(np.int64), maxval


def save_raster_pgm(path, raster: Raster, bits: int = 16) -> None:
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    arr = raster.values
    maxval = (1 << bits) - 1
    lo, hi = float(arr.min()), float(arr.max())
    scale = (hi - lo) if hi > lo else 1.0
    q = np.rint((arr - lo) / scale * maxval)
    write_pgm_bytes(path, q, maxval)
    _write_sidecar(path, arr)


def load_raster_pgm(path) -> Raster:
    q, maxval = read_pgm_bytes(path)
    meta = _read_sidecar(path)
    if (meta["height"], meta["width"]) != q.shape:
        raise ValueError(f"{path}: sidecar dims do not match PGM dims")
    lo, hi = float(meta["min"]), float(meta["max"])
    return Raster(lo + q / maxval * (hi - lo))


def save_raster_f32(path, raster: Raster) -> None:
    arr = raster.values
    Path(path).write_bytes(arr.astype("<f4").tobytes())
    _write_sidecar(path, arr.astype("<f4"))


def load_raster_f32(path) -> Raster:
    meta = _read_sidecar(path)
    h, w = int(meta["height"]), int(meta["width"])
    raw = Path(path).read_bytes()
    if len(raw) != 4 * h * w:
        raise ValueError(f"{path}: expected {4 * h * w} bytes, found {len(raw)}")
    return Raster(np.frombuffer(raw, dtype="<f4").reshape(h, w).astype(np.float64))


def load_raster(path) -> Raster:
    path = Path(path)
    if path.suffix == ".f32":
        return load_raster_f32(path)
    if path.suffix == ".pgm":
        return load_raster_pgm(path)
    raise ValueError(f"unknown raster format {path.suffix!r}")


def save_raster(path, raster: Raster) -> None:
    path = Path(path)
    if path.suffix == ".f32":
        save_raster_f32(path, raster)
    elif path.suffix == ".pgm":
        save_raster_pgm(path, raster)
    else:
        raise ValueError(f"unknown raster format {path.suffix!r}")


def save_labels(path, labels: LabelMap) -> None:
    write_pgm_bytes(path, labels.labels, 255)


def load_labels(path) -> LabelMap:
    q, _ = read_pgm_bytes(path)
    return LabelMap(q)


def save_classified(path, classes: np.ndarray, scaled: bool) -> None:
    """Binary {0,1} class map; ``scaled`` writes {0,255} for viewing."""
    classes = np.asarray(classes)
    if not np.all(np.isin(classes, (0, 1))):
        raise ValueError("classified map must contain only 0 and 1")
    write_pgm_bytes(path, classes * 255 if scaled else classes, 255)
