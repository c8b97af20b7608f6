"""Raster and JSON file formats.

Float rasters are stored as little-endian float32 after a 16-byte header:
``b"PLFR"`` magic, then uint32 width, uint32 height and a reserved uint32 (0).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .exceptions import DomainError

RASTER_MAGIC = b"PLFR"
_HEADER = struct.Struct("<4sIII")


def write_float_raster(path, raster: np.ndarray) -> None:
    raster = np.asarray(raster)
    if raster.ndim != 2:
        raise DomainError("float raster must be two-dimensional")
    height, width = raster.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(RASTER_MAGIC, width, height, 0))
        fh.write(np.ascontiguousarray(raster, dtype="<f4").tobytes())


def read_float_raster(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise DomainError(f"{path}: truncated raster header")
    magic, width, height, _ = _HEADER.unpack_from(data)
    if magic != RASTER_MAGIC:
        raise DomainError(f"{path}: not a float raster (bad magic)")
    body = data[_HEADER.size:]
    if len(body) != 4 * width * height:
        raise DomainError(f"{path}: raster body size does not match {width}x{height}")
    return np.frombuffer(body, dtype="<f4").reshape(height, width).astype(np.float64)


def write_png(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise DomainError("PNG export expects uint8 data")
    # fixed encoder settings keep the output byte-identical between runs
    Image.fromarray(image).save(path, format="PNG", optimize=False, compress_level=6)


def read_png(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.array(img)


def read_rgb(path) -> np.ndarray:
    """Read a panorama as float RGB in [0, 1]."""
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def write_json(path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DomainError(f"{path}: invalid JSON ({exc})") from exc
