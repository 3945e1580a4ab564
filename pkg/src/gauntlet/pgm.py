"""Binary PGM (P5) serialization for tile bitmaps.

PGM is the on-disk corpus format and, base64-encoded, the wire format for
challenge images. The encoding is canonical (single space separators,
single trailing newline in the header) so identical bitmaps always produce
identical bytes.
"""
from __future__ import annotations

import base64
from pathlib import Path

import numpy as np

from .errors import ConfigError


def pgm_bytes(bitmap: np.ndarray) -> bytes:
    if bitmap.dtype != np.uint8 or bitmap.ndim != 2:
        raise ConfigError("PGM encoding requires a 2-D uint8 array")
    h, w = bitmap.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    return header + bitmap.tobytes()


def parse_pgm(data: bytes) -> np.ndarray:
    """Parse binary PGM with maxval 255. Comments are not supported; this
    reader only targets files this package writes."""
    if not data.startswith(b"P5"):
        raise ConfigError("not a binary PGM (P5) payload")
    # Header: magic, width, height, maxval, then a single whitespace byte
    # before the raster.
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ConfigError("truncated PGM header")
        fields.append(data[start:pos])
    pos += 1  # the single whitespace after maxval
    w, h, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise ConfigError(f"unsupported PGM maxval {maxval}")
    raster = data[pos : pos + w * h]
    if len(raster) != w * h:
        raise ConfigError("PGM raster shorter than promised dimensions")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).copy()


def write_pgm(path: str | Path, bitmap: np.ndarray) -> None:
    Path(path).write_bytes(pgm_bytes(bitmap))


def read_pgm(path: str | Path) -> np.ndarray:
    return parse_pgm(Path(path).read_bytes())


def pgm_b64(bitmap: np.ndarray) -> str:
    return base64.b64encode(pgm_bytes(bitmap)).decode("ascii")


def parse_pgm_b64(payload: str) -> np.ndarray:
    return parse_pgm(base64.b64decode(payload.encode("ascii")))
