"""Binary PGM (P5) grayscale image I/O, 8- and 16-bit."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class PgmError(ValueError):
    """Raised for malformed PGM files or unwritable arrays."""


def write_pgm(path, image: np.ndarray, maxval: int | None = None) -> None:
    """Write a 2D unsigned integer array as binary PGM.

    maxval defaults to 255 for uint8 data and 65535 otherwise; 16-bit
    samples are stored big-endian as the format requires.
    """
    img = np.asarray(image)
    if img.ndim != 2:
        raise PgmError("PGM images must be 2D grayscale")
    if img.dtype.kind not in "ui":
        raise PgmError("PGM images must have an unsigned integer dtype")
    if maxval is None:
        maxval = 255 if img.dtype.itemsize == 1 else 65535
    if not 0 < maxval < 65536:
        raise PgmError("maxval must be in [1, 65535]")
    if img.size and int(img.max()) > maxval:
        raise PgmError("image sample exceeds maxval")
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii")
    if maxval < 256:
        payload = img.astype(np.uint8).tobytes()
    else:
        payload = img.astype(">u2").tobytes()
    Path(path).write_bytes(header + payload)


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM; returns uint8 or uint16 depending on maxval."""
    data = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PgmError(f"truncated PGM header in {path}")
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    magic, w_s, h_s, maxval_s = fields
    if magic != b"P5":
        raise PgmError(f"not a binary PGM (magic {magic!r})")
    try:
        width, height, maxval = int(w_s), int(h_s), int(maxval_s)
    except ValueError as exc:
        raise PgmError(f"malformed PGM header in {path}") from exc
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise PgmError(f"invalid PGM dimensions in {path}")
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    count = width * height
    payload = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    if payload.size < count:
        raise PgmError(f"truncated PGM payload in {path}")
    img = payload.reshape(height, width)
    return img.astype(np.uint16) if maxval >= 256 else img.copy()
