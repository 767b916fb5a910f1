"""8-bit binary PPM (P6) / PGM (P5) reading and writing."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    """``image`` is ``3 x H x W`` in [0, 1]."""
    _, h, w = image.shape
    pixels = to_uint8(image).transpose(1, 2, 0)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + pixels.tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    """``gray`` is ``H x W`` in [0, 1]; binary masks map to 0 / 255."""
    h, w = gray.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + to_uint8(gray).tobytes())


def _tokens(buf: bytes, n: int):
    out, i = [], 0
    while len(out) < n:
        while buf[i:i + 1].isspace():
            i += 1
        if buf[i:i + 1] == b"#":
            while buf[i:i + 1] not in (b"\n", b""):
                i += 1
            continue
        j = i
        while not buf[j:j + 1].isspace():
            j += 1
        out.append(buf[i:j])
        i = j
    return out, i + 1


def read_pnm(path) -> np.ndarray:
    """Return ``3 x H x W`` (P6) or ``H x W`` (P5) floats in [0, 1]."""
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), offset = _tokens(buf, 4)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit images are supported")
    if magic == b"P6":
        raw = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=offset)
        return raw.reshape(h, w, 3).transpose(2, 0, 1) / 255.0
    if magic == b"P5":
        raw = np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=offset)
        return raw.reshape(h, w) / 255.0
    raise ValueError(f"{path}: unsupported format {magic!r}")


def read_mask(path) -> np.ndarray:
    return (read_pnm(path) >= 0.5).astype(np.uint8)
