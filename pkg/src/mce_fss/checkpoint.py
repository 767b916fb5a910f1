"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    b"MCEC"
    u32  format version
    u64  config fingerprint
    u64  seed
    u32  record count
    u64  total file size in bytes
    record*:
        u16  name length, name (utf-8)
        u8   dtype tag (0 = float64, 1 = float32, 2 = uint8)
        u8   rank
        u32  extent, repeated rank times
        payload, little-endian, row-major
    u32  CRC-32 of every preceding byte

The model configuration travels as a uint8 record named ``__config__``
holding canonical JSON, so a file can rebuild its own model.

A CRC mismatch is reported as truncation only when the file is shorter
than its declared size and the records also run past the end; any other
mismatch (including a damaged size or extent field) is a checksum error.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MCEC"
VERSION = 1
CONFIG_RECORD = "__config__"
_HEADER = struct.Struct("<4sIQQIQ")
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("u1")}
_TAGS = {np.dtype("float64"): 0, np.dtype("float32"): 1, np.dtype("uint8"): 2}


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    """Not a checkpoint file (bad magic) or malformed records."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    fingerprint: int = 0
    seed: int = 0
    version: int = VERSION


def encode(ck: Checkpoint) -> bytes:
    records = dict(ck.params)
    cfg_blob = json.dumps(ck.config, sort_keys=True).encode()
    records[CONFIG_RECORD] = np.frombuffer(cfg_blob, dtype=np.uint8)
    out = bytearray(_HEADER.size)
    for name in sorted(records):
        arr = np.ascontiguousarray(records[name])
        if arr.dtype not in _TAGS:
            raise CheckpointFormatError(f"{name}: unsupported dtype {arr.dtype}")
        tag = _TAGS[arr.dtype]
        raw = name.encode()
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<BB", tag, arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.astype(_DTYPES[tag], copy=False).tobytes()
    _HEADER.pack_into(out, 0, MAGIC, ck.version, ck.fingerprint, ck.seed, len(records), len(out) + 4)
    out += struct.pack("<I", zlib.crc32(out))
    return bytes(out)


def _walk(buf: bytes, count: int, offset: int):
    """Yield ``(name, dtype, shape, payload_slice)``; raise on running out of bytes."""
    end = len(buf) - 4
    for _ in range(count):
        if offset + 2 > end:
            raise CheckpointTruncatedError("file ends inside a record header")
        (n,) = struct.unpack_from("<H", buf, offset)
        offset += 2
        if offset + n + 2 > end:
            raise CheckpointTruncatedError("file ends inside a record name")
        name = buf[offset:offset + n].decode("utf-8", errors="replace")
        offset += n
        tag, rank = struct.unpack_from("<BB", buf, offset)
        offset += 2
        if offset + 4 * rank > end:
            raise CheckpointTruncatedError("file ends inside record extents")
        shape = struct.unpack_from(f"<{rank}I", buf, offset)
        offset += 4 * rank
        dtype = _DTYPES.get(tag)
        if dtype is None:
            raise CheckpointFormatError(f"{name}: unknown dtype tag {tag}")
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if offset + size > end:
            raise CheckpointTruncatedError(f"file ends inside the payload of {name}")
        yield name, dtype, shape, (offset, offset + size)
        offset += size
    if offset != end:
        raise CheckpointFormatError(f"{end - offset} unexpected bytes after the last record")


def decode(buf: bytes) -> Checkpoint:
    if len(buf) < _HEADER.size + 4:
        raise CheckpointTruncatedError(f"file has {len(buf)} bytes, shorter than a header")
    magic, version, fingerprint, seed, count, size = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}")
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) != crc:
        if len(buf) < size:
            try:
                for _ in _walk(buf, count, _HEADER.size):
                    pass
            except CheckpointTruncatedError:
                raise
            except CheckpointError:
                pass
        raise CheckpointChecksumError("CRC-32 mismatch; file is corrupted")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, expected {VERSION}")
    params = {}
    config = {}
    for name, dtype, shape, (lo, hi) in _walk(buf, count, _HEADER.size):
        arr = np.frombuffer(buf[lo:hi], dtype=dtype).reshape(shape)
        if name == CONFIG_RECORD:
            config = json.loads(arr.tobytes().decode())
        else:
            params[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    return Checkpoint(params, config, fingerprint, seed, version)


def save(ck: Checkpoint, path) -> None:
    Path(path).write_bytes(encode(ck))


def load(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def from_model(model, fingerprint: int = 0) -> Checkpoint:
    return Checkpoint(model.state_dict(), model.config_dict(), fingerprint, model.cfg.seed)


def to_model(ck: Checkpoint):
    from .model import FewShotSegmenter, ModelConfig

    model = FewShotSegmenter(ModelConfig(**ck.config))
    model.load_state_dict(ck.params)
    return model


def save_checkpoint(model, path, fingerprint: int = 0) -> None:
    save(from_model(model, fingerprint), path)


def load_checkpoint(path):
    """Rebuild the model stored at ``path``."""
    return to_model(load(path))
