"""Little-endian binary containers for checkpoints.

Layout::

    magic[4] | version u16 | config_len u32 | config JSON (utf-8)
    | n_weights u64 | weights f64[n_weights] | crc32 u32

The CRC covers every byte before it.  Datasets use their own layout (see
``viewacq.synthstudy``) but share the error kinds.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from viewacq.errors import ChecksumError, DataFormatError, TruncatedFileError, VersionMismatchError


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_checkpoint(path, magic: bytes, version: int, config: dict, weights: np.ndarray) -> None:
    weights = np.ascontiguousarray(weights, dtype="<f8")
    cfg = canonical_json(config)
    body = b"".join([
        magic,
        struct.pack("<HI", version, len(cfg)),
        cfg,
        struct.pack("<Q", weights.size),
        weights.tobytes(),
    ])
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"file ends at byte {len(self.data)}, needed {self.pos + n}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def check_magic(data: bytes, magic: bytes) -> None:
    if len(data) < len(magic) or data[:len(magic)] != magic:
        raise DataFormatError(f"bad magic bytes: expected {magic!r}")


def read_checkpoint(path, magic: bytes, version: int) -> tuple[dict, np.ndarray]:
    data = Path(path).read_bytes()
    check_magic(data, magic)
    r = _Reader(data)
    r.take(len(magic))
    (ver, cfg_len) = r.unpack("<HI")
    if ver != version:
        raise VersionMismatchError(f"file version {ver}, reader supports {version}")
    cfg = r.take(cfg_len)
    (n,) = r.unpack("<Q")
    blob = r.take(8 * n)
    (crc,) = r.unpack("<I")
    if zlib.crc32(data[:r.pos - 4]) != crc:
        raise ChecksumError("checkpoint CRC32 mismatch")
    if r.pos != len(data):
        raise DataFormatError("trailing bytes after checkpoint")
    try:
        config = json.loads(cfg.decode("utf-8"))
    except ValueError as exc:
        raise DataFormatError("checkpoint config is not valid JSON") from exc
    return config, np.frombuffer(blob, dtype="<f8").astype(np.float64)
