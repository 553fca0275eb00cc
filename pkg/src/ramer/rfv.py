"""RFV1 binary feature files.

Layout (all little-endian)::

    b"RAMERFV1"  u16 version  u8 modality  u32 dim  u64 count
    count x ( u16 id_len, id bytes (UTF-8), dim x f32 )
    u32 CRC32 of everything above

The same layout is used for raw embedding files written by ``gen-data`` and
for the per-modality hidden-feature stores.
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .modality import CODE, FROM_CODE, check_modality

MAGIC = b"RAMERFV1"
VERSION = 1
_HEADER = struct.Struct("<8sHBIQ")
_F32 = np.dtype("<f4")


class FormatError(ValueError):
    """A binary artifact failed to parse; ``offset`` is the byte position."""

    def __init__(self, path, offset: int, msg: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path}: byte {offset}: {msg}")


def encode_rfv(modality: str, ids, vectors: np.ndarray) -> bytes:
    check_modality(modality)
    vecs = np.ascontiguousarray(vectors, dtype=_F32)
    if vecs.ndim != 2 or vecs.shape[0] != len(ids):
        raise ValueError(f"expected ({len(ids)}, dim) vectors, got {vecs.shape}")
    dim = vecs.shape[1]
    parts = [_HEADER.pack(MAGIC, VERSION, CODE[modality], dim, len(ids))]
    for sid, row in zip(ids, vecs):
        raw = sid.encode("utf-8")
        if not raw or len(raw) > 0xFFFF:
            raise ValueError(f"id must be 1..65535 bytes, got {len(raw)}")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(row.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def write_rfv(path, modality: str, ids, vectors: np.ndarray) -> None:
    Path(path).write_bytes(encode_rfv(modality, ids, vectors))


def decode_rfv(data: bytes, path="<bytes>") -> tuple[str, list[str], np.ndarray]:
    if len(data) < _HEADER.size + 4:
        raise FormatError(path, 0, "file too short for header")
    magic, version, mcode, dim, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(path, 0, f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(path, 8, f"unsupported version {version}")
    if mcode not in FROM_CODE:
        raise FormatError(path, 10, f"unknown modality code {mcode}")
    body, trailer = data[:-4], data[-4:]
    (crc,) = struct.unpack("<I", trailer)
    if zlib.crc32(body) != crc:
        raise FormatError(path, len(body), "CRC32 mismatch")

    ids: list[str] = []
    vecs = np.empty((count, dim), dtype=np.float32)
    pos = _HEADER.size
    row_bytes = 4 * dim
    for i in range(count):
        if pos + 2 > len(body):
            raise FormatError(path, pos, f"truncated at record {i}")
        (n,) = struct.unpack_from("<H", body, pos)
        pos += 2
        if pos + n + row_bytes > len(body):
            raise FormatError(path, pos, f"truncated at record {i}")
        try:
            ids.append(body[pos:pos + n].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError(path, pos, f"record {i}: id is not UTF-8") from exc
        pos += n
        vecs[i] = np.frombuffer(body, dtype=_F32, count=dim, offset=pos)
        pos += row_bytes
    if pos != len(body):
        raise FormatError(path, pos, f"{len(body) - pos} trailing bytes after {count} records")
    return FROM_CODE[mcode], ids, vecs


def read_rfv(path) -> tuple[str, list[str], np.ndarray]:
    return decode_rfv(Path(path).read_bytes(), path)
