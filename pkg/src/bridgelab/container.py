"""SMPX: a little-endian container of named, checksummed array sections.

Layout::

    magic      4 bytes   b"SMPX"
    version    u32
    count      u32       number of sections
    table      count x { name_len u16, name utf-8,
                         dtype u8, ndim u8, shape ndim x u64,
                         nbytes u64, crc32 u32 }
    payloads   concatenated raw little-endian bytes, in table order

dtype codes: 1 = float64, 2 = int64, 3 = uint8.
"""

from __future__ import annotations

import os
import struct
import zlib
from typing import Mapping

import numpy as np

MAGIC = b"SMPX"
VERSION = 1

_DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}


class FormatError(ValueError):
    """File is not a readable SMPX container (bad magic/version, truncation)."""


class ChecksumError(FormatError):
    """A section payload does not match its stored CRC32."""


def _code_for(arr: np.ndarray) -> int:
    dt = arr.dtype.newbyteorder("=") if arr.dtype.byteorder not in "=|" else arr.dtype
    if dt.kind == "f":
        return 1
    if dt.kind in "iu" and dt != np.dtype("uint8"):
        return 2
    if dt == np.dtype("uint8"):
        return 3
    raise TypeError(f"unsupported dtype {arr.dtype}")


def encode(sections: Mapping[str, np.ndarray]) -> bytes:
    table, payloads = [], []
    for name, arr in sections.items():
        arr = np.asarray(arr)
        code = _code_for(arr)
        payload = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"section {name!r} name or rank too large")
        entry = struct.pack("<H", len(raw_name)) + raw_name
        entry += struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        entry += struct.pack("<QI", len(payload), zlib.crc32(payload))
        table.append(entry)
        payloads.append(payload)
    header = MAGIC + struct.pack("<II", VERSION, len(table))
    return header + b"".join(table) + b"".join(payloads)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("truncated file")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes) -> dict[str, np.ndarray]:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise FormatError("bad magic bytes (not an SMPX file)")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise FormatError(f"unsupported SMPX version {version}")
    entries = []
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("corrupt section name") from exc
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code} in section {name!r}")
        shape = r.unpack(f"<{ndim}Q")
        nbytes, crc = r.unpack("<QI")
        if int(np.prod(shape, dtype=np.int64)) * _DTYPES[code].itemsize != nbytes:
            raise FormatError(f"section {name!r} byte length disagrees with its shape")
        entries.append((name, code, shape, nbytes, crc))
    out = {}
    for name, code, shape, nbytes, crc in entries:
        payload = r.take(nbytes)
        if zlib.crc32(payload) != crc:
            raise ChecksumError(f"checksum mismatch in section {name!r}")
        out[name] = np.frombuffer(payload, dtype=_DTYPES[code]).reshape(shape).astype(_DTYPES[code].newbyteorder("="))
    if r.pos != len(buf):
        raise FormatError("trailing bytes after last section")
    return out


def save(path: str | os.PathLike, sections: Mapping[str, np.ndarray]):
    data = encode(sections)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode(fh.read())


def text_section(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).copy()


def section_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr, dtype=np.uint8)).decode("utf-8")
