"""Versioned binary container for networks and open-set models.

Layout (all integers little-endian)::

    b"CRSR"                      magic
    u32                          format version
    u32, bytes                   header length, UTF-8 ``key=value`` lines
    u32                          number of arrays
    repeated:
        u16, bytes               name length, UTF-8 name
        u8, u32 * ndim           rank and extents
        f64 * prod(extents)      row-major data

The header lines are written sorted by key so that equal contents give equal
bytes.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError

MAGIC = b"CRSR"
FORMAT_VERSION = 1


def header_text(header: Mapping[str, str]) -> str:
    lines = []
    for key in sorted(header):
        value = str(header[key])
        if "\n" in value or "=" in key or "\n" in key:
            raise ValueError(f"header entry {key!r} cannot be encoded")
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def parse_header_text(text: str) -> dict[str, str]:
    header = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"header line {lineno} has no '=': {line!r}")
        header[key] = value
    return header


def encode(header: Mapping[str, str], arrays: Mapping[str, np.ndarray]) -> bytes:
    head = header_text(header).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(head)), head, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file: expected {n} bytes of {what} at offset {self.pos}, "
                              f"only {len(self.buf) - self.pos} left")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    version, head_len = r.unpack("<II", "version and header length")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version} at offset 4")
    try:
        header = parse_header_text(r.take(head_len, "header").decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise FormatError(f"header at offset 12 is not UTF-8: {exc}") from None
    (count,) = r.unpack("<I", "array count")
    arrays = {}
    for _ in range(count):
        start = r.pos
        (name_len,) = r.unpack("<H", "array name length")
        name = r.take(name_len, "array name").decode("utf-8")
        (ndim,) = r.unpack("<B", f"rank of {name}")
        shape = r.unpack(f"<{ndim}I", f"extents of {name}")
        n = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(r.take(8 * n, f"data of {name}"), dtype="<f8").astype(np.float64)
        if name in arrays:
            raise FormatError(f"duplicate array {name!r} at offset {start}")
        arrays[name] = data.reshape(shape)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes at offset {r.pos}")
    return header, arrays


def write(path: str | Path, header: Mapping[str, str], arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(header, arrays))


def read(path: str | Path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())
