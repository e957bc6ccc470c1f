"""Named-section binary container with CRC32 integrity, used by checkpoints.

Layout: magic (4 bytes) | version u32 | n_sections u32 | table | payload.
Table entry: name_len u32 | name UTF-8 | offset u64 | size u64 | crc32 u32,
sorted by name so a load/save cycle is byte-identical. Offsets are absolute.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

from ..errors import CheckpointError


def write_container(path: str | Path, magic: bytes, version: int,
                    sections: dict[str, bytes]) -> None:
    names = sorted(sections)
    head = magic + struct.pack("<II", version, len(names))
    table_size = sum(4 + len(n.encode()) + 20 for n in names)
    offset = len(head) + table_size
    table = b""
    payload = b""
    for n in names:
        blob = sections[n]
        enc = n.encode()
        table += struct.pack("<I", len(enc)) + enc
        table += struct.pack("<QQI", offset, len(blob), zlib.crc32(blob))
        payload += blob
        offset += len(blob)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(head + table + payload)
    tmp.replace(path)  # atomic publish


def read_container(path: str | Path, magic: bytes,
                   supported_version: int) -> dict[str, bytes]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    if len(data) < 12 or data[:4] != magic:
        raise CheckpointError(f"bad magic in {path}")
    version, n = struct.unpack_from("<II", data, 4)
    if version != supported_version:
        raise CheckpointError(f"unsupported version {version}")
    off = 12
    entries = []
    for _ in range(n):
        if len(data) < off + 4:
            raise CheckpointError("truncated section table")
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        if len(data) < off + nlen + 20:
            raise CheckpointError("truncated section table")
        name = data[off : off + nlen].decode()
        off += nlen
        s_off, s_size, crc = struct.unpack_from("<QQI", data, off)
        off += 20
        entries.append((name, s_off, s_size, crc))
    out = {}
    for name, s_off, s_size, crc in entries:
        if s_off + s_size > len(data):
            raise CheckpointError(f"section {name!r} truncated")
        blob = data[s_off : s_off + s_size]
        if zlib.crc32(blob) != crc:
            raise CheckpointError(f"checksum mismatch in section {name!r}")
        out[name] = blob
    return out
