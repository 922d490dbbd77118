"""Self-describing container format for update binaries stored in the cloud:
a magic tag plus length-prefixed target ECU name, version string, and body.
"""
from __future__ import annotations

import struct

MAGIC = b"SWUP"


def build_sw_binary(ecu: str, version: str, body: bytes) -> bytes:
    ecu_b = ecu.encode()
    version_b = version.encode()
    return b"".join([
        MAGIC,
        struct.pack(">I", len(ecu_b)), ecu_b,
        struct.pack(">I", len(version_b)), version_b,
        struct.pack(">I", len(body)), body,
    ])


def parse_sw_binary(blob: bytes) -> tuple[str, str, bytes]:
    """Return (ecu, version, body); raises ValueError on malformed input."""
    if blob[:4] != MAGIC:
        raise ValueError("not an update container")
    offset = 4
    parts = []
    for _ in range(3):
        if offset + 4 > len(blob):
            raise ValueError("truncated update container")
        (length,) = struct.unpack_from(">I", blob, offset)
        offset += 4
        if offset + length > len(blob):
            raise ValueError("truncated update container")
        parts.append(blob[offset:offset + length])
        offset += length
    if offset != len(blob):
        raise ValueError("trailing bytes in update container")
    return parts[0].decode(), parts[1].decode(), parts[2]
