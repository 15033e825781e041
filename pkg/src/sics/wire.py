"""Packet framing shared by the gateway and the cloud.

Frame layout, big-endian::

    magic    4 bytes  b"SICS"
    label    u16
    pool     u16      field-pool index, 0 = no rewrite
    header   16 bytes ciphertext of the padded header
    length   u16      payload length
    payload  bytes

A plain encrypted tunnel frame is the same without ``label`` and ``pool``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

MAGIC = b"SICS"
CT_BYTES = 16
_HEAD = struct.Struct(">4sHH16sH")
_TUNNEL_HEAD = struct.Struct(">4s16sH")
FRAME_OVERHEAD = _HEAD.size          # 26
TUNNEL_OVERHEAD = _TUNNEL_HEAD.size  # 22
LABEL_BITS = 16
POOL_BITS = 16


class FramingError(ValueError):
    pass


@dataclass(slots=True)
class SicsPacket:
    label: int
    pool_index: int
    header_ct: bytes
    payload: bytes = b""

    def to_bytes(self) -> bytes:
        if not 0 <= self.label < (1 << LABEL_BITS):
            raise FramingError(f"label {self.label} does not fit in {LABEL_BITS} bits")
        if not 0 <= self.pool_index < (1 << POOL_BITS):
            raise FramingError(f"pool index {self.pool_index} out of range")
        if len(self.header_ct) != CT_BYTES:
            raise FramingError("header ciphertext must be one 16-byte block")
        if len(self.payload) > 0xFFFF:
            raise FramingError("payload too long")
        return _HEAD.pack(MAGIC, self.label, self.pool_index, self.header_ct, len(self.payload)) + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "SicsPacket":
        if len(data) < FRAME_OVERHEAD:
            raise FramingError("truncated frame")
        magic, label, pool, ct, n = _HEAD.unpack_from(data)
        if magic != MAGIC:
            raise FramingError(f"bad magic {magic!r}")
        payload = bytes(data[FRAME_OVERHEAD:])
        if len(payload) != n:
            raise FramingError(f"payload length {len(payload)} != declared {n}")
        return cls(label, pool, ct, payload)


def tunnel_frame(header_ct: bytes, payload: bytes) -> bytes:
    """The same packet in a plain encrypted tunnel: no label, no pool index."""
    return _TUNNEL_HEAD.pack(MAGIC, header_ct, len(payload)) + payload
