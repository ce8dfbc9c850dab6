"""Frame types and the length-prefixed wire encoding.

Wire layout (big-endian):
    2 bytes: 12-bit magic 0xFD5 and a 4-bit version nibble, packed as
             (0xFD5 << 4) | version
    1 byte:  frame kind
    4 bytes: correlation id (round index or request id)
    4 bytes: body length
    body
"""

from __future__ import annotations

import enum
import ipaddress
import struct
from dataclasses import dataclass, field

FRAME_MAGIC = 0xFD5
FRAME_VERSION = 1
HEADER_LEN = 11


class FabricError(Exception):
    """Base class for transport failures."""


class AddressInUseError(FabricError):
    pass


class RoutingError(FabricError):
    """No live binding for the destination address (stale address book)."""


class FrameTooLargeError(FabricError):
    pass


class ChannelClosedError(FabricError):
    pass


class MalformedFrameError(FabricError):
    pass


class FrameKind(enum.IntEnum):
    MODEL_EXCHANGE = 1
    RENDEZVOUS_NOTICE = 2
    AUTH_REQUEST = 3
    AUTH_RESPONSE = 4
    METRICS_REPORT = 5
    CONTROL = 6


@dataclass(frozen=True, order=True)
class PeerAddress:
    """An IPv4 ip:port binding; ports below 1024 are reserved."""

    ip: str
    port: int

    def __post_init__(self):
        ipaddress.IPv4Address(self.ip)
        if not 1024 <= self.port <= 65535:
            raise ValueError(f"port {self.port} outside [1024, 65535]")

    def __str__(self) -> str:
        return f"{self.ip}:{self.port}"

    @classmethod
    def parse(cls, text: str) -> "PeerAddress":
        ip, _, port = text.rpartition(":")
        return cls(ip=ip, port=int(port))

    def packed(self) -> bytes:
        return ipaddress.IPv4Address(self.ip).packed + struct.pack(">H", self.port)

    @classmethod
    def unpack(cls, raw: bytes) -> "PeerAddress":
        if len(raw) != 6:
            raise MalformedFrameError("packed address must be 6 bytes")
        return cls(ip=str(ipaddress.IPv4Address(raw[:4])), port=struct.unpack(">H", raw[4:])[0])


@dataclass(frozen=True)
class Frame:
    kind: FrameKind
    correlation_id: int
    body: bytes = field(repr=False)

    @property
    def wire_size(self) -> int:
        return HEADER_LEN + len(self.body)

    def encode(self) -> bytes:
        packed_magic = (FRAME_MAGIC << 4) | FRAME_VERSION
        return struct.pack(">HBII", packed_magic, int(self.kind), self.correlation_id, len(self.body)) + self.body

    @classmethod
    def decode(cls, blob: bytes) -> "Frame":
        if len(blob) < HEADER_LEN:
            raise MalformedFrameError("short frame")
        packed_magic, kind, corr, blen = struct.unpack(">HBII", blob[:HEADER_LEN])
        if packed_magic >> 4 != FRAME_MAGIC or packed_magic & 0xF != FRAME_VERSION:
            raise MalformedFrameError("bad frame magic/version")
        if len(blob) != HEADER_LEN + blen:
            raise MalformedFrameError("frame length mismatch")
        try:
            kind_v = FrameKind(kind)
        except ValueError as exc:
            raise MalformedFrameError(f"unknown frame kind {kind}") from exc
        return cls(kind=kind_v, correlation_id=corr, body=blob[HEADER_LEN:])


@dataclass(frozen=True)
class Delivery:
    """A received frame plus its transport metadata."""

    frame: Frame
    src: PeerAddress
    dst: PeerAddress
    recv_time: float
