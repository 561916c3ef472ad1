"""Zoom subflow classification from packet bytes, behind a small plugin registry."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Optional

from .packets import RtpHeader, SimPacket, SubflowKind

ZOOM_PORT = 8801

TYPE_AUDIO = 0x0F
TYPE_VIDEO = 0x10
TYPE_PROBE = 0x15
TYPE_CONTROL = 0x01

BASE_EXTENSIONS = frozenset({0x500000, 0x5FF000, 0x5F0FFF, 0x5F7FFF})
HIGH_FPS_EXTENSIONS = frozenset({0x5FF777, 0x5FFAAA, 0x5FF555})
LOW_FPS_EXTENSIONS = frozenset({0x577777})
SMALL_WINDOW_EXTENSION = 0x3A1C05

# Zoom media header precedes the RTP header in the UDP payload.
RTP_OFFSET = 24
_ONE_BYTE_PROFILE = 0xBEDE


@dataclass(frozen=True)
class ZoomWirePayload:
    src_port: int
    dst_port: int
    head: bytes
    payload_len: int
    ip_version: int = 4

    @property
    def zoom_pkt_type(self) -> Optional[int]:
        return self.head[8] if len(self.head) > 8 else None

    @property
    def first_extension_data(self) -> Optional[int]:
        return first_extension_data(self.head)


def first_extension_data(head: bytes) -> Optional[int]:
    """First 3 bytes of the first RTP header-extension element, big-endian."""
    rtp = head[RTP_OFFSET:]
    if len(rtp) < 12:
        return None
    b0 = rtp[0]
    if b0 >> 6 != 2 or not b0 & 0x10:
        return None
    pos = 12 + 4 * (b0 & 0x0F)
    if len(rtp) < pos + 4:
        return None
    profile, words = struct.unpack_from("!HH", rtp, pos)
    body = rtp[pos + 4 : pos + 4 + 4 * words]
    if profile != _ONE_BYTE_PROFILE:
        return int.from_bytes(body[:3], "big") if len(body) >= 3 else None
    i = 0
    while i < len(body):
        hdr = body[i]
        if hdr == 0:  # padding
            i += 1
            continue
        length = (hdr & 0x0F) + 1
        data = body[i + 1 : i + 1 + length]
        if len(data) < 3:
            return None
        return int.from_bytes(data[:3], "big")
    return None


def classify_zoom(payload: Optional[ZoomWirePayload]) -> SubflowKind:
    if payload is None or payload.ip_version != 4 or len(payload.head) < 9:
        return SubflowKind.BACKGROUND
    if ZOOM_PORT not in (payload.src_port, payload.dst_port):
        return SubflowKind.BACKGROUND
    pkt_type = payload.head[8]
    if pkt_type == TYPE_AUDIO:
        return SubflowKind.AUDIO
    if pkt_type == TYPE_VIDEO:
        ext = payload.first_extension_data
        if ext in BASE_EXTENSIONS:
            return SubflowKind.BASE
        if ext in HIGH_FPS_EXTENSIONS:
            return SubflowKind.HIGH_FPS_ENHANCEMENT
        if ext in LOW_FPS_EXTENSIONS:
            return SubflowKind.LOW_FPS_ENHANCEMENT
        return SubflowKind.SMALL_WINDOW_VIDEO
    if pkt_type == TYPE_PROBE and payload.payload_len > 1000:
        return SubflowKind.PROBE
    return SubflowKind.CONTROL


# Header sizes used to turn an IP packet size into an L7 payload length.
IP_UDP_OVERHEAD = 28


def wire_payload(pkt: SimPacket) -> Optional[ZoomWirePayload]:
    if not pkt.payload_head:
        return None
    return ZoomWirePayload(
        src_port=pkt.transport.src_port,
        dst_port=pkt.transport.dst_port,
        head=pkt.payload_head,
        payload_len=max(0, pkt.size_bytes - IP_UDP_OVERHEAD),
        ip_version=pkt.ip_version,
    )


def encode_zoom_head(pkt_type: int, rtp: Optional[RtpHeader] = None, ssrc: int = 0) -> bytes:
    """Build the leading payload bytes the classifier inspects."""
    head = bytearray(RTP_OFFSET)
    head[0] = 0x05
    head[8] = pkt_type
    if rtp is None:
        return bytes(head)
    marker = 0x80 if rtp.last_of_frame else 0
    payload_type = 98 if pkt_type == TYPE_VIDEO else 112
    head += struct.pack(
        "!BBHII", 0x90, marker | payload_type, rtp.sequence, rtp.timestamp, ssrc & 0xFFFFFFFF
    )
    # one-byte-header extension block with a single 3-byte element (id 1)
    head += struct.pack("!HH", _ONE_BYTE_PROFILE, 1)
    head += bytes([0x12]) + rtp.extension_data.to_bytes(3, "big")
    return bytes(head)


EXTENSION_FOR_KIND = {
    SubflowKind.BASE: 0x500000,
    SubflowKind.HIGH_FPS_ENHANCEMENT: 0x5FF777,
    SubflowKind.LOW_FPS_ENHANCEMENT: 0x577777,
    SubflowKind.SMALL_WINDOW_VIDEO: SMALL_WINDOW_EXTENSION,
}


@dataclass(frozen=True)
class DpiPlugin:
    name: str
    classify: Callable[[SimPacket], SubflowKind]


def _zoom_plugin_classify(pkt: SimPacket) -> SubflowKind:
    return classify_zoom(wire_payload(pkt))


_REGISTRY: dict[str, DpiPlugin] = {}


def register_plugin(plugin: DpiPlugin) -> None:
    _REGISTRY[plugin.name] = plugin


def get_plugin(name: str) -> DpiPlugin:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise KeyError(f"no DPI plugin named {name!r}; known: {sorted(_REGISTRY)}") from None


register_plugin(DpiPlugin("zoom", _zoom_plugin_classify))
