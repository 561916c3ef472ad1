"""Packet, frame and subflow vocabulary shared by the simulator modules."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional

VIDEO_CLOCK_HZ = 90000
AUDIO_CLOCK_HZ = 48000
_U32 = 1 << 32


class SubflowKind(str, Enum):
    AUDIO = "Audio"
    BASE = "Base"
    HIGH_FPS_ENHANCEMENT = "HighFpsEnhancement"
    LOW_FPS_ENHANCEMENT = "LowFpsEnhancement"
    SMALL_WINDOW_VIDEO = "SmallWindowVideo"
    PROBE = "Probe"
    CONTROL = "Control"
    BACKGROUND = "Background"


ENHANCEMENT_KINDS = frozenset(
    {SubflowKind.HIGH_FPS_ENHANCEMENT, SubflowKind.LOW_FPS_ENHANCEMENT}
)
VIDEO_KINDS = frozenset(
    {SubflowKind.BASE, SubflowKind.SMALL_WINDOW_VIDEO} | ENHANCEMENT_KINDS
)
MEDIA_KINDS = VIDEO_KINDS | {SubflowKind.AUDIO}


class Direction(str, Enum):
    DOWNLINK = "Downlink"
    UPLINK = "Uplink"


class Priority(str, Enum):
    HIGH = "High"
    LOW = "Low"


@dataclass(frozen=True)
class DropDirective:
    """What the marking stage does with a packet besides queueing it.

    mode is "none", "drop" or "probabilistic"; probability only matters for
    the last one.
    """

    mode: str = "none"
    probability: float = 0.0

    def __post_init__(self):
        if self.mode not in ("none", "drop", "probabilistic"):
            raise ValueError(f"unknown drop mode {self.mode!r}")
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"drop probability {self.probability} outside [0, 1]")

    @staticmethod
    def with_probability(p: float) -> "DropDirective":
        return DropDirective("probabilistic", p)


NO_DROP = DropDirective()
ALWAYS_DROP = DropDirective("drop", 1.0)


@dataclass(frozen=True)
class PriorityClass:
    level: Priority = Priority.LOW
    drop: DropDirective = NO_DROP


HIGH = PriorityClass(Priority.HIGH)
LOW = PriorityClass(Priority.LOW)


@dataclass
class RtpHeader:
    timestamp: int
    sequence: int
    frame_id: int
    last_of_frame: bool
    extension_data: int = 0
    clock_hz: int = VIDEO_CLOCK_HZ

    def __post_init__(self):
        self.timestamp %= _U32
        self.sequence %= 1 << 16
        if not 0 <= self.extension_data < (1 << 24):
            raise ValueError("extension_data must fit in 3 bytes")


@dataclass
class Transport:
    src_port: int = 0
    dst_port: int = 0
    is_syn: bool = False
    is_large_data: bool = False


@dataclass
class Stamps:
    app_emit_ms: Optional[float] = None
    sdap_ingress_ms: Optional[float] = None
    phy_deliver_ms: Optional[float] = None
    ack_ms: Optional[float] = None

    def is_monotone(self) -> bool:
        seen = [
            t
            for t in (self.app_emit_ms, self.sdap_ingress_ms, self.phy_deliver_ms, self.ack_ms)
            if t is not None
        ]
        return all(a <= b for a, b in zip(seen, seen[1:]))


@dataclass(eq=False)
class SimPacket:
    id: int
    ue: int
    direction: Direction
    size_bytes: int
    kind: SubflowKind
    flow: str = ""
    rtp: Optional[RtpHeader] = None
    transport: Transport = field(default_factory=Transport)
    stamps: Stamps = field(default_factory=Stamps)
    priority: PriorityClass = LOW
    # leading bytes of the L7 payload as seen on the wire (ip version 4 assumed)
    payload_head: bytes = b""
    ip_version: int = 4
    fate: str = "pending"
    # free-form attachment, used by the UE load-report control messages
    meta: Optional[dict] = None


class PacketIds:
    """Monotone id allocator, one per simulation."""

    def __init__(self, start: int = 0):
        self._next = start

    def __call__(self) -> int:
        value = self._next
        self._next += 1
        return value


def rtp_ts_to_ms(timestamp: float, sample_rate_hz: float) -> float:
    if not sample_rate_hz > 0:
        raise ValueError(f"sample rate must be positive, got {sample_rate_hz}")
    return timestamp / sample_rate_hz * 1000.0


class RtpUnwrapper:
    """Turns 32-bit RTP timestamps into a monotone extended counter.

    Consecutive values are assumed to be less than 2**31 apart.
    """

    def __init__(self):
        self._last: Optional[int] = None
        self._extended = 0

    def __call__(self, timestamp: int) -> int:
        if self._last is None:
            self._extended = timestamp
        else:
            delta = (timestamp - self._last) % _U32
            if delta >= 1 << 31:
                delta -= _U32
            self._extended += delta
        self._last = timestamp
        return self._extended


TRACE_COLUMNS = (
    "id",
    "flow",
    "ue",
    "direction",
    "kind",
    "size_bytes",
    "priority",
    "drop_mode",
    "drop_probability",
    "src_port",
    "dst_port",
    "is_syn",
    "is_large_data",
    "rtp_timestamp",
    "rtp_sequence",
    "frame_id",
    "last_of_frame",
    "extension_data",
    "app_emit_ms",
    "sdap_ingress_ms",
    "phy_deliver_ms",
    "ack_ms",
    "fate",
)


def fmt_ms(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.3f}"


def trace_row(pkt: SimPacket) -> list:
    rtp = pkt.rtp
    st = pkt.stamps
    return [
        pkt.id,
        pkt.flow,
        pkt.ue,
        pkt.direction.value,
        pkt.kind.value,
        pkt.size_bytes,
        pkt.priority.level.value,
        pkt.priority.drop.mode,
        f"{pkt.priority.drop.probability:.6f}",
        pkt.transport.src_port,
        pkt.transport.dst_port,
        int(pkt.transport.is_syn),
        int(pkt.transport.is_large_data),
        "" if rtp is None else rtp.timestamp,
        "" if rtp is None else rtp.sequence,
        "" if rtp is None else rtp.frame_id,
        "" if rtp is None else int(rtp.last_of_frame),
        "" if rtp is None else f"{rtp.extension_data:06x}",
        fmt_ms(st.app_emit_ms),
        fmt_ms(st.sdap_ingress_ms),
        fmt_ms(st.phy_deliver_ms),
        fmt_ms(st.ack_ms),
        pkt.fate,
    ]


def write_trace(path, packets: Iterable[SimPacket]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for pkt in packets:
            writer.writerow(trace_row(pkt))


def read_trace(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
