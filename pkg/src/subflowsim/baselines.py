"""Comparison policies that plug into the same marking path as the controller."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

from .controller import BASE_AUDIO, FULL, FlowDecision
from .dpi import DpiPlugin, get_plugin
from .packets import ENHANCEMENT_KINDS, HIGH, LOW, PriorityClass, SimPacket, SubflowKind

MODES = ("DChannelStyle", "TcRanStyle", "Vanilla5G", "QoeAware")
BUCKET_DEPTH_MS = 100.0


@dataclass(frozen=True)
class BaselineMode:
    kind: str
    quota_kbps: Optional[float] = None

    def __post_init__(self):
        if self.kind not in MODES:
            raise ValueError(f"unknown baseline {self.kind!r}; expected one of {MODES}")
        if self.kind in ("TcRanStyle", "Vanilla5G"):
            if self.quota_kbps is None or self.quota_kbps <= 0:
                raise ValueError(f"{self.kind} needs a positive quota")

    @staticmethod
    def parse(text: str) -> "BaselineMode":
        """Accepts e.g. "DChannelStyle", "TcRanStyle:300", "Vanilla5G:100"."""
        name, _, quota = text.partition(":")
        return BaselineMode(name, float(quota) if quota else None)

    @property
    def label(self) -> str:
        return self.kind if self.quota_kbps is None else f"{self.kind}:{self.quota_kbps:g}"


class TokenBucket:
    """Bytes-denominated bucket refilled at rate_bps, starting full."""

    def __init__(self, rate_bps: float, depth_bytes: float):
        self.rate_bps = rate_bps
        self.depth = depth_bytes
        self.tokens = depth_bytes
        self.last_ms: Optional[float] = None

    def _refill(self, now_ms: float) -> None:
        if self.last_ms is not None and now_ms > self.last_ms:
            self.tokens = min(self.depth, self.tokens + self.rate_bps / 8.0 * (now_ms - self.last_ms) / 1000.0)
        if self.last_ms is None or now_ms > self.last_ms:
            self.last_ms = now_ms

    def take(self, nbytes: int, now_ms: float) -> bool:
        self._refill(now_ms)
        if self.tokens >= nbytes:
            self.tokens -= nbytes
            return True
        return False


def quota_bucket(quota_kbps: float) -> TokenBucket:
    rate = quota_kbps * 1000.0
    return TokenBucket(rate, rate / 8.0 * BUCKET_DEPTH_MS / 1000.0)


def baseline_decision(mode: BaselineMode, report) -> dict:
    """Nominal per-flow actions; quotas are enforced per packet by BaselineMarker."""
    action = FULL if mode.kind == "Vanilla5G" else BASE_AUDIO
    return {
        f.flow: FlowDecision(f.flow, f.ue, f.direction, action, 0.0, False, report.now_ms)
        for f in report.flows.values()
    }


class BaselineMarker:
    def __init__(self, mode: BaselineMode, plugin: Optional[DpiPlugin] = None):
        self.mode = mode
        self.plugin = plugin or get_plugin("zoom")
        self.buckets: dict = {}

    def update(self, decisions: Mapping) -> None:
        pass  # baselines carry no per-interval state

    def _bucket(self, flow: str) -> TokenBucket:
        b = self.buckets.get(flow)
        if b is None:
            b = self.buckets[flow] = quota_bucket(self.mode.quota_kbps)
        return b

    def mark(self, pkt: SimPacket, now_ms: float) -> PriorityClass:
        kind = self.plugin.classify(pkt)
        if kind is SubflowKind.BACKGROUND:
            return LOW
        mode = self.mode.kind
        if mode == "DChannelStyle":
            return LOW if kind in ENHANCEMENT_KINDS else HIGH
        if mode == "TcRanStyle":
            if kind not in (SubflowKind.BASE, SubflowKind.AUDIO):
                return LOW
            return HIGH if self._bucket(pkt.flow).take(pkt.size_bytes, now_ms) else LOW
        if mode == "Vanilla5G":
            return HIGH if self._bucket(pkt.flow).take(pkt.size_bytes, now_ms) else LOW
        raise ValueError("QoeAware mode is served by the controller, not a baseline marker")
