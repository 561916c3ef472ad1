"""Synthetic Zoom-like senders and adaptive background flows."""

from __future__ import annotations

import csv
import random
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dpi import (
    EXTENSION_FOR_KIND,
    TYPE_AUDIO,
    TYPE_CONTROL,
    TYPE_PROBE,
    TYPE_VIDEO,
    ZOOM_PORT,
    encode_zoom_head,
)
from .packets import (
    AUDIO_CLOCK_HZ,
    VIDEO_CLOCK_HZ,
    Direction,
    PacketIds,
    RtpHeader,
    SimPacket,
    Stamps,
    SubflowKind,
    Transport,
)


class PiecewiseLinear:
    """Clamped piecewise-linear map through (x, y) knots."""

    def __init__(self, points: Sequence[Sequence[float]]):
        pts = sorted((float(x), float(y)) for x, y in points)
        if len(pts) < 1:
            raise ValueError("need at least one knot")
        xs = [p[0] for p in pts]
        if any(b <= a for a, b in zip(xs, xs[1:])):
            raise ValueError("knot x values must be distinct")
        self.points = tuple(pts)
        self._xs = np.array(xs)
        self._ys = np.array([p[1] for p in pts])

    def __call__(self, x: float) -> float:
        return float(np.interp(x, self._xs, self._ys))

    def is_monotone(self) -> bool:
        return bool(np.all(np.diff(self._ys) >= 0))


DEFAULT_RATE_CURVE = ((0.0, 0.3), (0.5, 0.6), (1.0, 1.0))
DEFAULT_BACKOFF = ((0.0, 1.0), (100.0, 1.0), (500.0, 0.3))


@dataclass
class ZoomSourceConfig:
    audio_interval_ms: float = 20.0
    audio_pkt_bytes: int = 200
    frame_interval_ms: float = 33.0
    base_fps_target: float = 8.0
    enh_fps_target: float = 16.0
    base_pkts_per_frame: int = 4
    base_pkt_bytes: int = 1200
    enh_pkts_per_frame: int = 3
    enh_pkt_bytes: int = 1200
    # random extra bytes per video packet, drawn uniformly from [0, n]
    pkt_size_jitter_bytes: int = 0
    probe_duration_ms: float = 2000.0
    # a new probing episode starts this often; None probes only at start
    probe_period_ms: Optional[float] = 10000.0
    probe_rate_pps: float = 50.0
    probe_pkt_bytes: int = 1200
    control_interval_ms: float = 1000.0
    control_pkt_bytes: int = 120
    rate_curve: tuple = DEFAULT_RATE_CURVE
    congestion_backoff: tuple = DEFAULT_BACKOFF
    audio_clock_hz: int = AUDIO_CLOCK_HZ
    video_clock_hz: int = VIDEO_CLOCK_HZ
    enh_kind: SubflowKind = SubflowKind.HIGH_FPS_ENHANCEMENT
    # camera timing for frame-mapping studies: integer ms offsets
    camera_jitter_ms: int = 0
    capture_offset_ms: int = 0

    def __post_init__(self):
        if isinstance(self.enh_kind, str):
            self.enh_kind = SubflowKind(self.enh_kind)
        if not PiecewiseLinear(self.rate_curve).is_monotone():
            raise ValueError("rate_curve must be non-decreasing in delivery ratio")
        if 2 * self.camera_jitter_ms >= self.frame_interval_ms:
            raise ValueError("camera jitter must stay below half a frame interval")

    @property
    def base_bps(self) -> float:
        return self.base_fps_target * self.base_pkts_per_frame * self.base_pkt_bytes * 8

    @property
    def enh_bps(self) -> float:
        return self.enh_fps_target * self.enh_pkts_per_frame * self.enh_pkt_bytes * 8

    @property
    def audio_bps(self) -> float:
        return self.audio_pkt_bytes * 8 * 1000.0 / self.audio_interval_ms


@dataclass
class SourceFeedback:
    probe_delivery_ratio: float = 1.0
    recent_delay_ms: float = 0.0


@dataclass
class FrameRecord:
    frame_id: int
    camera_pts_ms: float
    emitted: bool
    rtp_timestamp: Optional[int]
    layer: str


@dataclass
class GroundTruthLog:
    flow: str
    frames: list = field(default_factory=list)
    # second index -> subflow kind -> bytes handed to the network
    rate_bytes: dict = field(default_factory=lambda: defaultdict(lambda: defaultdict(int)))

    def record_bytes(self, now_ms: float, kind: SubflowKind, size: int) -> None:
        self.rate_bytes[int(now_ms // 1000)][kind.value] += size

    def rate_series(self) -> list[tuple[int, str, float]]:
        rows = []
        for sec in sorted(self.rate_bytes):
            for kind in sorted(self.rate_bytes[sec]):
                rows.append((sec, kind, self.rate_bytes[sec][kind] * 8.0))
        return rows

    def write_csv(self, frames_path, rates_path) -> None:
        with open(frames_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["flow", "frame_id", "camera_pts_ms", "emitted", "rtp_timestamp", "layer"])
            for fr in self.frames:
                w.writerow(
                    [
                        self.flow,
                        fr.frame_id,
                        f"{fr.camera_pts_ms:.3f}",
                        int(fr.emitted),
                        "" if fr.rtp_timestamp is None else fr.rtp_timestamp,
                        fr.layer,
                    ]
                )
        with open(rates_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["flow", "second", "kind", "bits"])
            for sec, kind, bits in self.rate_series():
                w.writerow([self.flow, sec, kind, f"{bits:.1f}"])


def _clip01(x: float) -> float:
    return min(1.0, max(0.0, x))


class ZoomSource:
    """One direction of a Zoom-like call: audio, layered video, probes, control."""

    def __init__(
        self,
        flow: str,
        ue: int,
        direction: Direction,
        config: Optional[ZoomSourceConfig] = None,
        ids: Optional[PacketIds] = None,
        rng: Optional[random.Random] = None,
        start_ms: float = 0.0,
    ):
        self.flow = flow
        self.ue = ue
        self.direction = direction
        self.cfg = config or ZoomSourceConfig()
        self.ids = ids or PacketIds()
        self.rng = rng or random.Random(0)
        self.start_ms = float(start_ms)
        self.rate_curve = PiecewiseLinear(self.cfg.rate_curve)
        self.backoff = PiecewiseLinear(self.cfg.congestion_backoff)
        self.log = GroundTruthLog(flow)

        self._video_rtp_base = self.rng.getrandbits(32)
        self._audio_rtp_base = self.rng.getrandbits(32)
        self._ssrc = {
            k: self.rng.getrandbits(32)
            for k in (SubflowKind.AUDIO, SubflowKind.BASE, self.cfg.enh_kind)
        }
        self._seq = {k: self.rng.getrandbits(16) for k in self._ssrc}
        self._next_audio = self.start_ms
        self._audio_count = 0
        self._tick = 0
        self._next_tick_pts = self._camera_pts(0)
        self._base_acc = 1.0  # the first camera frame is always sampled
        self._enh_acc = 0.0
        self._base_emitted = False
        self._next_control = self.start_ms
        self._probe_start = self.start_ms
        self._next_probe = self.start_ms
        self._probing = True
        self.probe_multiplier = 1.0
        self.multiplier = 1.0

    # -- helpers ---------------------------------------------------------
    def _camera_pts(self, k: int) -> float:
        jitter = 0
        if self.cfg.camera_jitter_ms and k > 0:
            jitter = self.rng.randint(-self.cfg.camera_jitter_ms, self.cfg.camera_jitter_ms)
        return self.start_ms + k * self.cfg.frame_interval_ms + jitter

    def _ports(self) -> tuple[int, int]:
        local = 50000 + self.ue
        if self.direction is Direction.DOWNLINK:
            return ZOOM_PORT, local
        return local, ZOOM_PORT

    def _packet(self, now_ms, size, kind, pkt_type, rtp=None, ssrc=0) -> SimPacket:
        src, dst = self._ports()
        pkt = SimPacket(
            id=self.ids(),
            ue=self.ue,
            direction=self.direction,
            size_bytes=size,
            kind=kind,
            flow=self.flow,
            rtp=rtp,
            transport=Transport(src, dst, False, size >= 1000),
            stamps=Stamps(app_emit_ms=now_ms),
            payload_head=encode_zoom_head(pkt_type, rtp, ssrc),
        )
        self.log.record_bytes(now_ms, kind, size)
        return pkt

    def _next_seq(self, kind: SubflowKind) -> int:
        seq = self._seq[kind]
        self._seq[kind] = (seq + 1) & 0xFFFF
        return seq

    def video_rtp_timestamp(self, sample_ms: float) -> int:
        ticks = round((sample_ms - self.start_ms) * self.cfg.video_clock_hz / 1000.0)
        return (self._video_rtp_base + ticks) % (1 << 32)

    # -- rate control ----------------------------------------------------
    def current_multiplier(self, feedback: SourceFeedback) -> float:
        return self.probe_multiplier * self.backoff(feedback.recent_delay_ms)

    def _layer_fractions(self, m: float) -> tuple[float, float]:
        budget = m * (self.cfg.base_bps + self.cfg.enh_bps)
        base_frac = _clip01(budget / self.cfg.base_bps) if self.cfg.base_bps else 1.0
        enh_frac = (
            _clip01((budget - self.cfg.base_bps) / self.cfg.enh_bps) if self.cfg.enh_bps else 0.0
        )
        return base_frac, enh_frac

    # -- main entry --------------------------------------------------------
    def zoom_step(self, now_ms: float, feedback: Optional[SourceFeedback] = None) -> list[SimPacket]:
        if now_ms < self.start_ms:
            return []
        feedback = feedback or SourceFeedback()
        out: list[SimPacket] = []
        self._step_probes(now_ms, feedback, out)
        self.multiplier = self.current_multiplier(feedback)
        self._step_audio(now_ms, out)
        self._step_video(now_ms, out)
        self._step_control(now_ms, out)
        return out

    def _step_audio(self, now_ms, out):
        cfg = self.cfg
        while self._next_audio <= now_ms:
            t = self._next_audio
            ts = self._audio_rtp_base + round((t - self.start_ms) * cfg.audio_clock_hz / 1000.0)
            rtp = RtpHeader(
                ts,
                self._next_seq(SubflowKind.AUDIO),
                self._audio_count,
                True,
                0,
                cfg.audio_clock_hz,
            )
            out.append(
                self._packet(
                    t, cfg.audio_pkt_bytes, SubflowKind.AUDIO, TYPE_AUDIO, rtp,
                    self._ssrc[SubflowKind.AUDIO],
                )
            )
            self._audio_count += 1
            self._next_audio += cfg.audio_interval_ms

    def _step_probes(self, now_ms, feedback, out):
        cfg = self.cfg
        while True:
            end = self._probe_start + cfg.probe_duration_ms
            if self._probing:
                gap = 1000.0 / cfg.probe_rate_pps if cfg.probe_rate_pps > 0 else float("inf")
                while self._next_probe <= now_ms and self._next_probe < end:
                    t = self._next_probe
                    out.append(
                        self._packet(t, cfg.probe_pkt_bytes, SubflowKind.PROBE, TYPE_PROBE)
                    )
                    self._next_probe += gap
                if now_ms < end:
                    return
                # episode over: adopt the rate implied by how many probes got through
                self._probing = False
                self.probe_multiplier = self.rate_curve(_clip01(feedback.probe_delivery_ratio))
            if cfg.probe_period_ms is None:
                return
            nxt = self._probe_start + cfg.probe_period_ms
            if now_ms < nxt:
                return
            self._probe_start = nxt
            self._next_probe = nxt
            self._probing = True

    @property
    def probing(self) -> bool:
        return self._probing

    @property
    def probe_episode_start_ms(self) -> float:
        return self._probe_start

    def _step_video(self, now_ms, out):
        cfg = self.cfg
        while self._next_tick_pts + cfg.capture_offset_ms <= now_ms:
            k = self._tick
            pts = self._next_tick_pts
            sample_ms = pts + cfg.capture_offset_ms
            base_frac, enh_frac = self._layer_fractions(self.multiplier)
            step = cfg.frame_interval_ms / 1000.0
            if k > 0:
                self._base_acc = min(self._base_acc + cfg.base_fps_target * base_frac * step, 2.0)
                self._enh_acc = min(self._enh_acc + cfg.enh_fps_target * enh_frac * step, 2.0)
            layer = None
            if self._base_acc >= 1.0 - 1e-9:
                self._base_acc -= 1.0
                layer = SubflowKind.BASE
                self._base_emitted = True
            elif self._enh_acc >= 1.0 - 1e-9 and self._base_emitted:
                self._enh_acc -= 1.0
                layer = cfg.enh_kind
            ts = None
            if layer is not None:
                ts = self.video_rtp_timestamp(sample_ms)
                if layer is SubflowKind.BASE:
                    n, size = cfg.base_pkts_per_frame, cfg.base_pkt_bytes
                else:
                    n, size = cfg.enh_pkts_per_frame, cfg.enh_pkt_bytes
                ssrc = self._ssrc[layer]
                for i in range(n):
                    extra = (
                        self.rng.randint(0, cfg.pkt_size_jitter_bytes)
                        if cfg.pkt_size_jitter_bytes
                        else 0
                    )
                    rtp = RtpHeader(
                        ts,
                        self._next_seq(layer),
                        k,
                        i == n - 1,
                        EXTENSION_FOR_KIND[layer],
                        cfg.video_clock_hz,
                    )
                    out.append(self._packet(sample_ms, size + extra, layer, TYPE_VIDEO, rtp, ssrc))
            self.log.frames.append(
                FrameRecord(k, pts, layer is not None, ts, "" if layer is None else layer.value)
            )
            self._tick += 1
            self._next_tick_pts = self._camera_pts(self._tick)

    def _step_control(self, now_ms, out):
        cfg = self.cfg
        while self._next_control <= now_ms:
            out.append(
                self._packet(
                    self._next_control, cfg.control_pkt_bytes, SubflowKind.CONTROL, TYPE_CONTROL
                )
            )
            self._next_control += cfg.control_interval_ms


# -- background traffic ------------------------------------------------------


@dataclass
class BackgroundSourceConfig:
    model: str = "BulkAimd"
    start_ms: float = 0.0
    initial_window: float = 10.0
    additive_increase: float = 1.0
    decrease_factor: float = 0.5
    max_window: float = 2000.0
    pkt_bytes: int = 1400
    core_delay_ms: float = 20.0
    # LightWeb bursts
    burst_pkts: int = 20
    burst_period_ms: float = 1000.0

    def __post_init__(self):
        if self.model not in ("BulkAimd", "LightWeb"):
            raise ValueError(f"unknown background model {self.model!r}")
        if self.model == "LightWeb" and self.burst_pkts * 1000.0 / self.burst_period_ms > 40:
            raise ValueError("LightWeb must stay at or below 40 packets per second")


class BackgroundSource:
    """AIMD bulk transfer or light web bursts for one UE and direction."""

    def __init__(
        self,
        flow: str,
        ue: int,
        direction: Direction,
        config: Optional[BackgroundSourceConfig] = None,
        ids: Optional[PacketIds] = None,
        port: int = 443,
    ):
        self.flow = flow
        self.ue = ue
        self.direction = direction
        self.cfg = config or BackgroundSourceConfig()
        self.ids = ids or PacketIds()
        self.port = port
        self.window = float(self.cfg.initial_window)
        self.inflight = 0
        self._acked_accum = 0.0
        self._recovery_until = -1.0
        self._srtt: Optional[float] = None
        self._syn_pending = True
        self._next_burst = self.cfg.start_ms
        self.log = GroundTruthLog(flow)
        self.sent_bytes = 0

    @property
    def rtt_estimate_ms(self) -> float:
        return self._srtt if self._srtt is not None else 2 * self.cfg.core_delay_ms

    def _packet(self, now_ms: float, syn: bool) -> SimPacket:
        local = 40000 + self.ue
        src, dst = (self.port, local) if self.direction is Direction.DOWNLINK else (local, self.port)
        size = self.cfg.pkt_bytes
        self.log.record_bytes(now_ms, SubflowKind.BACKGROUND, size)
        self.sent_bytes += size
        return SimPacket(
            id=self.ids(),
            ue=self.ue,
            direction=self.direction,
            size_bytes=size,
            kind=SubflowKind.BACKGROUND,
            flow=self.flow,
            transport=Transport(src, dst, syn, size >= 1000),
            stamps=Stamps(app_emit_ms=now_ms),
        )

    def on_ack(self, acked_packets: int) -> None:
        self.inflight = max(0, self.inflight - acked_packets)
        self._acked_accum += acked_packets
        # one additive step per window's worth of acknowledged packets
        while self._acked_accum >= self.window:
            self._acked_accum -= self.window
            self.window = min(self.cfg.max_window, self.window + self.cfg.additive_increase)

    def on_loss(self, now_ms: float, lost_packets: int) -> None:
        self.inflight = max(0, self.inflight - lost_packets)
        if now_ms >= self._recovery_until:
            self.window = max(1.0, self.window * self.cfg.decrease_factor)
            self._acked_accum = 0.0
            self._recovery_until = now_ms + self.rtt_estimate_ms

    def background_step(
        self,
        now_ms: float,
        acked_bytes: int = 0,
        loss_events: int = 0,
        rtt_sample_ms: Optional[float] = None,
    ) -> list[SimPacket]:
        if now_ms < self.cfg.start_ms:
            return []
        if rtt_sample_ms is not None:
            self._srtt = (
                rtt_sample_ms if self._srtt is None else 0.875 * self._srtt + 0.125 * rtt_sample_ms
            )
        if self.cfg.model == "LightWeb":
            return self._light_web(now_ms)
        if loss_events:
            self.on_loss(now_ms, loss_events)
        if acked_bytes:
            self.on_ack(acked_bytes // self.cfg.pkt_bytes)
        out = []
        while self.inflight < int(self.window):
            out.append(self._packet(now_ms, self._syn_pending))
            self._syn_pending = False
            self.inflight += 1
        return out

    def _light_web(self, now_ms: float) -> list[SimPacket]:
        out = []
        while self._next_burst <= now_ms:
            # every burst is a fresh short connection
            for i in range(self.cfg.burst_pkts):
                out.append(self._packet(now_ms, i == 0))
            self._next_burst += self.cfg.burst_period_ms
        return out
