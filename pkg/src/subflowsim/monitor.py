"""Per-interval QoE, RAN and offered-load telemetry collected at the gNB."""

from __future__ import annotations

import csv
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .dpi import DpiPlugin, get_plugin
from .packets import (
    ENHANCEMENT_KINDS,
    Direction,
    Priority,
    PacketIds,
    RtpUnwrapper,
    SimPacket,
    Stamps,
    SubflowKind,
    rtp_ts_to_ms,
    HIGH,
)

MEDIA_WINDOW_MS = 1000.0
RAN_WINDOW_MS = 50.0
EWMA_ALPHA = 0.2
HUNGRY_MIN_AGE_MS = 2000.0
HUNGRY_MIN_PACKETS = 50
LARGE_PACKET_BYTES = 1000
UE_REPORT_PERIOD_MS = 10.0

LOAD_CATEGORIES = ("base", "enh", "audio", "probe", "other", "background")
ZOOM_CATEGORIES = ("base", "enh", "audio", "probe", "other")


def load_category(kind: SubflowKind) -> str:
    if kind is SubflowKind.BASE:
        return "base"
    if kind in ENHANCEMENT_KINDS:
        return "enh"
    if kind is SubflowKind.AUDIO:
        return "audio"
    if kind is SubflowKind.PROBE:
        return "probe"
    if kind is SubflowKind.BACKGROUND:
        return "background"
    return "other"


# -- small building blocks -------------------------------------------------------


class SlidingSum:
    """Sum of (time, value) samples over a trailing window (t - window, t]."""

    def __init__(self, window_ms: float = MEDIA_WINDOW_MS):
        self.window_ms = window_ms
        self._items: deque = deque()
        self._sum = 0.0

    def add(self, t: float, value: float) -> None:
        self._items.append((t, value))
        self._sum += value

    def _expire(self, now: float) -> None:
        cutoff = now - self.window_ms
        items = self._items
        while items and items[0][0] <= cutoff:
            self._sum -= items.popleft()[1]

    def total(self, now: float) -> float:
        self._expire(now)
        return self._sum

    def count(self, now: float) -> int:
        self._expire(now)
        return len(self._items)

    def mean(self, now: float) -> Optional[float]:
        self._expire(now)
        return self._sum / len(self._items) if self._items else None

    def rate_bps(self, now: float) -> float:
        return self.total(now) * 8.0 * 1000.0 / self.window_ms


def track_fps(completion_times_ms: Iterable[float], now_ms: float, window_ms: float = MEDIA_WINDOW_MS) -> float:
    """Complete frames per second whose completion falls in (now - window, now]."""
    n = sum(1 for t in completion_times_ms if now_ms - window_ms < t <= now_ms)
    return n * 1000.0 / window_ms


def dl_frame_delay(packets: Sequence[SimPacket], k1_slots: int, slot_ms: float) -> Optional[float]:
    if not packets or any(p.stamps.ack_ms is None or p.stamps.sdap_ingress_ms is None for p in packets):
        return None
    delivered = max(p.stamps.ack_ms - k1_slots * slot_ms for p in packets)
    return delivered - min(p.stamps.sdap_ingress_ms for p in packets)


def ul_delay_estimate(arrival_ms: float, rtp_ms: float, baseline: Optional[float]) -> tuple[float, float]:
    """Extra one-way delay over the smallest offset seen so far; returns (extra, new baseline)."""
    offset = arrival_ms - rtp_ms
    baseline = offset if baseline is None else min(baseline, offset)
    return offset - baseline, baseline


class UlDelayEstimator:
    """Keeps one minimum-offset baseline per RTP stream."""

    def __init__(self):
        self.baseline: dict = {}
        self._unwrap: dict = defaultdict(RtpUnwrapper)

    def estimate(self, stream, arrival_ms: float, timestamp: int, clock_hz: int) -> float:
        rtp_ms = rtp_ts_to_ms(self._unwrap[stream](timestamp), clock_hz)
        extra, self.baseline[stream] = ul_delay_estimate(arrival_ms, rtp_ms, self.baseline.get(stream))
        return extra


def infer_bsr_arrivals(reports: Sequence[float], drained: Sequence[float]) -> list[float]:
    """A_k = B_{k+1} - B_k + D_k for consecutive reports; negative values are kept."""
    if len(drained) != max(0, len(reports) - 1):
        raise ValueError("need one drained amount per pair of consecutive reports")
    return [b2 - b1 + d for b1, b2, d in zip(reports, reports[1:], drained)]


def ul_offered_load_from_bsr(
    report_times_ms: Sequence[float],
    reports: Sequence[float],
    drained: Sequence[float],
    now_ms: float,
    window_ms: float = MEDIA_WINDOW_MS,
) -> float:
    """Bits per second from the inferred arrivals whose closing report lies in the window."""
    arrivals = infer_bsr_arrivals(reports, drained)
    total = sum(a for t, a in zip(report_times_ms[1:], arrivals) if now_ms - window_ms < t <= now_ms)
    return total * 8.0 * 1000.0 / window_ms


class BsrLoadEstimator:
    """Running form of the BSR arrival inference for one UE and group."""

    def __init__(self, window_ms: float = MEDIA_WINDOW_MS):
        self.prev_report = 0  # an empty modem before the first report
        self.drained_since = 0
        self.window = SlidingSum(window_ms)
        self.cumulative = 0

    def on_drained(self, nbytes: int) -> None:
        self.drained_since += nbytes

    def on_report(self, t_ms: float, reported: int) -> int:
        arrival = reported - self.prev_report + self.drained_since
        self.prev_report = reported
        self.drained_since = 0
        self.window.add(t_ms, arrival)
        self.cumulative += arrival
        return arrival

    def load_bps(self, now_ms: float) -> float:
        return self.window.rate_bps(now_ms)


def smooth_loads(raw: Sequence[float], alpha: float = EWMA_ALPHA) -> list[float]:
    out = []
    s = None
    for x in raw:
        s = x if s is None else alpha * x + (1 - alpha) * s
        out.append(s)
    return out


class Ewma:
    def __init__(self, alpha: float = EWMA_ALPHA):
        self.alpha = alpha
        self.value: Optional[float] = None

    def update(self, x: float) -> float:
        self.value = x if self.value is None else self.alpha * x + (1 - self.alpha) * self.value
        return self.value


@dataclass
class Connection:
    start_ms: float
    large: deque = field(default_factory=deque)
    hungry: bool = False


class ConnectionTracker:
    """Flags long-lived, high-volume TCP connections; the flag never clears."""

    def __init__(self):
        self.connections: dict = {}

    @staticmethod
    def key(pkt: SimPacket):
        t = pkt.transport
        return (pkt.ue, pkt.direction, t.src_port, t.dst_port)

    def observe(self, pkt: SimPacket, now_ms: float) -> None:
        key = self.key(pkt)
        conn = self.connections.get(key)
        if pkt.transport.is_syn:
            if conn is None or not conn.hungry:
                conn = Connection(now_ms)
                self.connections[key] = conn
        if conn is None or conn.hungry:
            return
        if pkt.size_bytes >= LARGE_PACKET_BYTES:
            conn.large.append(now_ms)
            while conn.large and conn.large[0] <= now_ms - MEDIA_WINDOW_MS:
                conn.large.popleft()
        if now_ms - conn.start_ms >= HUNGRY_MIN_AGE_MS and len(conn.large) > HUNGRY_MIN_PACKETS:
            conn.hungry = True

    def close(self, pkt: SimPacket) -> None:
        self.connections.pop(self.key(pkt), None)

    def hungry(self, ue: int, direction: Direction) -> bool:
        return any(
            c.hungry for (u, d, _, _), c in self.connections.items() if u == ue and d is direction
        )


def detect_bw_hungry(observations: Iterable[tuple[float, SimPacket]]) -> dict:
    """Batch form: connection key -> flag after replaying (time, packet) observations."""
    tracker = ConnectionTracker()
    for t, pkt in observations:
        tracker.observe(pkt, t)
    return {k: c.hungry for k, c in tracker.connections.items()}


class FrameAssembler:
    """Reassembles frames per RTP stream from in-order deliveries.

    A frame boundary is a change of RTP timestamp; a frame is complete when
    its marker packet arrives with no sequence gap since the previous marker.
    """

    def __init__(self):
        self._state: dict = {}

    def feed(self, stream, pkt: SimPacket) -> Optional[list]:
        rtp = pkt.rtp
        st = self._state.get(stream)
        if st is None or st["ts"] != rtp.timestamp:
            gap_before = st is not None and (st["expect"] is not None) and rtp.sequence != st["expect"]
            # a gap right at a boundary is blamed on the earlier frame when it was unfinished
            starts_clean = not gap_before or (st is not None and not st["closed"])
            st = {"ts": rtp.timestamp, "packets": [], "broken": not starts_clean, "closed": False,
                  "expect": None}
            self._state[stream] = st
        elif st["expect"] is not None and rtp.sequence != st["expect"]:
            st["broken"] = True
        st["packets"].append(pkt)
        st["expect"] = (rtp.sequence + 1) & 0xFFFF
        if rtp.last_of_frame:
            st["closed"] = True
            if not st["broken"]:
                st["broken"] = True  # never report a frame twice
                return list(st["packets"])
        return None


# -- report types ----------------------------------------------------------------


@dataclass
class FlowState:
    flow: str
    ue: int
    direction: Direction
    first_seen_ms: float
    base_fps: float = 0.0
    enh_fps: float = 0.0
    base_delay_ms: float = 0.0
    enh_delay_ms: float = 0.0
    audio_delay_ms: float = 0.0


@dataclass
class UeReport:
    ue: int
    direction: Direction
    snr_db: float
    cqi: float
    mcs: float
    bits_per_prb: int
    loads: dict
    bw_hungry: bool

    @property
    def zoom_load(self) -> float:
        return sum(self.loads[c] for c in ZOOM_CATEGORIES)

    @property
    def nonzoom_load(self) -> float:
        return self.loads["background"]

    @property
    def total_load(self) -> float:
        return self.zoom_load + self.nonzoom_load


@dataclass
class MonitorReport:
    interval: int
    now_ms: float
    flows: dict
    ues: dict

    def flows_in(self, direction: Direction) -> list:
        return [f for f in self.flows.values() if f.direction is direction]


REPORT_COLUMNS = (
    "interval", "now_ms", "ue", "direction", "flow", "base_fps", "enh_fps", "base_delay_ms",
    "enh_delay_ms", "audio_delay_ms", "snr_db", "cqi", "mcs", "bits_per_prb",
    "load_base", "load_enh", "load_audio", "load_probe", "load_other", "load_background",
    "bw_hungry",
)


def report_rows(report: MonitorReport) -> list:
    rows = []
    for key in sorted(report.ues, key=lambda k: (k[0], k[1].value)):
        u = report.ues[key]
        flows = [f for f in report.flows.values() if f.ue == u.ue and f.direction is u.direction]
        for f in sorted(flows, key=lambda f: f.flow) or [None]:
            rows.append(
                [
                    report.interval, f"{report.now_ms:.3f}", u.ue, u.direction.value,
                    "" if f is None else f.flow,
                    *(
                        [f"{getattr(f, a):.3f}" if f else "0.000" for a in
                         ("base_fps", "enh_fps", "base_delay_ms", "enh_delay_ms", "audio_delay_ms")]
                    ),
                    f"{u.snr_db:.3f}", f"{u.cqi:.3f}", f"{u.mcs:.3f}", u.bits_per_prb,
                    *[f"{u.loads[c]:.1f}" for c in LOAD_CATEGORIES],
                    int(u.bw_hungry),
                ]
            )
    return rows


def write_reports(path, reports: Iterable[MonitorReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            w.writerows(report_rows(r))


# -- UE-side shim ------------------------------------------------------------------


class UeShim:
    """Measures uplink Zoom subflow loads at the UE kernel and packages reports."""

    def __init__(self, ue: int, ids: PacketIds, plugin: Optional[DpiPlugin] = None):
        self.ue = ue
        self.ids = ids
        self.plugin = plugin or get_plugin("zoom")
        self.loads: dict = defaultdict(SlidingSum)

    def observe(self, pkt: SimPacket, now_ms: float) -> None:
        kind = self.plugin.classify(pkt)
        if kind is SubflowKind.BACKGROUND:
            return
        self.loads[(pkt.flow, load_category(kind))].add(now_ms, pkt.size_bytes)

    def make_report(self, now_ms: float) -> SimPacket:
        meta: dict = {}
        for (flow, cat), s in sorted(self.loads.items()):
            meta.setdefault(flow, {})[cat] = s.rate_bps(now_ms)
        return SimPacket(
            id=self.ids(),
            ue=self.ue,
            direction=Direction.UPLINK,
            size_bytes=0,
            kind=SubflowKind.CONTROL,
            flow="ue-report",
            stamps=Stamps(app_emit_ms=now_ms),
            priority=HIGH,
            meta={"loads": meta, "sent_ms": now_ms},
        )


# -- the monitor ---------------------------------------------------------------------


class Monitor:
    def __init__(
        self,
        k1_slots: int = 4,
        slot_ms: float = 1.0,
        plugin: Optional[DpiPlugin] = None,
        media_window_ms: float = MEDIA_WINDOW_MS,
        ran_window_ms: float = RAN_WINDOW_MS,
    ):
        self.k1_slots = k1_slots
        self.slot_ms = slot_ms
        self.plugin = plugin or get_plugin("zoom")
        self.media_window_ms = media_window_ms
        self.ran_window_ms = ran_window_ms
        self.flows: dict = {}
        self._flow_kind_fps: dict = defaultdict(lambda: SlidingSum(media_window_ms))
        self._flow_kind_delay: dict = defaultdict(lambda: SlidingSum(media_window_ms))
        self._last_delay: dict = {}
        self._assembler = FrameAssembler()
        self.ul_delay = UlDelayEstimator()
        self._dl_loads: dict = defaultdict(lambda: SlidingSum(media_window_ms))
        self._ul_reported: dict = {}
        self._bsr: dict = defaultdict(lambda: BsrLoadEstimator(media_window_ms))
        self._ewma: dict = defaultdict(Ewma)
        self.connections = ConnectionTracker()
        self._ran: dict = defaultdict(deque)
        self._link: dict = {}
        self.interval = 0
        self.ul_samples: list = []  # (packet, estimated extra delay) for inspection

    # -- observation hooks -------------------------------------------------------
    def _register_flow(self, pkt: SimPacket, now_ms: float) -> None:
        if pkt.flow not in self.flows:
            self.flows[pkt.flow] = FlowState(pkt.flow, pkt.ue, pkt.direction, now_ms)

    def on_ingress(self, pkt: SimPacket, now_ms: float) -> None:
        """Downlink packet entering SDAP, before any marking drop."""
        kind = self.plugin.classify(pkt)
        if kind is not SubflowKind.BACKGROUND:
            self._register_flow(pkt, now_ms)
        self._dl_loads[(pkt.ue, load_category(kind))].add(now_ms, pkt.size_bytes)
        if kind is SubflowKind.BACKGROUND:
            self.connections.observe(pkt, now_ms)

    def on_delivered(self, pkt: SimPacket, now_ms: float) -> None:
        if pkt.meta and "loads" in pkt.meta:
            self._ul_reported[pkt.ue] = pkt.meta["loads"]
            for flow in pkt.meta["loads"]:
                if flow not in self.flows:
                    self.flows[flow] = FlowState(flow, pkt.ue, Direction.UPLINK, now_ms)
            return
        kind = self.plugin.classify(pkt)
        if kind is SubflowKind.BACKGROUND:
            if pkt.direction is Direction.UPLINK:
                self.connections.observe(pkt, now_ms)
            return
        if pkt.direction is Direction.UPLINK:
            self._register_flow(pkt, now_ms)
        if pkt.rtp is None or pkt.flow not in self.flows:
            return
        if kind not in (SubflowKind.AUDIO, SubflowKind.BASE) and kind not in ENHANCEMENT_KINDS:
            return
        layer = "enh" if kind in ENHANCEMENT_KINDS else load_category(kind)
        stream = (pkt.flow, kind)
        if pkt.direction is Direction.UPLINK:
            extra = self.ul_delay.estimate(stream, now_ms, pkt.rtp.timestamp, pkt.rtp.clock_hz)
            self.ul_samples.append((pkt, extra))
        frame = self._assembler.feed(stream, pkt)
        if frame is None:
            return
        if layer != "audio":
            self._flow_kind_fps[(pkt.flow, layer)].add(now_ms, 1)
        if pkt.direction is Direction.DOWNLINK:
            delay = dl_frame_delay(frame, self.k1_slots, self.slot_ms)
        else:
            delay = extra  # the marker packet closes the frame
        if delay is not None:
            self._flow_kind_delay[(pkt.flow, layer)].add(now_ms, delay)

    def on_bsr(self, ue: int, cls: Priority, t_ms: float, reported: int) -> None:
        self._bsr[(ue, cls)].on_report(t_ms, reported)

    def on_ul_drained(self, ue: int, cls: Priority, nbytes: int) -> None:
        self._bsr[(ue, cls)].on_drained(nbytes)

    def on_ran_sample(self, ue: int, now_ms: float, snr_db: float, cqi: int, mcs: int, bits: int) -> None:
        d = self._ran[ue]
        d.append((now_ms, snr_db, cqi, mcs))
        while d and d[0][0] <= now_ms - self.ran_window_ms:
            d.popleft()
        self._link[ue] = bits

    def observe_slot(self, cell, result) -> None:
        """Convenience hook: feed everything a slot produced."""
        now = result.now_ms
        for bsr in result.bsrs:
            for cls, b in bsr.queued_bytes.items():
                self.on_bsr(bsr.ue, cls, now, b)
        for (ue, cls), nbytes in result.ul_drained.items():
            self.on_ul_drained(ue, cls, nbytes)
        for pkt in result.delivered:
            self.on_delivered(pkt, now)
        for ue, st in cell.ues.items():
            self.on_ran_sample(ue, now, st.snr_db, st.link.cqi, st.link.mcs, st.link.bits_per_prb)

    # -- aggregation --------------------------------------------------------------
    def _mean_delay(self, flow: str, layer: str, now_ms: float) -> float:
        m = self._flow_kind_delay[(flow, layer)].mean(now_ms)
        if m is None:
            return self._last_delay.get((flow, layer), 0.0)
        m = max(0.0, m)
        self._last_delay[(flow, layer)] = m
        return m

    def ul_raw_loads(self, ue: int, now_ms: float) -> dict:
        loads = {c: 0.0 for c in LOAD_CATEGORIES}
        reported = self._ul_reported.get(ue, {})
        for flow_loads in reported.values():
            for cat, v in flow_loads.items():
                loads[cat] += v
        inferred = sum(self._bsr[(ue, cls)].load_bps(now_ms) for cls in Priority)
        zoom = sum(loads[c] for c in ZOOM_CATEGORIES)
        loads["background"] = max(0.0, inferred - zoom)
        return loads

    def dl_raw_loads(self, ue: int, now_ms: float) -> dict:
        return {c: self._dl_loads[(ue, c)].rate_bps(now_ms) for c in LOAD_CATEGORIES}

    def snapshot(self, now_ms: float, ues: Optional[Iterable[int]] = None) -> MonitorReport:
        flows = {}
        for name, f in self.flows.items():
            fs = FlowState(
                f.flow, f.ue, f.direction, f.first_seen_ms,
                base_fps=self._flow_kind_fps[(name, "base")].count(now_ms) * 1000.0 / self.media_window_ms,
                enh_fps=self._flow_kind_fps[(name, "enh")].count(now_ms) * 1000.0 / self.media_window_ms,
                base_delay_ms=self._mean_delay(name, "base", now_ms),
                enh_delay_ms=self._mean_delay(name, "enh", now_ms),
                audio_delay_ms=self._mean_delay(name, "audio", now_ms),
            )
            flows[name] = fs
        ue_ids = sorted(set(ues) if ues is not None else set(self._ran))
        ue_reports = {}
        for ue in ue_ids:
            samples = self._ran.get(ue) or deque([(now_ms, 0.0, 0, 0)])
            n = len(samples)
            snr = sum(s[1] for s in samples) / n
            cqi = sum(s[2] for s in samples) / n
            mcs = sum(s[3] for s in samples) / n
            for direction in Direction:
                raw = self.dl_raw_loads(ue, now_ms) if direction is Direction.DOWNLINK else self.ul_raw_loads(ue, now_ms)
                loads = {
                    c: max(0.0, self._ewma[(ue, direction, c)].update(raw[c])) for c in LOAD_CATEGORIES
                }
                ue_reports[(ue, direction)] = UeReport(
                    ue, direction, snr, cqi, mcs, self._link.get(ue, 0), loads,
                    self.connections.hungry(ue, direction),
                )
        report = MonitorReport(self.interval, now_ms, flows, ue_reports)
        self.interval += 1
        return report
