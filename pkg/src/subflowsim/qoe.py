"""Composite 0-100 video-call QoE score computed from receiver-side traces."""

from __future__ import annotations

import csv
import statistics
from bisect import bisect_left
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional, Sequence

from .packets import RtpUnwrapper, SimPacket, rtp_ts_to_ms

AUDIO_DELAY_THRESHOLD_MS = 150.0
VIDEO_DELAY_THRESHOLD_MS = 400.0
DELAY_EXPONENT = 0.5
JITTER_WEIGHT = 1.0
FPS_THRESHOLD = 28.0
FPS_CV_PENALTY = 0.5
FREEZE_HISTORY = 30
FREEZE_MIN_GAP_MS = 150.0
RESOLUTION_WEIGHTS = {640: 1.0, 480: 0.6, 320: 0.3}
COMPONENT_MAX = 25.0


def score_delay(stream: str, mean_delay_ms: float, mean_jitter_ms: float) -> float:
    if stream not in ("audio", "video"):
        raise ValueError(f"stream must be audio or video, got {stream!r}")
    threshold = AUDIO_DELAY_THRESHOLD_MS if stream == "audio" else VIDEO_DELAY_THRESHOLD_MS
    d_eff = mean_delay_ms + JITTER_WEIGHT * mean_jitter_ms
    if d_eff <= 0:
        return COMPONENT_MAX
    return COMPONENT_MAX * min(1.0, (threshold / d_eff) ** DELAY_EXPONENT)


def score_fps_stats(mean_fps: float, std_fps: float) -> float:
    if mean_fps <= 0:
        return 0.0
    return COMPONENT_MAX * min(1.0, mean_fps / FPS_THRESHOLD) * max(0.0, 1 - FPS_CV_PENALTY * std_fps / mean_fps)


def score_fps(series: Sequence[float]) -> float:
    if not series:
        raise ValueError("fps series is empty")
    return score_fps_stats(statistics.fmean(series), statistics.pstdev(series))


def fps_series(render_times_ms: Sequence[float], total_ms: float, window_ms: float = 1000.0, step_ms: float = 300.0) -> list[float]:
    times = sorted(render_times_ms)
    out = []
    start = 0.0
    while start + window_ms <= total_ms + 1e-9:
        n = bisect_left(times, start + window_ms) - bisect_left(times, start)
        out.append(n * 1000.0 / window_ms)
        start += step_ms
    return out or [len(times) * 1000.0 / max(total_ms, 1.0)]


def frame_durations(render_times_ms: Sequence[float], total_ms: float) -> list[float]:
    t = list(render_times_ms)
    return [b - a for a, b in zip(t, t[1:])] + ([total_ms - t[-1]] if t else [])


def detect_freezes(render_times_ms: Sequence[float], total_ms: float) -> set[int]:
    """Indices of frames whose on-screen duration marks a freeze."""
    durations = frame_durations(render_times_ms, total_ms)
    frozen = set()
    for i, d in enumerate(durations):
        history = durations[max(0, i - FREEZE_HISTORY) : i]
        if not history:
            continue
        mean = sum(history) / len(history)
        if d >= max(3 * mean, mean + FREEZE_MIN_GAP_MS):
            frozen.add(i)
    return frozen


def score_resolution(
    timeline: Sequence[tuple[float, int]], freezes: Iterable[int], total_ms: float
) -> float:
    if total_ms <= 0 or not timeline:
        return 0.0
    frozen = set(freezes)
    durations = frame_durations([t for t, _ in timeline], total_ms)
    credit = sum(
        RESOLUTION_WEIGHTS[res] * d
        for i, ((_, res), d) in enumerate(zip(timeline, durations))
        if i not in frozen
    )
    return COMPONENT_MAX * min(1.0, credit / total_ms)


def rfc3550_jitter(arrival_ms: Sequence[float], rtp_ms: Sequence[float]) -> list[float]:
    """Interarrival jitter estimate after each packet (J += (|D| - J)/16)."""
    j = 0.0
    out = []
    prev = None
    for a, s in zip(arrival_ms, rtp_ms):
        transit = a - s
        if prev is not None:
            j += (abs(transit - prev) - j) / 16.0
        prev = transit
        out.append(j)
    return out


@dataclass
class StreamStats:
    mean_delay_ms: float = 0.0
    mean_jitter_ms: float = 0.0
    samples: int = 0


@dataclass
class QoeInputs:
    audio: StreamStats
    video: StreamStats
    fps: list
    timeline: list  # (render time ms, resolution)
    total_ms: float


@dataclass
class QoeScore:
    audio: float
    video: float
    fps: float
    resolution: float

    @property
    def total(self) -> float:
        return self.audio + self.video + self.fps + self.resolution


def composite(inputs: QoeInputs) -> QoeScore:
    s_audio = (
        score_delay("audio", inputs.audio.mean_delay_ms, inputs.audio.mean_jitter_ms)
        if inputs.audio.samples
        else 0.0
    )
    s_video = (
        score_delay("video", inputs.video.mean_delay_ms, inputs.video.mean_jitter_ms)
        if inputs.video.samples
        else 0.0
    )
    s_fps = score_fps(inputs.fps) if inputs.fps else 0.0
    times = [t for t, _ in inputs.timeline]
    s_res = score_resolution(inputs.timeline, detect_freezes(times, inputs.total_ms), inputs.total_ms)
    return QoeScore(s_audio, s_video, s_fps, s_res)


# -- receiver model --------------------------------------------------------------


class MediaRecord(NamedTuple):
    kind: str
    frame_id: int
    rtp_timestamp: int
    clock_hz: int
    app_emit_ms: float
    deliver_ms: Optional[float]


def records_from_packets(packets: Iterable[SimPacket]) -> list[MediaRecord]:
    out = []
    for p in packets:
        if p.rtp is None:
            continue
        out.append(
            MediaRecord(
                p.kind.value,
                p.rtp.frame_id,
                p.rtp.timestamp,
                p.rtp.clock_hz,
                p.stamps.app_emit_ms,
                p.stamps.phy_deliver_ms if p.fate == "delivered" else None,
            )
        )
    return out


def records_from_trace_rows(rows: Iterable[dict], flow: str) -> list[MediaRecord]:
    out = []
    for r in rows:
        if r["flow"] != flow or r["rtp_timestamp"] == "":
            continue
        clock = 48000 if r["kind"] == "Audio" else 90000
        out.append(
            MediaRecord(
                r["kind"],
                int(r["frame_id"]),
                int(r["rtp_timestamp"]),
                clock,
                float(r["app_emit_ms"]),
                float(r["phy_deliver_ms"]) if r["fate"] == "delivered" else None,
            )
        )
    return out


@dataclass
class RenderedFrame:
    frame_id: int
    render_ms: float
    layer: str
    resolution: int
    delay_ms: float
    rtp_ms: float


ENH_NAMES = ("HighFpsEnhancement", "LowFpsEnhancement")


def complete_frames(records: Sequence[MediaRecord]) -> dict:
    """frame_id -> (layer, completion ms or None, capture ms, first rtp timestamp)."""
    frames: dict = defaultdict(list)
    for r in records:
        if r.kind == "Base" or r.kind in ENH_NAMES:
            frames[r.frame_id].append(r)
    out = {}
    for fid, recs in frames.items():
        done = None if any(r.deliver_ms is None for r in recs) else max(r.deliver_ms for r in recs)
        out[fid] = (recs[0].kind, done, min(r.app_emit_ms for r in recs), recs[0].rtp_timestamp)
    return out


def render_video(records: Sequence[MediaRecord], playout_offset_ms: float = 0.0) -> list[RenderedFrame]:
    """Frames show as soon as they are complete; stale frames and orphaned
    enhancement frames are discarded."""
    frames = complete_frames(records)
    base_ref = {}
    last_base = None
    for fid in sorted(frames):
        if frames[fid][0] == "Base":
            last_base = fid
        base_ref[fid] = last_base
    order = sorted(
        (done, fid) for fid, (_, done, _, _) in frames.items() if done is not None
    )
    unwrap = RtpUnwrapper()
    rtp_ms = {}
    for fid in sorted(frames):
        rtp_ms[fid] = rtp_ts_to_ms(unwrap(frames[fid][3]), 90000)
    rendered_ids = set()
    out = []
    last_id = -1
    enh_times: list = []
    for done, fid in order:
        layer, _, capture, _ = frames[fid]
        if fid <= last_id:
            continue
        if layer != "Base" and base_ref[fid] not in rendered_ids:
            continue
        t = done + playout_offset_ms
        if layer != "Base":
            enh_times.append(t)
        recent = len(enh_times) - bisect_left(enh_times, t - 1000.0 + 1e-9)
        res = 640 if recent >= 12 else 480 if recent >= 4 else 320
        out.append(RenderedFrame(fid, t, layer, res, t - capture, rtp_ms[fid]))
        rendered_ids.add(fid)
        last_id = fid
    return out


def audio_stats(records: Sequence[MediaRecord], playout_offset_ms: float = 0.0) -> StreamStats:
    audio = sorted((r for r in records if r.kind == "Audio" and r.deliver_ms is not None), key=lambda r: r.frame_id)
    if not audio:
        return StreamStats()
    arrivals = [r.deliver_ms + playout_offset_ms for r in audio]
    unwrap = RtpUnwrapper()
    rtp = [rtp_ts_to_ms(unwrap(r.rtp_timestamp), r.clock_hz) for r in audio]
    delays = [a - r.app_emit_ms for a, r in zip(arrivals, audio)]
    jit = rfc3550_jitter(arrivals, rtp)
    return StreamStats(statistics.fmean(delays), statistics.fmean(jit), len(audio))


def qoe_inputs(records: Sequence[MediaRecord], total_ms: float, playout_offset_ms: float = 0.0) -> QoeInputs:
    frames = render_video(records, playout_offset_ms)
    if frames:
        jit = rfc3550_jitter([f.render_ms for f in frames], [f.rtp_ms for f in frames])
        video = StreamStats(statistics.fmean(f.delay_ms for f in frames), statistics.fmean(jit), len(frames))
    else:
        video = StreamStats()
    times = [f.render_ms for f in frames]
    return QoeInputs(
        audio_stats(records, playout_offset_ms),
        video,
        fps_series(times, total_ms) if frames else [],
        [(f.render_ms, f.resolution) for f in frames],
        total_ms,
    )


BREAKDOWN_COLUMNS = (
    "flow", "ue", "direction", "S_audio", "S_video", "S_fps", "S_res", "total",
    "audio_delay_ms", "audio_jitter_ms", "video_delay_ms", "video_jitter_ms", "mean_fps",
    "frames_rendered",
)


def breakdown_row(flow: str, ue: int, direction: str, inputs: QoeInputs, score: QoeScore) -> list:
    mean_fps = statistics.fmean(inputs.fps) if inputs.fps else 0.0
    return [
        flow, ue, direction,
        f"{score.audio:.4f}", f"{score.video:.4f}", f"{score.fps:.4f}", f"{score.resolution:.4f}",
        f"{score.total:.4f}",
        f"{inputs.audio.mean_delay_ms:.3f}", f"{inputs.audio.mean_jitter_ms:.3f}",
        f"{inputs.video.mean_delay_ms:.3f}", f"{inputs.video.mean_jitter_ms:.3f}",
        f"{mean_fps:.3f}", len(inputs.timeline),
    ]


def write_breakdown(path, rows: Iterable[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BREAKDOWN_COLUMNS)
        w.writerows(rows)
