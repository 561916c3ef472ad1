"""Offline packet-to-frame alignment.

RTP timestamps tell us the spacing between sampled frames but not where the
first one sits relative to the camera clock. We slide the RTP points over the
camera presentation times one millisecond at a time and keep the offset that
produces the fewest contradictions with what the receiver actually rendered.
"""

from __future__ import annotations

import csv
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

from .packets import RtpUnwrapper, rtp_ts_to_ms

SKIPPED_AT_SENDER = "SkippedAtSender"
LOST_IN_NETWORK = "LostInNetwork"
DROPPED_AT_RECEIVER = "DroppedAtReceiver"
RENDERED = "Rendered"


@dataclass
class AlignmentInput:
    cam_pts: Sequence[float]
    rtp_points: Sequence[float]
    rx_rendered: set

    def validate(self) -> None:
        if len(self.cam_pts) < 2:
            raise ValueError("need at least two camera timestamps")
        if any(b <= a for a, b in zip(self.cam_pts, self.cam_pts[1:])):
            raise ValueError("camera timestamps must be strictly increasing")
        if not self.rtp_points:
            raise ValueError("no RTP points to align")
        if any(b < a for a, b in zip(self.rtp_points, self.rtp_points[1:])):
            raise ValueError("RTP points must be sorted")


@dataclass
class AlignmentResult:
    best_delta_ms: int
    accuracy: float
    mapping: dict  # frame index -> rtp point index, or None when skipped at the sender
    tx_skipped: set
    false_positives_by_delta: dict = field(default_factory=dict)


def link(abs_points: Sequence[float], cam_pts: Sequence[float]) -> list[Optional[int]]:
    """Index of the nearest camera timestamp at or before each point."""
    out = []
    for p in abs_points:
        i = bisect_right(cam_pts, p) - 1
        out.append(i if i >= 0 else None)
    return out


def verify(tx_skipped: set, rx_skipped: set) -> tuple[float, int]:
    """(accuracy, false positives); accuracy is 1.0 when nothing was skipped."""
    fp = sum(1 for f in tx_skipped if f not in rx_skipped)
    if not tx_skipped:
        return 1.0, fp
    return (len(tx_skipped) - fp) / len(tx_skipped), fp


def mapping_for(delta: float, cam_pts: Sequence[float], rtp_points: Sequence[float]) -> dict:
    linked = link([delta + cam_pts[0] + p for p in rtp_points], cam_pts)
    mapping: dict = {f: None for f in range(len(cam_pts))}
    for point, frame in enumerate(linked):
        if frame is not None and mapping[frame] is None:
            mapping[frame] = point
    return mapping


def evaluate_delta(delta: float, inp: AlignmentInput) -> tuple[float, int, dict, set]:
    mapping = mapping_for(delta, inp.cam_pts, inp.rtp_points)
    tx_skipped = {f for f, p in mapping.items() if p is None}
    rx_skipped = set(range(len(inp.cam_pts))) - set(inp.rx_rendered)
    acc, fp = verify(tx_skipped, rx_skipped)
    return acc, fp, mapping, tx_skipped


def align(inp: AlignmentInput) -> AlignmentResult:
    inp.validate()
    best = None
    fps_by_delta = {}
    span = int(inp.cam_pts[1] - inp.cam_pts[0])
    for delta in range(max(span, 1)):
        acc, fp, mapping, skipped = evaluate_delta(delta, inp)
        fps_by_delta[delta] = fp
        if best is None or acc >= best[1]:
            best = (delta, acc, mapping, skipped)
    delta, acc, mapping, skipped = best
    return AlignmentResult(delta, acc, mapping, skipped, fps_by_delta)


def classify_missing(frame: int, alignment: AlignmentResult, delivered: Mapping[int, bool]) -> str:
    """Why a frame never showed up at the receiver.

    `delivered` maps frame index to whether every packet of it arrived.
    """
    if frame in alignment.tx_skipped:
        return SKIPPED_AT_SENDER
    if not delivered.get(frame, False):
        return LOST_IN_NETWORK
    return DROPPED_AT_RECEIVER


# -- trace adapters ------------------------------------------------------------


def relative_rtp_ms(timestamps: Iterable[int], clock_hz: int = 90000) -> list[float]:
    unwrap = RtpUnwrapper()
    ext = sorted(unwrap(ts) for ts in timestamps)
    if not ext:
        return []
    return [rtp_ts_to_ms(t - ext[0], clock_hz) for t in ext]


@dataclass
class FrameTrace:
    """Everything Flow2Frame needs for one video flow, plus optional ground truth."""

    alignment_input: AlignmentInput
    delivered: dict  # frame index -> all packets arrived (receiver-side view)
    true_mapping: Optional[dict] = None


def frame_trace_from_logs(frame_rows: Sequence[dict], packet_rows: Sequence[dict], flow: str, rendered: set) -> FrameTrace:
    """Build inputs from a GroundTruthLog frames CSV and a packet trace CSV."""
    frames = sorted(
        (r for r in frame_rows if r["flow"] == flow), key=lambda r: int(r["frame_id"])
    )
    cam_pts = [float(r["camera_pts_ms"]) for r in frames]
    index_of = {int(r["frame_id"]): i for i, r in enumerate(frames)}
    by_ts: dict = {}
    delivered: dict = {}
    for r in packet_rows:
        if r["flow"] != flow or r["kind"] in ("Audio", "Probe", "Control", "Background"):
            continue
        if r["rtp_timestamp"] == "":
            continue
        by_ts.setdefault(int(r["rtp_timestamp"]), set()).add(int(r["frame_id"]))
        f = index_of.get(int(r["frame_id"]))
        if f is not None:
            delivered[f] = delivered.get(f, True) and r["fate"] == "delivered"
    points = relative_rtp_ms(by_ts)
    truth = {i: None for i in range(len(frames))}
    emitted = [index_of[int(r["frame_id"])] for r in frames if r["emitted"] == "1"]
    for point, f in enumerate(emitted):
        truth[f] = point
    rendered_idx = {index_of[f] for f in rendered if f in index_of}
    return FrameTrace(AlignmentInput(cam_pts, points, rendered_idx), delivered, truth)


def mapping_agreement(result: AlignmentResult, truth: Mapping[int, Optional[int]]) -> float:
    if not truth:
        return 1.0
    same = sum(1 for f, p in truth.items() if result.mapping.get(f) == p)
    return same / len(truth)


MAPPING_COLUMNS = ("frame", "camera_pts_ms", "delta_ms", "rtp_point", "cause")


def write_mapping(path, trace: FrameTrace, result: AlignmentResult) -> None:
    cam = trace.alignment_input.cam_pts
    rendered = trace.alignment_input.rx_rendered
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MAPPING_COLUMNS)
        for f in range(len(cam)):
            point = result.mapping.get(f)
            cause = RENDERED if f in rendered else classify_missing(f, result, trace.delivered)
            w.writerow([f, f"{cam[f]:.3f}", result.best_delta_ms, "" if point is None else point, cause])
