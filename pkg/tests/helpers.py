"""Shared builders for tests that need simulator-shaped data."""

from __future__ import annotations

import random
from dataclasses import dataclass

from subflowsim.flow2frame import AlignmentInput, relative_rtp_ms
from subflowsim.packets import Direction
from subflowsim.traffic import SourceFeedback, ZoomSource, ZoomSourceConfig


@dataclass
class SyntheticTrace:
    inp: AlignmentInput
    truth: dict  # frame index -> rtp point index or None
    true_delta: int
    delivered: dict
    skipped: set


def synthetic_frame_trace(seed: int, seconds: float = 8.0) -> SyntheticTrace:
    """Zoom-like uplink video with rate-driven skips, random camera jitter,
    random capture offset and random network / receiver losses."""
    rng = random.Random(seed)
    jitter = rng.randint(0, 3)
    # offset + 2 * jitter < 33 keeps each sampling instant ahead of the next camera frame
    offset = rng.randint(20, 26)
    cfg = ZoomSourceConfig(capture_offset_ms=offset, camera_jitter_ms=jitter, probe_period_ms=None)
    src = ZoomSource("v", 0, Direction.UPLINK, cfg, rng=random.Random(seed + 1))
    feedback = SourceFeedback(1.0, 0.0)
    end = int(seconds * 1000)
    for t in range(end):
        if t % 500 == 0:
            feedback = SourceFeedback(1.0, rng.choice([0.0, 150.0, 300.0, 450.0, 600.0]))
        src.zoom_step(float(t), feedback)
    frames = src.log.frames
    cam = [f.camera_pts_ms for f in frames]
    emitted = [i for i, f in enumerate(frames) if f.emitted]
    points = relative_rtp_ms([frames[i].rtp_timestamp for i in emitted])
    truth = {i: None for i in range(len(frames))}
    for p, i in enumerate(emitted):
        truth[i] = p
    loss = rng.uniform(0.0, 0.1)
    delivered = {i: rng.random() >= loss for i in emitted}
    rendered = {i for i in emitted if delivered[i] and rng.random() >= 0.02}
    skipped = {i for i in range(len(frames)) if not frames[i].emitted}
    return SyntheticTrace(AlignmentInput(cam, points, rendered), truth, offset, delivered, skipped)
