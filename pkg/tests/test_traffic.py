import random
from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from subflowsim.dpi import get_plugin
from subflowsim.packets import Direction, SubflowKind
from subflowsim.traffic import (
    BackgroundSource,
    BackgroundSourceConfig,
    PiecewiseLinear,
    SourceFeedback,
    ZoomSource,
    ZoomSourceConfig,
)


def drive(src, until_ms, feedback=None):
    out = []
    for t in range(int(until_ms) + 1):
        out += src.zoom_step(float(t), feedback)
    return out


def test_piecewise_linear_clamps_and_interpolates():
    f = PiecewiseLinear([(0, 0.3), (0.5, 0.6), (1, 1)])
    assert f(-1) == pytest.approx(0.3)
    assert f(0.25) == pytest.approx(0.45)
    assert f(2) == pytest.approx(1.0)
    assert not PiecewiseLinear([(0, 1), (1, 0)]).is_monotone()
    with pytest.raises(ValueError):
        PiecewiseLinear([(0, 1), (0, 2)])


def test_rejects_decreasing_rate_curve():
    with pytest.raises(ValueError):
        ZoomSourceConfig(rate_curve=((0, 1.0), (1, 0.5)))


def test_packets_carry_bytes_the_classifier_understands():
    src = ZoomSource("z", 0, Direction.DOWNLINK, ZoomSourceConfig(probe_period_ms=None))
    pkts = drive(src, 3000)
    plugin = get_plugin("zoom")
    for p in pkts:
        assert plugin.classify(p) is p.kind
    kinds = Counter(p.kind for p in pkts)
    assert kinds[SubflowKind.AUDIO] == 151  # every 20 ms from t=0 through t=3000
    assert kinds[SubflowKind.PROBE] == 100  # 2 s episode at 50 pps
    assert kinds[SubflowKind.CONTROL] == 4


def test_full_rate_layers_hit_their_targets():
    cfg = ZoomSourceConfig(probe_period_ms=None)
    src = ZoomSource("z", 0, Direction.UPLINK, cfg)
    drive(src, 10_000)
    frames = [f for f in src.log.frames if f.camera_pts_ms < 10_000]
    base = sum(f.layer == "Base" for f in frames)
    enh = sum(f.layer == "HighFpsEnhancement" for f in frames)
    assert abs(base / 10 - cfg.base_fps_target) <= 0.2
    assert abs(enh / 10 - cfg.enh_fps_target) <= 0.3
    assert frames[0].layer == "Base"


def test_no_enhancement_before_first_base():
    src = ZoomSource("z", 0, Direction.UPLINK, ZoomSourceConfig(probe_period_ms=None))
    pkts = drive(src, 2000)
    video = [p for p in pkts if p.kind in (SubflowKind.BASE, SubflowKind.HIGH_FPS_ENHANCEMENT)]
    assert video[0].kind is SubflowKind.BASE


@settings(max_examples=25, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_send_rate_is_monotone_in_probe_delivery(a, b):
    lo, hi = sorted((a, b))

    def sent(ratio):
        src = ZoomSource("z", 0, Direction.UPLINK, ZoomSourceConfig(probe_period_ms=None))
        return sum(p.size_bytes for p in drive(src, 6000, SourceFeedback(ratio)))

    assert sent(lo) <= sent(hi)


def test_delay_backoff_lowers_the_multiplier():
    src = ZoomSource("z", 0, Direction.UPLINK)
    assert src.current_multiplier(SourceFeedback(1.0, 50.0)) == 1.0
    assert src.current_multiplier(SourceFeedback(1.0, 500.0)) == pytest.approx(0.3)


def test_camera_jitter_bound():
    with pytest.raises(ValueError):
        ZoomSourceConfig(camera_jitter_ms=17)


def test_same_seed_same_stream():
    def sig(seed):
        src = ZoomSource("z", 0, Direction.UPLINK, ZoomSourceConfig(pkt_size_jitter_bytes=50), rng=random.Random(seed))
        return [(p.kind, p.size_bytes, p.rtp and p.rtp.timestamp) for p in drive(src, 1500)]

    assert sig(3) == sig(3)
    assert sig(3) != sig(4)


def test_aimd_halves_once_per_rtt():
    bg = BackgroundSource("bg", 1, Direction.DOWNLINK, BackgroundSourceConfig(initial_window=40))
    assert len(bg.background_step(0.0)) == 40
    bg.background_step(1.0, loss_events=1)
    assert bg.window == 20
    bg.background_step(2.0, loss_events=1)  # same recovery period
    assert bg.window == 20
    bg.background_step(100.0, loss_events=1)
    assert bg.window == 10


def test_aimd_grows_one_packet_per_window():
    bg = BackgroundSource("bg", 1, Direction.UPLINK, BackgroundSourceConfig(initial_window=10))
    bg.background_step(0.0)
    bg.background_step(1.0, acked_bytes=10 * 1400)
    assert bg.window == 11
    assert bg.inflight == 11


def test_light_web_rate_cap():
    with pytest.raises(ValueError):
        BackgroundSourceConfig(model="LightWeb", burst_pkts=50)
    bg = BackgroundSource("web", 1, Direction.DOWNLINK, BackgroundSourceConfig(model="LightWeb"))
    pkts = []
    for t in range(0, 5000):
        pkts += bg.background_step(float(t))
    assert len(pkts) == 100
    assert sum(p.transport.is_syn for p in pkts) == 5
