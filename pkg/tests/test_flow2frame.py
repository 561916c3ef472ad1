import pytest
from hypothesis import given, strategies as st

from helpers import synthetic_frame_trace
from subflowsim.flow2frame import (
    DROPPED_AT_RECEIVER,
    LOST_IN_NETWORK,
    SKIPPED_AT_SENDER,
    AlignmentInput,
    AlignmentResult,
    align,
    classify_missing,
    evaluate_delta,
    link,
    mapping_agreement,
    relative_rtp_ms,
    verify,
)


def test_verify_arithmetic():
    assert verify({1, 2, 3, 4}, {1, 2, 3}) == (0.75, 1)
    assert verify({5}, set()) == (0.0, 1)
    assert verify(set(), {1}) == (1.0, 0)


def test_link_picks_frame_at_or_before():
    cams = [0.0, 33.0, 66.0]
    assert link([-1.0, 0.0, 32.9, 33.0, 500.0], cams) == [None, 0, 0, 1, 2]


@given(st.lists(st.floats(0, 1000), min_size=1, max_size=30), st.lists(st.floats(-50, 1100), max_size=30))
def test_link_preserves_order(cams, points):
    cams = sorted(set(cams))
    linked = link(sorted(points), cams)
    seen = [x for x in linked if x is not None]
    assert seen == sorted(seen)


def test_every_frame_sampled_gives_full_accuracy():
    cams = [33.0 * i for i in range(10)]
    inp = AlignmentInput(cams, [33.0 * i for i in range(10)], set(range(10)))
    res = align(inp)
    assert res.accuracy == 1.0 and not res.tx_skipped
    assert res.best_delta_ms == 32  # ties go to the latest offset


def test_small_hand_case():
    # frames 0..5 at 33 ms; frames 2 and 4 never encoded; sampling lags presentation by 20 ms
    cams = [0.0, 33.0, 66.0, 99.0, 132.0, 165.0]
    points = [0.0, 33.0, 99.0, 165.0]
    rendered = {0, 1, 3, 5}
    res = align(AlignmentInput(cams, points, rendered))
    assert res.accuracy == 1.0
    assert res.tx_skipped == {2, 4}
    assert res.mapping == {0: 0, 1: 1, 2: None, 3: 2, 4: None, 5: 3}
    acc, fp, _, skipped = evaluate_delta(40, AlignmentInput(cams, points, rendered))
    assert fp > 0 and acc < 1.0


def test_input_validation():
    with pytest.raises(ValueError):
        align(AlignmentInput([0.0, 33.0], [], set()))
    with pytest.raises(ValueError):
        align(AlignmentInput([0.0], [0.0], set()))
    with pytest.raises(ValueError):
        align(AlignmentInput([0.0, 33.0], [5.0, 1.0], set()))


def test_missing_frame_causes():
    res = AlignmentResult(0, 1.0, {}, {7})
    delivered = {3: False, 4: True}
    assert classify_missing(7, res, delivered) == SKIPPED_AT_SENDER
    assert classify_missing(3, res, delivered) == LOST_IN_NETWORK
    assert classify_missing(4, res, delivered) == DROPPED_AT_RECEIVER


def test_relative_points_survive_wraparound():
    ts = [(1 << 32) - 3000, 0, 3000]
    assert relative_rtp_ms(ts) == [0.0, 1000 / 30, 2000 / 30]


@pytest.mark.parametrize("seed", range(10))
def test_synthetic_traces_recover_ground_truth(seed):
    tr = synthetic_frame_trace(seed)
    res = align(tr.inp)
    assert res.false_positives_by_delta[res.best_delta_ms] == 0
    assert mapping_agreement(res, tr.truth) >= 0.99
    assert res.tx_skipped == tr.skipped
    for f in res.tx_skipped:
        assert classify_missing(f, res, tr.delivered) == SKIPPED_AT_SENDER
