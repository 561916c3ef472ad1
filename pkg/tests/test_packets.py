import pytest
from hypothesis import given, strategies as st

from subflowsim.packets import (
    DropDirective,
    RtpHeader,
    RtpUnwrapper,
    SimPacket,
    Stamps,
    SubflowKind,
    Direction,
    TRACE_COLUMNS,
    read_trace,
    rtp_ts_to_ms,
    write_trace,
)


def test_rtp_clock_conversion():
    assert rtp_ts_to_ms(90000, 90000) == 1000.0
    assert rtp_ts_to_ms(480, 48000) == 10.0
    with pytest.raises(ValueError):
        rtp_ts_to_ms(10, 0)


def test_header_fields_wrap():
    h = RtpHeader(timestamp=(1 << 32) + 5, sequence=70000, frame_id=1, last_of_frame=True)
    assert h.timestamp == 5
    assert h.sequence == 70000 - 65536
    with pytest.raises(ValueError):
        RtpHeader(0, 0, 0, False, extension_data=1 << 24)


def test_drop_directive_checks():
    assert DropDirective.with_probability(0.3).mode == "probabilistic"
    with pytest.raises(ValueError):
        DropDirective("sometimes")
    with pytest.raises(ValueError):
        DropDirective("probabilistic", 1.5)


@given(st.integers(0, (1 << 32) - 1), st.lists(st.integers(-(1 << 30), 1 << 30), max_size=50))
def test_unwrapper_tracks_signed_steps(start, steps):
    unwrap = RtpUnwrapper()
    expected = start
    assert unwrap(start) == start
    raw = start
    for s in steps:
        raw = (raw + s) % (1 << 32)
        expected += s
        assert unwrap(raw) == expected


def test_stamps_monotone_skips_missing():
    assert Stamps(1.0, None, 3.0, None).is_monotone()
    assert not Stamps(5.0, 4.0).is_monotone()


def test_trace_round_trip(tmp_path):
    pkt = SimPacket(
        7, 2, Direction.UPLINK, 1200, SubflowKind.BASE, flow="zoom",
        rtp=RtpHeader(123, 4, 9, True, 0x500000),
        stamps=Stamps(1.0, 2.0, 3.5),
    )
    pkt.fate = "delivered"
    path = tmp_path / "trace.csv"
    write_trace(path, [pkt])
    rows = read_trace(path)
    assert list(rows[0]) == list(TRACE_COLUMNS)
    row = rows[0]
    assert row["direction"] == "Uplink"
    assert row["extension_data"] == "500000"
    assert row["phy_deliver_ms"] == "3.500"
    assert row["ack_ms"] == ""
