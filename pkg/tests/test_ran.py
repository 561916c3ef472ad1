import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from subflowsim.packets import (
    ALWAYS_DROP,
    HIGH,
    LOW,
    Direction,
    DropDirective,
    Priority,
    PriorityClass,
    SimPacket,
    SubflowKind,
)
from subflowsim.ran import (
    DEFAULT_MCS_TABLE,
    Cell,
    CellConfig,
    ConfigError,
    allocate,
    prbs_for_bytes,
    snr_to_link,
)

DL, UL = Direction.DOWNLINK, Direction.UPLINK


def pkt(i, ue=0, direction=DL, size=1000):
    return SimPacket(i, ue, direction, size, SubflowKind.BACKGROUND)


def test_snr_lookup_edges():
    assert snr_to_link(-30).cqi == 1
    assert snr_to_link(30).cqi == 15
    row = DEFAULT_MCS_TABLE[6]
    assert snr_to_link(row.min_snr_db).cqi == row.cqi
    assert snr_to_link(row.min_snr_db - 1e-6).cqi == row.cqi - 1
    with pytest.raises(ValueError):
        snr_to_link(math.nan)


def test_bad_tables_are_config_errors():
    with pytest.raises(ConfigError):
        CellConfig(mcs_table=())
    with pytest.raises(ConfigError):
        CellConfig(mcs_table=((0, 1, 1, 100), (-1, 2, 2, 200)))
    with pytest.raises(ConfigError):
        CellConfig(scheduler_policy="MaxCI")


def test_prbs_round_up():
    assert prbs_for_bytes(0, 100) == 0
    assert prbs_for_bytes(13, 104) == 1
    assert prbs_for_bytes(14, 104) == 2


@given(
    st.dictionaries(st.integers(0, 9), st.one_of(st.integers(0, 200), st.just(math.inf)), min_size=1),
    st.integers(0, 300),
    st.sampled_from(["RoundRobin", "ProportionalFair"]),
)
def test_allocation_is_bounded_and_work_conserving(demands, cap, policy):
    metric = {k: (k * 7) % 5 + 1 for k in demands}
    alloc = allocate(demands, cap, policy, metric=metric)
    assert sum(alloc.values()) <= cap
    assert all(0 <= alloc[k] <= demands[k] for k in demands)
    assert sum(alloc.values()) == min(cap, sum(demands.values()))


def test_round_robin_water_fills():
    alloc = allocate({"a": 5, "b": 100, "c": 100}, 79)
    assert alloc == {"a": 5, "b": 37, "c": 37}


def test_high_class_drains_first():
    cell = Cell(CellConfig(prbs_per_slot=10))
    cell.add_ue(0, 25.0)
    for i in range(20):
        cell.enqueue_downlink(pkt(i), LOW)
    h = pkt(99)
    cell.enqueue_downlink(h, HIGH)
    res = cell.schedule_slot()
    assert res.delivered[0] is h
    assert h.stamps.ack_ms == h.stamps.phy_deliver_ms + 4


def test_marking_drops():
    cell = Cell(CellConfig(queue_limit_bytes=None), rng=random.Random(1))
    cell.add_ue(0, 10.0)
    p = pkt(1)
    assert not cell.enqueue_downlink(p, PriorityClass(Priority.LOW, ALWAYS_DROP))
    assert p.fate == "dropped_marking"
    kept = sum(
        cell.enqueue_downlink(pkt(i), PriorityClass(Priority.LOW, DropDirective.with_probability(0.3)))
        for i in range(2000)
    )
    assert 1300 < kept < 1500


def test_direction_checked():
    cell = Cell()
    cell.add_ue(0, 10.0)
    with pytest.raises(ValueError):
        cell.enqueue_uplink(pkt(1, direction=DL), LOW)


def test_bsr_cap_and_uplink_waits_for_a_report():
    cell = Cell(CellConfig(bsr_cap_bytes=5000, bsr_period_slots=5))
    cell.add_ue(0, 25.0)
    cell.schedule_slot()  # slot 0: empty report
    for i in range(10):
        cell.enqueue_uplink(pkt(i, direction=UL), LOW)
    delivered = []
    for _ in range(4):
        delivered += cell.schedule_slot().delivered
    assert delivered == []  # no grant until the next report
    res = cell.schedule_slot()  # slot 5 carries the report
    assert res.bsrs[0].queued_bytes[Priority.LOW] == 5000
    assert sum(p.size_bytes for p in res.delivered) == 5000


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2), st.sampled_from([DL, UL]), st.integers(0, 1500), st.booleans()), max_size=120),
       st.floats(0, 0.5), st.sampled_from(["RoundRobin", "ProportionalFair"]))
def test_packets_are_conserved(arrivals, loss, policy):
    cell = Cell(CellConfig(prbs_per_slot=20, uniform_loss=loss, scheduler_policy=policy, queue_limit_bytes=20_000), random.Random(0))
    for ue in range(3):
        cell.add_ue(ue, 5.0 + 8 * ue)
    for i, (ue, d, size, high) in enumerate(arrivals):
        p = pkt(i, ue, d, size)
        (cell.enqueue_downlink if d is DL else cell.enqueue_uplink)(p, HIGH if high else LOW)
        if i % 7 == 0:
            cell.schedule_slot()
            assert cell.conservation_holds()
    for _ in range(30):
        res = cell.schedule_slot()
        assert all(v <= 20 for v in res.prbs_used.values())
    assert cell.conservation_holds()


def test_prb_log_csv(tmp_path):
    cell = Cell()
    cell.enable_prb_log()
    cell.add_ue(0, 10.0)
    cell.enqueue_downlink(pkt(1), HIGH)
    cell.schedule_slot()
    cell.write_prb_log(tmp_path / "prb.csv")
    lines = (tmp_path / "prb.csv").read_text().splitlines()
    assert lines[0] == "slot,direction,ue,class,prbs"
    assert lines[1].startswith("0,Downlink,0,High,")
