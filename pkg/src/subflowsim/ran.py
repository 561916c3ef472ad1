"""Slot-driven single-cell model with two priority classes per UE and direction."""

from __future__ import annotations

import csv
import math
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

from .packets import Direction, Priority, PriorityClass, SimPacket

INF = math.inf


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class McsRow:
    min_snr_db: float
    cqi: int
    mcs: int
    bits_per_prb: int


# CQI efficiencies (bits per resource element) times 12 subcarriers x 14 symbols.
_CQI_EFFICIENCY = (
    0.1523, 0.2344, 0.3770, 0.6016, 0.8770, 1.1758, 1.4766, 1.9141,
    2.4063, 2.7305, 3.3223, 3.9023, 4.5234, 5.1152, 5.5547,
)
_CQI_SNR_DB = (-6.7, -4.7, -2.3, 0.2, 2.4, 4.3, 5.9, 8.1, 10.3, 11.7, 14.1, 16.3, 18.7, 21.0, 22.7)
_CQI_MCS = (0, 1, 3, 5, 7, 9, 11, 13, 15, 17, 19, 21, 23, 25, 27)

DEFAULT_MCS_TABLE = tuple(
    McsRow(snr, cqi, mcs, round(eff * 12 * 14))
    for cqi, (snr, mcs, eff) in enumerate(zip(_CQI_SNR_DB, _CQI_MCS, _CQI_EFFICIENCY), start=1)
)

POLICIES = ("RoundRobin", "ProportionalFair")


@dataclass
class CellConfig:
    prbs_per_slot: int = 79
    slot_ms: float = 1.0
    k1_slots: int = 4
    mcs_table: tuple = DEFAULT_MCS_TABLE
    scheduler_policy: str = "RoundRobin"
    bsr_period_slots: int = 5
    bsr_cap_bytes: Optional[int] = 150_000
    # drop-tail limit per UE, direction and priority class; None is unbounded
    queue_limit_bytes: Optional[int] = 300_000
    uniform_loss: float = 0.0
    pf_ewma_weight: float = 0.99

    def __post_init__(self):
        self.mcs_table = tuple(
            r if isinstance(r, McsRow) else McsRow(*r) for r in self.mcs_table
        )
        self.validate()

    def validate(self) -> None:
        if not self.mcs_table:
            raise ConfigError("mcs_table is empty")
        snrs = [r.min_snr_db for r in self.mcs_table]
        bits = [r.bits_per_prb for r in self.mcs_table]
        if any(b <= a for a, b in zip(snrs, snrs[1:])):
            raise ConfigError("mcs_table min_snr_db must be strictly increasing")
        if any(b <= a for a, b in zip(bits, bits[1:])):
            raise ConfigError("mcs_table bits_per_prb must be strictly increasing")
        if bits[0] < 8:
            raise ConfigError("bits_per_prb must be at least 8")
        if self.prbs_per_slot <= 0 or self.slot_ms <= 0:
            raise ConfigError("prbs_per_slot and slot_ms must be positive")
        if self.scheduler_policy not in POLICIES:
            raise ConfigError(f"scheduler_policy must be one of {POLICIES}")
        if self.bsr_period_slots <= 0:
            raise ConfigError("bsr_period_slots must be positive")
        if not 0.0 <= self.uniform_loss <= 1.0:
            raise ConfigError("uniform_loss must be within [0, 1]")

    def total_prb(self, interval_ms: float) -> int:
        return int(round(self.prbs_per_slot * interval_ms / self.slot_ms))


@dataclass(frozen=True)
class LinkState:
    cqi: int
    mcs: int
    bits_per_prb: int


def snr_to_link(snr_db: float, table: Sequence[McsRow] = DEFAULT_MCS_TABLE) -> LinkState:
    if not table:
        raise ConfigError("mcs_table is empty")
    if not math.isfinite(snr_db):
        raise ValueError(f"snr must be finite, got {snr_db}")
    chosen = table[0]
    for row in table:
        if row.min_snr_db <= snr_db:
            chosen = row
        else:
            break
    return LinkState(chosen.cqi, chosen.mcs, chosen.bits_per_prb)


def prbs_for_bytes(nbytes: float, bits_per_prb: int) -> int:
    if nbytes <= 0:
        return 0
    return math.ceil(nbytes * 8 / bits_per_prb)


def allocate_round_robin(demands: Mapping, capacity: int, order: Sequence) -> dict:
    """Equal split with water-filling; leftover single PRBs go to the front of order."""
    alloc = {k: 0 for k in order}
    remaining = capacity
    active = [k for k in order if demands[k] > 0]
    while remaining > 0 and active:
        share, extra = divmod(remaining, len(active))
        nxt = []
        for i, k in enumerate(active):
            give = min(demands[k] - alloc[k], share + (1 if i < extra else 0))
            alloc[k] += give
            remaining -= give
            if alloc[k] < demands[k]:
                nxt.append(k)
        if len(nxt) == len(active) and share == 0 and extra == 0:
            break
        active = nxt
    return alloc


def allocate_proportional_fair(
    demands: Mapping, capacity: int, order: Sequence, metric: Mapping
) -> dict:
    """Greedy PF: highest metric first, each up to its demand."""
    alloc = {k: 0 for k in order}
    remaining = capacity
    ranked = sorted(
        (k for k in order if demands[k] > 0), key=lambda k: (-metric[k], order.index(k))
    )
    for k in ranked:
        if remaining <= 0:
            break
        give = min(demands[k], remaining)
        alloc[k] = give
        remaining -= give
    return alloc


def allocate(
    demands: Mapping,
    capacity: int,
    policy: str = "RoundRobin",
    order: Optional[Sequence] = None,
    metric: Optional[Mapping] = None,
) -> dict:
    """Split capacity PRBs among demands (PRBs, may be inf) under the given policy."""
    order = list(order) if order is not None else sorted(demands)
    if policy == "ProportionalFair" and metric is not None:
        return allocate_proportional_fair(demands, capacity, order, metric)
    return allocate_round_robin(demands, capacity, order)


@dataclass
class Bsr:
    ue: int
    slot: int
    queued_bytes: dict


class _Queue:
    __slots__ = ("items", "bytes")

    def __init__(self):
        self.items: deque = deque()
        self.bytes = 0

    def __len__(self):
        return len(self.items)


@dataclass
class UeRadioState:
    ue: int
    snr_db: float
    link: LinkState
    dl_queues: dict = field(default_factory=lambda: {Priority.HIGH: _Queue(), Priority.LOW: _Queue()})
    ul_modem_queues: dict = field(
        default_factory=lambda: {Priority.HIGH: _Queue(), Priority.LOW: _Queue()}
    )
    last_bsr: dict = field(default_factory=lambda: {Priority.HIGH: 0, Priority.LOW: 0})
    ul_estimate: dict = field(default_factory=lambda: {Priority.HIGH: 0, Priority.LOW: 0})
    pf_avg: dict = field(default_factory=lambda: {Direction.DOWNLINK: 1.0, Direction.UPLINK: 1.0})

    def queues(self, direction: Direction) -> dict:
        return self.dl_queues if direction is Direction.DOWNLINK else self.ul_modem_queues


@dataclass
class Grant:
    direction: Direction
    ue: int
    cls: Priority
    prbs: int


@dataclass
class SlotResult:
    slot: int
    now_ms: float
    grants: list = field(default_factory=list)
    delivered: list = field(default_factory=list)
    lost: list = field(default_factory=list)
    bsrs: list = field(default_factory=list)
    # (ue, class) -> bytes drained from the uplink modem queue this slot
    ul_drained: dict = field(default_factory=dict)
    prbs_used: dict = field(default_factory=dict)
    low_backlog: dict = field(default_factory=dict)

    def packets_delivered(self, direction: Direction, ue: int) -> list:
        return [p for p in self.delivered if p.direction is direction and p.ue == ue]


@dataclass
class Counters:
    arrived: int = 0
    delivered: int = 0
    dropped_marking: int = 0
    dropped_overflow: int = 0
    lost: int = 0
    arrived_bytes: int = 0
    delivered_bytes: int = 0


PRB_LOG_COLUMNS = ("slot", "direction", "ue", "class", "prbs")


class Cell:
    def __init__(self, config: Optional[CellConfig] = None, rng: Optional[random.Random] = None):
        self.cfg = config or CellConfig()
        self.rng = rng or random.Random(0)
        self.ues: dict[int, UeRadioState] = {}
        self.slot = 0
        self.counters = {d: Counters() for d in Direction}
        self.prb_log: Optional[list] = None
        self._rr_offset = {d: 0 for d in Direction}

    # -- setup -----------------------------------------------------------------
    def add_ue(self, ue: int, snr_db: float) -> UeRadioState:
        st = UeRadioState(ue, snr_db, snr_to_link(snr_db, self.cfg.mcs_table))
        self.ues[ue] = st
        return st

    def set_snr(self, ue: int, snr_db: float) -> None:
        st = self.ues[ue]
        st.snr_db = snr_db
        st.link = snr_to_link(snr_db, self.cfg.mcs_table)

    def enable_prb_log(self) -> None:
        self.prb_log = []

    @property
    def now_ms(self) -> float:
        return self.slot * self.cfg.slot_ms

    # -- ingress ---------------------------------------------------------------
    def _enqueue(self, pkt: SimPacket, marking: PriorityClass, now_ms: float) -> bool:
        c = self.counters[pkt.direction]
        c.arrived += 1
        c.arrived_bytes += pkt.size_bytes
        pkt.stamps.sdap_ingress_ms = now_ms
        pkt.priority = marking
        drop = marking.drop
        if drop.mode == "drop" or (
            drop.mode == "probabilistic" and drop.probability > 0 and self.rng.random() < drop.probability
        ):
            pkt.fate = "dropped_marking"
            c.dropped_marking += 1
            return False
        q = self.ues[pkt.ue].queues(pkt.direction)[marking.level]
        limit = self.cfg.queue_limit_bytes
        if limit is not None and pkt.size_bytes and q.bytes + pkt.size_bytes > limit:
            pkt.fate = "dropped_overflow"
            c.dropped_overflow += 1
            return False
        pkt.fate = "queued"
        q.items.append([pkt, pkt.size_bytes])
        q.bytes += pkt.size_bytes
        return True

    def enqueue_downlink(self, pkt: SimPacket, marking: PriorityClass, now_ms: Optional[float] = None) -> bool:
        if pkt.direction is not Direction.DOWNLINK:
            raise ValueError("enqueue_downlink needs a downlink packet")
        return self._enqueue(pkt, marking, self.now_ms if now_ms is None else now_ms)

    def enqueue_uplink(self, pkt: SimPacket, marking: PriorityClass, now_ms: Optional[float] = None) -> bool:
        """Hand a packet from the UE kernel to its modem queue (zero ingress delay)."""
        if pkt.direction is not Direction.UPLINK:
            raise ValueError("enqueue_uplink needs an uplink packet")
        return self._enqueue(pkt, marking, self.now_ms if now_ms is None else now_ms)

    # -- reporting ---------------------------------------------------------------
    def backlog_bytes(self, ue: int, direction: Direction, cls: Priority) -> int:
        return self.ues[ue].queues(direction)[cls].bytes

    def queued_packets(self, direction: Direction) -> int:
        return sum(len(q) for st in self.ues.values() for q in st.queues(direction).values())

    def emit_bsr(self, ue: int, now_ms: Optional[float] = None) -> Bsr:
        st = self.ues[ue]
        cap = self.cfg.bsr_cap_bytes
        report = {}
        for cls, q in st.ul_modem_queues.items():
            report[cls] = q.bytes if cap is None else min(q.bytes, cap)
        st.last_bsr = dict(report)
        st.ul_estimate = dict(report)
        return Bsr(ue, self.slot, report)

    # -- scheduling ----------------------------------------------------------------
    def _serve(self, q: _Queue, budget: int, now_ms: float, direction, result, drained_key):
        """Drain up to budget bytes from q; returns bytes used."""
        used = 0
        ack = now_ms + self.cfg.k1_slots * self.cfg.slot_ms
        while q.items:
            entry = q.items[0]
            pkt, left = entry
            take = min(left, budget - used)
            if left > 0 and take <= 0:
                break
            entry[1] -= take
            used += take
            q.bytes -= take
            if entry[1] > 0:
                break
            q.items.popleft()
            pkt.stamps.phy_deliver_ms = now_ms
            c = self.counters[direction]
            if self.cfg.uniform_loss > 0 and self.rng.random() < self.cfg.uniform_loss:
                pkt.fate = "lost"
                c.lost += 1
                result.lost.append(pkt)
                continue
            if direction is Direction.DOWNLINK:
                pkt.stamps.ack_ms = ack
            pkt.fate = "delivered"
            c.delivered += 1
            c.delivered_bytes += pkt.size_bytes
            result.delivered.append(pkt)
        if drained_key is not None and used:
            result.ul_drained[drained_key] = result.ul_drained.get(drained_key, 0) + used
        return used

    def _order(self, direction: Direction) -> list:
        ues = sorted(self.ues)
        if not ues:
            return ues
        k = self._rr_offset[direction] % len(ues)
        return ues[k:] + ues[:k]

    def schedule_slot(self, now_ms: Optional[float] = None) -> SlotResult:
        now = self.now_ms if now_ms is None else now_ms
        result = SlotResult(self.slot, now)
        if self.slot % self.cfg.bsr_period_slots == 0:
            for ue in sorted(self.ues):
                result.bsrs.append(self.emit_bsr(ue, now))
        for direction in (Direction.DOWNLINK, Direction.UPLINK):
            self._schedule_direction(direction, now, result)
            self._rr_offset[direction] += 1
        self.slot += 1
        return result

    def _schedule_direction(self, direction: Direction, now: float, result: SlotResult):
        remaining = self.cfg.prbs_per_slot
        order = self._order(direction)
        served_bits = {ue: 0 for ue in order}
        metric = None
        if self.cfg.scheduler_policy == "ProportionalFair":
            metric = {
                ue: self.ues[ue].link.bits_per_prb / self.ues[ue].pf_avg[direction] for ue in order
            }
        used_total = 0
        for cls in (Priority.HIGH, Priority.LOW):
            demands = {}
            for ue in order:
                st = self.ues[ue]
                if direction is Direction.DOWNLINK:
                    q = st.dl_queues[cls]
                    nbytes = q.bytes
                    if nbytes == 0 and q.items:
                        # zero-size messages ride along for free
                        self._serve(q, 0, now, direction, result, None)
                else:
                    nbytes = st.ul_estimate[cls]
                    self._flush_zero_size(st, now, result)
                demands[ue] = prbs_for_bytes(nbytes, st.link.bits_per_prb)
            alloc = allocate(demands, remaining, self.cfg.scheduler_policy, order, metric)
            for ue in order:
                prbs = alloc[ue]
                if prbs <= 0:
                    continue
                st = self.ues[ue]
                budget = prbs * st.link.bits_per_prb // 8
                if direction is Direction.DOWNLINK:
                    used = self._serve(st.dl_queues[cls], budget, now, direction, result, None)
                else:
                    st.ul_estimate[cls] = max(0, st.ul_estimate[cls] - budget)
                    used = 0
                    # the UE fills the grant in its own priority order
                    for ucls in (Priority.HIGH, Priority.LOW):
                        used += self._serve(
                            st.ul_modem_queues[ucls], budget - used, now, direction, result, (ue, ucls)
                        )
                served_bits[ue] += used * 8
                remaining -= prbs
                used_total += prbs
                result.grants.append(Grant(direction, ue, cls, prbs))
                if self.prb_log is not None:
                    self.prb_log.append((self.slot, direction.value, ue, cls.value, prbs))
        result.prbs_used[direction] = used_total
        result.low_backlog[direction] = any(
            self.ues[ue].queues(direction)[Priority.LOW].bytes > 0 for ue in order
        )
        if metric is not None:
            w = self.cfg.pf_ewma_weight
            for ue in order:
                st = self.ues[ue]
                st.pf_avg[direction] = max(1e-6, w * st.pf_avg[direction] + (1 - w) * served_bits[ue])

    def _flush_zero_size(self, st: UeRadioState, now: float, result: SlotResult) -> None:
        for cls in (Priority.HIGH, Priority.LOW):
            q = st.ul_modem_queues[cls]
            if q.items and q.items[0][1] == 0:
                self._serve(q, 0, now, Direction.UPLINK, result, None)

    # -- bookkeeping -------------------------------------------------------------
    def conservation_holds(self) -> bool:
        for d, c in self.counters.items():
            queued = self.queued_packets(d)
            if c.arrived != c.delivered + c.dropped_marking + c.dropped_overflow + c.lost + queued:
                return False
        return True

    def write_prb_log(self, path) -> None:
        rows: Iterable = self.prb_log or []
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(PRB_LOG_COLUMNS)
            w.writerows(rows)
