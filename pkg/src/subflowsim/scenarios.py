"""Declarative scenarios, the simulation loop and its CSV outputs."""

from __future__ import annotations

import copy
import csv
import dataclasses
import heapq
import json
import logging
import os
import random
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .baselines import BaselineMarker, BaselineMode, baseline_decision
from .controller import NO_PRIORITY, Controller, ControllerParams, Marker, write_decision_log
from .monitor import Monitor, UeShim, write_reports
from .packets import (
    MEDIA_KINDS,
    Direction,
    HIGH,
    PacketIds,
    SubflowKind,
    write_trace,
)
from .qoe import QoeInputs, QoeScore, breakdown_row, composite, qoe_inputs, records_from_packets, render_video, write_breakdown
from .ran import Cell, CellConfig, ConfigError
from .traffic import BackgroundSource, BackgroundSourceConfig, SourceFeedback, ZoomSource, ZoomSourceConfig

log = logging.getLogger(__name__)

OUTPUT_NAMES = ("trace", "monitor", "decisions", "qoe", "goodput", "prb", "frames", "rates", "summary")
PROBE_DEADLINE_MS = 300.0
DELAY_FEEDBACK_WINDOW_MS = 500.0
UE_REPORT_PERIOD_MS = 10.0
CONGESTION_THRESHOLD = 0.9


# -- configuration ---------------------------------------------------------------


_DIRECTION_NAMES = {"DL": Direction.DOWNLINK, "UL": Direction.UPLINK}


def _direction(text) -> Direction:
    if text in _DIRECTION_NAMES:
        return _DIRECTION_NAMES[text]
    try:
        return Direction(text)
    except ValueError:
        raise ConfigError(f"direction must be DL or UL, got {text!r}") from None


def _build(cls, data: dict, what: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")
    try:
        return cls(**data)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {what}: {exc}") from None


@dataclass
class FlowSpec:
    name: str
    kind: str  # "zoom" or "background"
    direction: Direction
    zoom: Optional[ZoomSourceConfig] = None
    background: Optional[BackgroundSourceConfig] = None
    start_ms: float = 0.0


@dataclass
class UeSpec:
    id: int
    snr_db: float
    flows: list
    # piecewise-constant (time ms, snr dB) changes applied during the run
    snr_trace: list = field(default_factory=list)

    def snr_at(self, t_ms: float) -> float:
        snr = self.snr_db
        for t, value in self.snr_trace:
            if t <= t_ms:
                snr = value
        return snr


@dataclass
class ScenarioConfig:
    name: str
    ues: list
    cell: CellConfig = field(default_factory=CellConfig)
    controller: ControllerParams = field(default_factory=ControllerParams)
    baseline: Optional[BaselineMode] = None
    duration_s: float = 60.0
    seed: int = 1
    core_delay_ms: float = 20.0
    probe_drop_override: Optional[float] = None
    enhancement_drop: bool = True
    outputs: tuple = OUTPUT_NAMES
    require_congestion: bool = False

    # keep the raw dict around so sweeps can re-derive variants
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def duration_ms(self) -> float:
        return self.duration_s * 1000.0

    def validate(self) -> None:
        if not self.ues:
            raise ConfigError("a scenario needs at least one UE")
        ids = [u.id for u in self.ues]
        if len(set(ids)) != len(ids):
            raise ConfigError("UE ids must be unique")
        if self.duration_s <= 0:
            raise ConfigError("duration_s must be positive")
        if self.baseline is None and self.duration_ms <= self.controller.warmup_ms:
            raise ConfigError("duration must exceed the controller warm-up")
        if self.core_delay_ms < 0:
            raise ConfigError("core_delay_ms must be non-negative")
        if self.probe_drop_override is not None and not 0 <= self.probe_drop_override <= 1:
            raise ConfigError("probe_drop_override must lie in [0, 1]")
        names = [f.name for u in self.ues for f in u.flows]
        if len(set(names)) != len(names):
            raise ConfigError("flow names must be unique")
        seen = set()
        for u in self.ues:
            for f in u.flows:
                if f.kind == "zoom":
                    key = (u.id, f.direction)
                    if key in seen:
                        raise ConfigError(f"UE {u.id} has two Zoom flows in direction {f.direction.value}")
                    seen.add(key)
        bad = set(self.outputs) - set(OUTPUT_NAMES)
        if bad:
            raise ConfigError(f"unknown outputs: {sorted(bad)}")

    @staticmethod
    def from_dict(data: dict) -> "ScenarioConfig":
        if not isinstance(data, dict):
            raise ConfigError("scenario config must be a JSON object")
        data = copy.deepcopy(data)
        known = {
            "name", "ues", "cell", "controller", "baseline", "duration_s", "seed", "core_delay_ms",
            "probe_drop_override", "enhancement_drop", "outputs", "require_congestion", "description",
        }
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        if "ues" not in data:
            raise ConfigError("scenario config needs a 'ues' list")
        cell = _build(CellConfig, data.get("cell", {}), "cell")
        ctrl_raw = dict(data.get("controller", {}))
        explicit_actions = "actions" in ctrl_raw
        params = _build(ControllerParams, ctrl_raw, "controller")
        if params.beta == 0 and not explicit_actions:
            # beta = 0 stands for "never prioritize Zoom"
            params.actions = (NO_PRIORITY,)
        baseline = None
        if data.get("baseline") not in (None, "", "QoeAware"):
            try:
                baseline = BaselineMode.parse(str(data["baseline"]))
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        ues = []
        for i, u in enumerate(data["ues"]):
            ues.append(_parse_ue(u, i))
        cfg = ScenarioConfig(
            name=str(data.get("name", "scenario")),
            ues=ues,
            cell=cell,
            controller=params,
            baseline=baseline,
            duration_s=float(data.get("duration_s", 60.0)),
            seed=int(data.get("seed", 1)),
            core_delay_ms=float(data.get("core_delay_ms", 20.0)),
            probe_drop_override=data.get("probe_drop_override"),
            enhancement_drop=bool(data.get("enhancement_drop", True)),
            outputs=tuple(data.get("outputs", OUTPUT_NAMES)),
            require_congestion=bool(data.get("require_congestion", False)),
            raw=data,
        )
        cfg.validate()
        return cfg

    @staticmethod
    def load(path) -> "ScenarioConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from None
        return ScenarioConfig.from_dict(data)

    def variant(self, **overrides) -> "ScenarioConfig":
        """A copy with top-level or controller fields replaced (alpha, beta, baseline, ...)."""
        data = copy.deepcopy(self.raw)
        ctrl = data.setdefault("controller", {})
        for key, value in overrides.items():
            if key in ("alpha", "beta", "actions", "warmup_ms", "interval_ms", "hysteresis_multiple"):
                ctrl[key] = value
            else:
                data[key] = value
        return ScenarioConfig.from_dict(data)


def _parse_ue(u: dict, index: int) -> UeSpec:
    if not isinstance(u, dict):
        raise ConfigError(f"ues[{index}] must be an object")
    unknown = set(u) - {"id", "snr_db", "snr_trace", "flows"}
    if unknown:
        raise ConfigError(f"ues[{index}]: unknown keys {sorted(unknown)}")
    if "id" not in u or "snr_db" not in u:
        raise ConfigError(f"ues[{index}] needs 'id' and 'snr_db'")
    flows = []
    for j, f in enumerate(u.get("flows", [])):
        flows.append(_parse_flow(f, u["id"], j))
    trace = [(float(t), float(s)) for t, s in u.get("snr_trace", [])]
    return UeSpec(int(u["id"]), float(u["snr_db"]), flows, sorted(trace))


def _parse_flow(f: dict, ue: int, index: int) -> FlowSpec:
    if not isinstance(f, dict):
        raise ConfigError(f"flow {index} of UE {ue} must be an object")
    unknown = set(f) - {"name", "type", "direction", "config", "start_ms"}
    if unknown:
        raise ConfigError(f"flow {index} of UE {ue}: unknown keys {sorted(unknown)}")
    kind = f.get("type")
    direction = _direction(f.get("direction"))
    name = f.get("name") or f"{kind}-ue{ue}-{direction.value}-{index}"
    start = float(f.get("start_ms", 0.0))
    conf = dict(f.get("config", {}))
    if kind == "zoom":
        for key in ("rate_curve", "congestion_backoff"):
            if key in conf:
                conf[key] = tuple(tuple(p) for p in conf[key])
        return FlowSpec(name, kind, direction, zoom=_build(ZoomSourceConfig, conf, "zoom config"), start_ms=start)
    if kind == "background":
        conf.setdefault("start_ms", start)
        return FlowSpec(
            name, kind, direction, background=_build(BackgroundSourceConfig, conf, "background config"), start_ms=start
        )
    raise ConfigError(f"flow type must be zoom or background, got {kind!r}")


def preset_path(number: int) -> Path:
    if number not in range(1, 6):
        raise ConfigError(f"preset must be 1..5, got {number}")
    return Path(str(resources.files("subflowsim") / "presets" / f"preset{number}.json"))


def load_preset(number: int) -> ScenarioConfig:
    return ScenarioConfig.load(preset_path(number))


# -- run report ----------------------------------------------------------------------


@dataclass
class FlowQoe:
    flow: str
    ue: int
    direction: Direction
    score: QoeScore
    inputs: QoeInputs
    base_fps: float
    send_bps: float


@dataclass
class RunReport:
    name: str
    duration_s: float
    qoe: dict
    goodput_bps: dict  # background flow -> delivered bits/s
    offered_bps: dict  # background flow -> sent bits/s
    decisions: list
    solve_times_ms: list
    congested_fraction: float
    label: str = "QoeAware"

    @property
    def qoe_sum(self) -> float:
        return sum(q.score.total for q in self.qoe.values())

    @property
    def goodput_sum(self) -> float:
        return sum(self.goodput_bps.values())

    @property
    def congestion_ok(self) -> bool:
        return self.congested_fraction >= CONGESTION_THRESHOLD

    def solve_latency(self) -> dict:
        if not self.solve_times_ms:
            return {"count": 0, "p50_ms": 0.0, "p99_ms": 0.0, "max_ms": 0.0}
        arr = np.asarray(self.solve_times_ms)
        return {
            "count": int(arr.size),
            "p50_ms": float(np.percentile(arr, 50)),
            "p99_ms": float(np.percentile(arr, 99)),
            "max_ms": float(arr.max()),
        }


SUMMARY_COLUMNS = ("name", "mode", "qoe_sum", "goodput_bps", "congested_fraction")


# -- simulation ----------------------------------------------------------------------


@dataclass
class _ZoomState:
    source: ZoomSource
    packets: list = field(default_factory=list)
    probes: list = field(default_factory=list)
    episode: float = -1.0
    # (delivery time, delay) of recently delivered media packets
    delays: deque = field(default_factory=deque)
    last_delay: float = 0.0


@dataclass
class _BackgroundState:
    source: BackgroundSource
    acked_bytes: int = 0
    losses: int = 0
    rtt: Optional[float] = None
    delivered_bytes: int = 0


class Simulation:
    def __init__(self, config: ScenarioConfig):
        config.validate()
        self.cfg = config
        master = random.Random(config.seed)
        self.ids = PacketIds()
        self.cell = Cell(config.cell, random.Random(master.getrandbits(64)))
        self.keep_all = "trace" in config.outputs
        if "prb" in config.outputs:
            self.cell.enable_prb_log()
        self.monitor = Monitor(config.cell.k1_slots, config.cell.slot_ms)
        self.zoom: dict = {}
        self.background: dict = {}
        self.shims: dict = {}
        self.all_packets: list = []
        for ue in sorted(config.ues, key=lambda u: u.id):
            self.cell.add_ue(ue.id, ue.snr_at(0.0))
            port = 443
            for f in ue.flows:
                rng = random.Random(master.getrandbits(64))
                if f.kind == "zoom":
                    src = ZoomSource(f.name, ue.id, f.direction, f.zoom, self.ids, rng, f.start_ms)
                    self.zoom[f.name] = _ZoomState(src)
                    if f.direction is Direction.UPLINK:
                        self.shims.setdefault(ue.id, UeShim(ue.id, self.ids))
                else:
                    src = BackgroundSource(f.name, ue.id, f.direction, f.background, self.ids, port)
                    port += 1
                    self.background[f.name] = _BackgroundState(src)
        if config.baseline is None:
            total = config.cell.total_prb(config.controller.interval_ms)
            self.controller: Optional[Controller] = Controller(
                config.controller,
                total,
                config.cell.scheduler_policy,
                config.probe_drop_override,
                config.enhancement_drop,
            )
            self.marker = Marker()
        else:
            self.controller = None
            self.marker = BaselineMarker(config.baseline)
        self.reports: list = []
        self.baseline_log: list = []
        self._events: list = []
        self._seq = 0
        self._congested = 0
        self._slots = 0
        self._bg_dirs = {s.source.direction for s in self.background.values()}

    # -- event plumbing ------------------------------------------------------------
    def _push(self, t: float, kind: str, payload) -> None:
        heapq.heappush(self._events, (t, self._seq, kind, payload))
        self._seq += 1

    def _drain_events(self, now: float) -> None:
        while self._events and self._events[0][0] <= now:
            _, _, kind, payload = heapq.heappop(self._events)
            if kind == "dl":
                self._ingress_downlink(payload, now)
            elif kind == "ack":
                name, nbytes, rtt = payload
                st = self.background[name]
                st.acked_bytes += nbytes
                st.rtt = rtt
            elif kind == "loss":
                self.background[payload].losses += 1

    # -- packet paths ------------------------------------------------------------------
    def _record(self, pkt) -> None:
        if self.keep_all:
            self.all_packets.append(pkt)
        z = self.zoom.get(pkt.flow)
        if z is not None:
            z.packets.append(pkt)
            if pkt.kind is SubflowKind.PROBE:
                z.probes.append(pkt)

    def _ingress_downlink(self, pkt, now: float) -> None:
        self.monitor.on_ingress(pkt, now)
        marking = self.marker.mark(pkt, now)
        if not self.cell.enqueue_downlink(pkt, marking, now):
            self._dropped(pkt, now)

    def _emit(self, pkt, now: float) -> None:
        self._record(pkt)
        if pkt.direction is Direction.DOWNLINK:
            self._push(now + self.cfg.core_delay_ms, "dl", pkt)
            return
        shim = self.shims.get(pkt.ue)
        if shim is not None:
            shim.observe(pkt, now)
        marking = self.marker.mark(pkt, now)
        if not self.cell.enqueue_uplink(pkt, marking, now):
            self._dropped(pkt, now)

    def _dropped(self, pkt, now: float) -> None:
        if pkt.flow in self.background:
            self._push(now + self.cfg.core_delay_ms, "loss", pkt.flow)

    def _delivered(self, pkt, now: float) -> None:
        bg = self.background.get(pkt.flow)
        if bg is not None:
            bg.delivered_bytes += pkt.size_bytes
            # acknowledgements travel back over the core only
            back = self.cfg.core_delay_ms if pkt.direction is Direction.DOWNLINK else 2 * self.cfg.core_delay_ms
            ack_at = now + back
            self._push(ack_at, "ack", (pkt.flow, pkt.size_bytes, ack_at - pkt.stamps.app_emit_ms))
            return
        z = self.zoom.get(pkt.flow)
        if z is not None and pkt.kind in MEDIA_KINDS:
            z.delays.append((now, now - pkt.stamps.sdap_ingress_ms))

    # -- sender feedback ------------------------------------------------------------------
    def _feedback(self, z: _ZoomState, now: float) -> SourceFeedback:
        src = z.source
        if src.probe_episode_start_ms != z.episode:
            z.episode = src.probe_episode_start_ms
            z.probes = [p for p in z.probes if p.stamps.app_emit_ms >= z.episode]
        ratio = 1.0
        if src.probing and now >= z.episode + src.cfg.probe_duration_ms:
            judged = [p for p in z.probes if p.stamps.app_emit_ms <= now - PROBE_DEADLINE_MS]
            if judged:
                ok = sum(
                    1
                    for p in judged
                    if p.fate == "delivered" and p.stamps.phy_deliver_ms - p.stamps.app_emit_ms <= PROBE_DEADLINE_MS
                )
                ratio = ok / len(judged)
        # the sender reacts to the worst recent delay, like a delay-based congestion controller
        while z.delays and z.delays[0][0] <= now - DELAY_FEEDBACK_WINDOW_MS:
            z.delays.popleft()
        if z.delays:
            z.last_delay = max(d for _, d in z.delays)
        return SourceFeedback(ratio, z.last_delay)

    # -- main loop -------------------------------------------------------------------
    def _control(self, now: float) -> None:
        report = self.monitor.snapshot(now, sorted(self.cell.ues))
        if "monitor" in self.cfg.outputs:
            self.reports.append(report)
        if self.controller is not None:
            decisions = self.controller.step(report, now)
        else:
            decisions = baseline_decision(self.cfg.baseline, report)
            for name in sorted(decisions):
                d = decisions[name]
                self.baseline_log.append(
                    (report.interval, name, str(d.action), str(d.action), "", "", "", "")
                )
        self.marker.update(decisions)

    def run(self) -> RunReport:
        cfg = self.cfg
        slot_ms = cfg.cell.slot_ms
        n_slots = int(round(cfg.duration_ms / slot_ms))
        interval = cfg.controller.interval_ms
        next_control = 0.0
        next_ue_report = 0.0
        snr_changes = sorted(
            (t, ue.id, s) for ue in cfg.ues for t, s in ue.snr_trace if t > 0
        )
        zoom_states = [self.zoom[k] for k in sorted(self.zoom)]
        bg_states = [self.background[k] for k in sorted(self.background)]
        for slot in range(n_slots):
            now = slot * slot_ms
            while snr_changes and snr_changes[0][0] <= now:
                _, ue, s = snr_changes.pop(0)
                self.cell.set_snr(ue, s)
            self._drain_events(now)
            if now >= next_control:
                self._control(now)
                next_control += interval
            for z in zoom_states:
                for pkt in z.source.zoom_step(now, self._feedback(z, now)):
                    self._emit(pkt, now)
            for b in bg_states:
                pkts = b.source.background_step(now, b.acked_bytes, b.losses, b.rtt)
                b.acked_bytes = b.losses = 0
                b.rtt = None
                for pkt in pkts:
                    self._emit(pkt, now)
            if self.shims and now >= next_ue_report:
                for ue in sorted(self.shims):
                    rep = self.shims[ue].make_report(now)
                    self._record(rep)
                    self.cell.enqueue_uplink(rep, HIGH, now)
                next_ue_report += UE_REPORT_PERIOD_MS
            result = self.cell.schedule_slot(now)
            self.monitor.observe_slot(self.cell, result)
            for pkt in result.delivered:
                self._delivered(pkt, now)
            for pkt in result.lost:
                self._dropped(pkt, now)
            self._slots += 1
            if self._bg_dirs and all(result.low_backlog[d] for d in self._bg_dirs):
                self._congested += 1
        return self._report()

    def _report(self) -> RunReport:
        cfg = self.cfg
        total_ms = cfg.duration_ms
        qoe = {}
        for name in sorted(self.zoom):
            z = self.zoom[name]
            records = records_from_packets(z.packets)
            inputs = qoe_inputs(records, total_ms)
            frames = render_video(records)
            base = sum(1 for f in frames if f.layer == "Base")
            sent = sum(p.size_bytes for p in z.packets)
            qoe[name] = FlowQoe(
                name, z.source.ue, z.source.direction, composite(inputs), inputs,
                base / cfg.duration_s, sent * 8 / cfg.duration_s,
            )
        goodput = {n: b.delivered_bytes * 8 / cfg.duration_s for n, b in sorted(self.background.items())}
        offered = {n: b.source.sent_bytes * 8 / cfg.duration_s for n, b in sorted(self.background.items())}
        decisions = self.controller.log if self.controller is not None else self.baseline_log
        times = self.controller.solve_times_ms if self.controller is not None else []
        frac = self._congested / self._slots if self._slots else 0.0
        label = cfg.baseline.label if cfg.baseline is not None else "QoeAware"
        report = RunReport(cfg.name, cfg.duration_s, qoe, goodput, offered, decisions, times, frac, label)
        if cfg.require_congestion and not report.congestion_ok:
            log.warning(
                "%s: low-priority queues were backlogged in only %.1f%% of slots",
                cfg.name, 100 * frac,
            )
        return report

    # -- outputs ------------------------------------------------------------------------
    def write_outputs(self, report: RunReport, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        wanted = set(self.cfg.outputs)
        if "trace" in wanted:
            write_trace(out / "trace.csv", self.all_packets)
        if "monitor" in wanted:
            write_reports(out / "monitor.csv", self.reports)
        if "decisions" in wanted:
            write_decision_log(out / "decisions.csv", report.decisions)
        if "qoe" in wanted:
            write_breakdown(
                out / "qoe.csv",
                [breakdown_row(q.flow, q.ue, q.direction.value, q.inputs, q.score) for q in report.qoe.values()],
            )
        if "goodput" in wanted:
            with open(out / "goodput.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(("flow", "ue", "direction", "offered_bps", "goodput_bps"))
                for name, b in sorted(self.background.items()):
                    w.writerow(
                        (name, b.source.ue, b.source.direction.value,
                         f"{report.offered_bps[name]:.1f}", f"{report.goodput_bps[name]:.1f}")
                    )
        if "prb" in wanted:
            self.cell.write_prb_log(out / "prb.csv")
        if "frames" in wanted:
            with open(out / "frames.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(("flow", "frame_id", "camera_pts_ms", "emitted", "rtp_timestamp", "layer"))
                for name in sorted(self.zoom):
                    for fr in self.zoom[name].source.log.frames:
                        w.writerow(
                            (name, fr.frame_id, f"{fr.camera_pts_ms:.3f}", int(fr.emitted),
                             "" if fr.rtp_timestamp is None else fr.rtp_timestamp, fr.layer)
                        )
        if "rates" in wanted:
            with open(out / "rates.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(("flow", "second", "kind", "bits"))
                for name in sorted(self.zoom):
                    for sec, kind, bits in self.zoom[name].source.log.rate_series():
                        w.writerow((name, sec, kind, f"{bits:.1f}"))
        if "summary" in wanted:
            with open(out / "summary.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(SUMMARY_COLUMNS)
                w.writerow(
                    (report.name, report.label, f"{report.qoe_sum:.4f}", f"{report.goodput_sum:.1f}",
                     f"{report.congested_fraction:.4f}")
                )


def run(config: ScenarioConfig, out_dir=None) -> RunReport:
    sim = Simulation(config)
    report = sim.run()
    if out_dir is not None:
        sim.write_outputs(report, out_dir)
    return report


# -- sweeps --------------------------------------------------------------------------


FRONTIER_COLUMNS = ("point", "mode", "alpha", "beta", "qoe_sum", "qoe_min", "qoe_max", "goodput_bps")
ERROR_COLUMNS = ("point", "error")


def _point_label(point: dict) -> str:
    return ";".join(f"{k}={point[k]}" for k in sorted(point)) or "default"


def _run_point(args):
    raw, point = args
    try:
        base = ScenarioConfig.from_dict(raw)
        cfg = base.variant(**point)
        rep = run(cfg)
    except Exception as exc:  # one bad point must not sink the sweep
        return point, None, f"{type(exc).__name__}: {exc}"
    scores = [q.score.total for q in rep.qoe.values()] or [0.0]
    row = (
        _point_label(point), rep.label, f"{cfg.controller.alpha:g}", f"{cfg.controller.beta:g}",
        f"{rep.qoe_sum:.4f}", f"{min(scores):.4f}", f"{max(scores):.4f}", f"{rep.goodput_sum:.1f}",
    )
    return point, (row, rep), None


@dataclass
class SweepResult:
    rows: list
    errors: list
    reports: list

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "frontier.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(FRONTIER_COLUMNS)
            w.writerows(self.rows)
        with open(out / "errors.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(ERROR_COLUMNS)
            w.writerows(self.errors)


def sweep(config: ScenarioConfig, grid: Sequence[dict], workers: int = 1, keep_outputs: bool = False) -> SweepResult:
    """Run one simulation per grid point; failures are collected, not raised."""
    raw = copy.deepcopy(config.raw)
    if not keep_outputs:
        raw["outputs"] = []
    jobs = [(raw, dict(p)) for p in grid]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs), os.cpu_count() or 1)) as pool:
            results = list(pool.map(_run_point, jobs))
    else:
        results = [_run_point(j) for j in jobs]
    rows, errors, reports = [], [], []
    for point, ok, err in results:
        if err is not None:
            errors.append((_point_label(point), err))
        else:
            rows.append(ok[0])
            reports.append(ok[1])
    return SweepResult(rows, errors, reports)
