"""One test per acceptance criterion; each prints a single PASS/FAIL line."""

import filecmp
import itertools
import math
import random
import time

import pytest

from subflowsim.controller import (
    ALL_ACTIONS,
    DEFAULT_ACTIONS,
    FULL,
    NO_PRIORITY,
    ControllerParams,
    Problem,
    QoeState,
    Stabilizer,
    UeLoad,
    fairness_loss,
    fairness_score,
    nonzoom_prbs,
    prb_demand,
    qoe_gain,
    solve_branch_and_bound,
    solve_enumeration,
    solve_problem,
)
from subflowsim.flow2frame import align, evaluate_delta, mapping_agreement
from subflowsim.monitor import BsrLoadEstimator
from subflowsim.packets import HIGH, LOW, Direction, Priority, SimPacket, SubflowKind
from subflowsim.qoe import detect_freezes, score_delay, score_fps_stats, score_resolution
from subflowsim.ran import Cell, CellConfig
from subflowsim.scenarios import OUTPUT_NAMES, Simulation, load_preset, run

from helpers import synthetic_frame_trace


@pytest.fixture
def verdict(capsys):
    """Print one line per criterion (bypassing capture), then assert."""

    def report(tag, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {tag}: {detail}")
        assert ok, detail

    return report


# -- 1. QoE gain --------------------------------------------------------------------


def clip(x):
    return max(0.0, min(1.0, x))


def gain_by_hand(action, base_fps, enh_fps, base_delay, enh_delay, audio_delay):
    p_base, p_enh, p_audio = action
    qbf = clip(base_fps / 8)
    qef = min(clip(enh_fps / 16), qbf)
    qbd = clip(1 - base_delay / 80)
    qed = clip(1 - enh_delay / 80)
    qa = clip(1 - audio_delay / 50)
    q_base = 0.7 * qbf + 0.3 * qbd
    q_enh = 0.5 * qef + 0.5 * qed
    q0 = 0.4 * q_base + 0.2 * q_enh + 0.4 * qa
    g = 0.5 * (0.4 * p_base * (1 - q_base) + 0.2 * p_enh * (1 - q_enh) + 0.4 * p_audio * (1 - qa))
    return clip(q0 + g)


def test_c01_qoe_gain_conformance(verdict):
    rng = random.Random(101)
    t0 = time.perf_counter()
    worst = 0.0
    checked = 0
    for _ in range(50):
        s = (rng.uniform(0, 12), rng.uniform(0, 24), rng.uniform(0, 120), rng.uniform(0, 120), rng.uniform(0, 80))
        state = QoeState(*s)
        for a in ALL_ACTIONS:
            worst = max(worst, abs(qoe_gain(a, state) - gain_by_hand(a, *s)))
            checked += 1
    example = qoe_gain(FULL, QoeState(4, 8, 40, 40, 25))
    q0 = qoe_gain(NO_PRIORITY, QoeState(4, 8, 40, 40, 25))
    elapsed = time.perf_counter() - t0
    ok = checked == 400 and worst <= 1e-9 and abs(example - 0.75) <= 1e-9 and abs(q0 - 0.5) <= 1e-9 and elapsed < 1.0
    verdict("C1 qoe_gain", ok, f"{checked} cases, max err {worst:.2e}, worked example {example:.4f}, {elapsed * 1000:.1f} ms")


# -- 2. Fairness loss ----------------------------------------------------------------


def random_ues(rng):
    ues = []
    for ue in range(rng.randint(1, 6)):
        bits = rng.choice([100, 200, 400, 800, 1200])
        hungry = rng.random() < 0.3
        media = {"base": rng.uniform(0, 2e6), "enh": rng.uniform(0, 3e6), "audio": rng.uniform(0, 1e5)}
        if rng.random() < 0.3:
            media = {}
        zoom = sum(media.values())
        nonzoom = rng.uniform(0, 2e7) if rng.random() < 0.7 else 0.0
        ues.append(UeLoad(ue, bits, zoom, nonzoom, hungry, media))
    return ues


def test_c02_fairness_zero_within_slack(verdict):
    rng = random.Random(202)
    within = beyond = bad = 0
    for _ in range(1000):
        ues = random_ues(rng)
        total = rng.choice([500, 2000, 3950, 10000])
        K = {u.ue: rng.choice(ALL_ACTIONS) for u in ues}
        U, _ = nonzoom_prbs(ues, total, 50.0)
        R = 0
        for u in ues:
            a = K[u.ue]
            load = a.p_base * u.media.get("base", 0) + a.p_enh * u.media.get("enh", 0) + a.p_audio * u.media.get("audio", 0)
            R += prb_demand(load, u.bits_per_prb, 50.0)
        F = fairness_loss(K, ues, total)
        if R <= total - U:
            within += 1
            bad += F != 0.0
        else:
            beyond += 1
            bad += abs(F - min(1.0, (R - (total - U)) / max(1.0, U))) > 1e-12
    arithmetic = fairness_score(100, 60, 70)
    ok = bad == 0 and within >= 200 and arithmetic == 0.5
    verdict("C2 fairness_loss", ok, f"{within} states with R<=S, {beyond} beyond, {bad} mismatches, (100,60,70) -> {arithmetic}")


# -- 3. Solver equivalence -----------------------------------------------------------


def random_problem(rng, n):
    q, r = [], []
    for _ in range(n):
        s = QoeState(rng.uniform(0, 9), rng.uniform(0, 17), rng.uniform(0, 120), rng.uniform(0, 120), rng.uniform(0, 70))
        row = [100 * qoe_gain(a, s) for a in DEFAULT_ACTIONS]
        if rng.random() < 0.3:
            row = [round(x / 25) * 25 for x in row]
        q.append(row)
        base, enh, aud = rng.randint(0, 60), rng.randint(0, 80), rng.randint(0, 10)
        r.append([a.p_base * base + a.p_enh * enh + a.p_audio * aud for a in DEFAULT_ACTIONS])
    total = rng.choice([100, 200, 500])
    return Problem(q, r, rng.uniform(0, total), total, rng.choice([0, 0.5, 1, rng.random()]),
                   rng.choice([0, 0.5, 1, rng.random()]), [list(DEFAULT_ACTIONS)] * n)


def test_c03_solver_matches_enumeration(verdict):
    rng = random.Random(303)
    mismatches = violations = 0
    for k in range(200):
        p = random_problem(rng, 1 + k % 6)
        a, b = solve_enumeration(p), solve_branch_and_bound(p)
        if a.actions != b.actions or abs(a.objective - b.objective) > 1e-9:
            mismatches += 1
        for sol in (a, b):
            if sol.excess > (1 - p.beta) * p.nonzoom + 1e-9:
                violations += 1
    blocked = Problem([[90.0, 100.0, 100.0]] * 2, [[5, 9, 3]] * 2, 100, 100, 0.5, 1.0,
                      [[FULL, FULL, FULL]] * 2)
    fb = [solve_enumeration(blocked), solve_branch_and_bound(blocked)]
    fallback_ok = all(s.fallback and s.actions == [NO_PRIORITY] * 2 and s.excess == 0 for s in fb)
    ok = mismatches == 0 and violations == 0 and fallback_ok
    verdict("C3 solver", ok, f"200 instances (1-6 flows x 3 actions), {mismatches} mismatches, "
            f"{violations} excess violations, fallback {'ok' if fallback_ok else 'broken'}")


# -- 4. Solver latency ---------------------------------------------------------------


def test_c04_solver_latency(verdict):
    rng = random.Random(404)
    times = []
    for _ in range(100):
        p = random_problem(rng, 25)
        p.total = rng.choice([1975, 3950])
        p.nonzoom = rng.uniform(0, p.total)
        p.r = [[x * 4 for x in row] for row in p.r]
        t0 = time.perf_counter()
        solve_problem(p)
        times.append((time.perf_counter() - t0) * 1000)
    times.sort()
    p99 = times[math.ceil(0.99 * len(times)) - 1]
    verdict("C4 solver latency", p99 <= 50.0, f"25 flows x 3 actions, p50 {times[49]:.2f} ms, p99 {p99:.2f} ms, max {times[-1]:.2f} ms")


# -- 5. BSR inference ----------------------------------------------------------------


def bsr_run(cap, seed=505, slots=4000):
    """Drive uplink traffic through the cell; compare inferred and true modem arrivals at every report."""
    rng = random.Random(seed)
    cell = Cell(CellConfig(prbs_per_slot=20, bsr_cap_bytes=cap, queue_limit_bytes=None), random.Random(seed))
    for ue, snr in enumerate((5.0, 12.0, 20.0)):
        cell.add_ue(ue, snr)
    est = {(ue, c): BsrLoadEstimator() for ue in range(3) for c in (Priority.HIGH, Priority.LOW)}
    arrived = {key: 0 for key in est}
    checks = exact = above = 0
    for slot in range(slots):
        now = float(slot)
        for ue in range(3):
            burst = 1 + (slot // 500) % 3  # alternate light and heavy phases
            for _ in range(rng.randint(0, burst)):
                marking = HIGH if rng.random() < 0.4 else LOW
                size = rng.randint(60, 1400)
                cell.enqueue_uplink(SimPacket(0, ue, Direction.UPLINK, size, SubflowKind.BACKGROUND), marking, now)
                arrived[(ue, marking.level)] += size
        res = cell.schedule_slot(now)
        for bsr in res.bsrs:
            for cls, reported in bsr.queued_bytes.items():
                e = est[(bsr.ue, cls)]
                e.on_report(now, reported)
                checks += 1
                exact += e.cumulative == arrived[(bsr.ue, cls)]
                above += e.cumulative > arrived[(bsr.ue, cls)]
        for key, nbytes in res.ul_drained.items():
            est[key].on_drained(nbytes)
    return checks, exact, above


def test_c05_bsr_inference(verdict):
    checks, exact, above = bsr_run(cap=None)
    c_checks, c_exact, c_above = bsr_run(cap=3000)
    ok = exact == checks and c_above == 0 and c_exact < c_checks
    verdict("C5 BSR inference", ok, f"uncapped {exact}/{checks} reports exact; capped {c_above} reports above truth, "
            f"{c_checks - c_exact} strictly below")


# -- 6. Uplink delay -----------------------------------------------------------------


def test_c06_uplink_delay(verdict):
    sim = Simulation(load_preset(4).variant(duration_s=20, outputs=[]))
    sim.run()
    streams = {}
    for pkt, extra in sim.monitor.ul_samples:
        true = pkt.stamps.phy_deliver_ms - pkt.stamps.sdap_ingress_ms
        streams.setdefault((pkt.flow, pkt.kind), []).append((extra, true))
    total = good = 0
    for samples in streams.values():
        floor = min(t for _, t in samples)
        for extra, true in samples:
            total += 1
            good += abs(extra - (true - floor)) <= 1.0
    frac = good / total if total else 0.0
    verdict("C6 uplink delay", total > 1000 and frac >= 0.99, f"{good}/{total} packets within 1 ms ({100 * frac:.2f}%)")


# -- 7. Hysteresis and warm-up -------------------------------------------------------


def test_c07_hysteresis_and_warmup(verdict):
    A, B, C = DEFAULT_ACTIONS
    problems = 0
    sequences = 0
    for seq in itertools.product((A, B, C), repeat=9):
        stab = Stabilizer(ControllerParams(warmup_ms=0))
        committed = FULL
        history = []
        last_change = None
        for k, prop in enumerate(seq):
            history.append(prop)
            now = stab.stabilize({"f": prop}, k * 50.0, {"f": 0.0})["f"]
            run5 = len(history) >= 5 and all(x == prop for x in history[-5:])
            if now != committed:
                if not (run5 and now == prop):
                    problems += 1
                if last_change is not None and k - last_change < 5:
                    problems += 1
                last_change = k
            if run5 and now != prop:
                problems += 1
            committed = now
        sequences += 1
    # warm-up: a flow first seen at t = 1000 ms holds FULL until t = 3000 ms exactly
    stab = Stabilizer(ControllerParams(warmup_ms=2000))
    held = []
    for k in range(100):
        t = 1000.0 + 50.0 * k
        held.append((t, stab.stabilize({"g": NO_PRIORITY}, t, {"g": 1000.0})["g"]))
    warm_ok = all(a == FULL for t, a in held if t < 3000.0) and all(a == NO_PRIORITY for t, a in held if t >= 3000.0)
    verdict("C7 hysteresis", problems == 0 and warm_ok,
            f"{sequences} scripted sequences, {problems} rule violations, warm-up {'exact' if warm_ok else 'wrong'}")


# -- 8. QoE score model --------------------------------------------------------------


def test_c08_qoe_worked_values(verdict):
    delay = score_delay("audio", 600, 0)
    fps = score_fps_stats(28, 14)
    frames = [(100.0 * i, 480) for i in range(11)]
    freezes = detect_freezes([t for t, _ in frames], 2000.0)
    res = score_resolution(frames, freezes, 2000.0)
    steady = [33.0 * i for i in range(40)]
    long_gap = steady + [39 * 33 + 500 + 33 * i for i in range(20)]
    short_gap = steady + [39 * 33 + 90 + 33 * i for i in range(20)]
    v500 = detect_freezes(long_gap, long_gap[-1] + 33)
    v90 = detect_freezes(short_gap, short_gap[-1] + 33)
    ok = delay == 12.5 and fps == 18.75 and abs(res - 7.5) <= 1e-12 and v500 == {39} and v90 == set()
    verdict("C8 QoE model", ok, f"delay {delay}, fps {fps}, resolution {res}, 500 ms gap freeze {sorted(v500)}, "
            f"90 ms gap freeze {sorted(v90)}")


# -- 9. Flow2Frame -------------------------------------------------------------------


def test_c09_flow2frame(verdict):
    traces = 120
    fp_bad = agree_bad = wrong_bad = 0
    worst = 1.0
    for seed in range(traces):
        tr = synthetic_frame_trace(seed)
        res = align(tr.inp)
        fp = res.false_positives_by_delta[res.best_delta_ms]
        agree = mapping_agreement(res, tr.truth)
        worst = min(worst, agree)
        _, wrong_fp, _, _ = evaluate_delta(tr.true_delta + 16, tr.inp)
        fp_bad += fp != 0
        agree_bad += agree < 0.99
        wrong_bad += wrong_fp <= fp
    ok = fp_bad == 0 and agree_bad == 0 and wrong_bad == 0
    verdict("C9 Flow2Frame", ok, f"{traces} traces, {fp_bad} with false positives, worst agreement {worst:.4f}, "
            f"{wrong_bad} where a wrong offset was not worse")


# -- 10. Single-flow tradeoff --------------------------------------------------------


def test_c10_single_flow_tradeoff(verdict):
    t0 = time.perf_counter()
    base = load_preset(1).variant(duration_s=60, outputs=[])
    vanilla = run(base.variant(baseline="Vanilla5G:300"))
    points = []
    for beta in (0.0, 0.25, 0.5, 0.75, 1.0):
        rep = run(base.variant(beta=beta))
        points.append((beta, rep.qoe_sum, rep.goodput_sum))
    elapsed = time.perf_counter() - t0
    ref_q, ref_g = vanilla.qoe_sum, vanilla.goodput_sum
    winners = [(b, q, g) for b, q, g in points if q >= 1.5 * ref_q and abs(g - ref_g) <= 0.15 * ref_g]
    curve = ", ".join(f"b={b:g}: {q:.1f}/{g / 1e6:.1f}M" for b, q, g in points)
    ok = bool(winners) and elapsed <= 300
    verdict("C10 preset 1 tradeoff", ok, f"Vanilla5G:300 {ref_q:.1f}/{ref_g / 1e6:.1f}M; {curve}; "
            f"{len(winners)} qualifying beta; {elapsed:.0f} s")


# -- 11. Shaping trends --------------------------------------------------------------


def uplink_zoom(rep):
    return next(q for q in rep.qoe.values() if q.direction is Direction.UPLINK)


def test_c11_shaping_trends(verdict):
    base = load_preset(3).variant(duration_s=30, outputs=[], actions=[[1, 0, 1]])
    on = uplink_zoom(run(base.variant(enhancement_drop=True))).base_fps
    off = uplink_zoom(run(base.variant(enhancement_drop=False))).base_fps
    rates = [uplink_zoom(run(base.variant(probe_drop_override=p))).send_bps for p in (0.0, 0.3, 0.6, 0.9)]
    mono = all(b <= a for a, b in zip(rates, rates[1:]))
    sweep = ", ".join(f"{r / 1e3:.0f}" for r in rates)
    verdict("C11 shaping", on > off and mono, f"base fps drop on {on:.2f} vs off {off:.2f}; send kbps at probe drop "
            f"0/.3/.6/.9: {sweep}")


# -- 12. Determinism -----------------------------------------------------------------


def test_c12_determinism(verdict, tmp_path):
    cfg = load_preset(5).variant(duration_s=6, seed=12)
    run(cfg, tmp_path / "a")
    run(cfg, tmp_path / "b")
    names = [f"{n}.csv" for n in OUTPUT_NAMES]
    same, diff, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)
    verdict("C12 determinism", len(same) == len(names), f"{len(same)}/{len(names)} CSVs byte-identical, differing {diff + errors}")
