"""QoE-gain and fairness models, the joint optimizer, stabilization and marking."""

from __future__ import annotations

import csv
import heapq
import itertools
import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Optional, Sequence

import numpy as np

from .dpi import DpiPlugin, get_plugin
from .packets import (
    ALWAYS_DROP,
    ENHANCEMENT_KINDS,
    Direction,
    DropDirective,
    HIGH,
    LOW,
    Priority,
    PriorityClass,
    SimPacket,
    SubflowKind,
)
from .ran import INF, allocate

# constants of the Zoom QoE model
TARGET_BASE_FPS = 8.0
TARGET_ENH_FPS = 16.0
MAX_VIDEO_DELAY_MS = 80.0
MAX_AUDIO_DELAY_MS = 50.0

TIE_TOLERANCE = 1e-9
# absorbs float rounding between bounds and exact leaf objectives
BOUND_SLACK = 1e-12
# completion tests compare against DP sums accumulated in a different order
ORACLE_SLACK = 1e-9
# node budget for the plain tie-break search before switching to count-indexed tables
HEAP_BUDGET = 150


class Action(NamedTuple):
    p_base: int
    p_enh: int
    p_audio: int

    @property
    def prioritized(self) -> int:
        return self.p_base + self.p_enh + self.p_audio

    def __str__(self) -> str:
        return f"({self.p_base},{self.p_enh},{self.p_audio})"

    @staticmethod
    def parse(text) -> "Action":
        if isinstance(text, Action):
            return text
        if isinstance(text, str):
            text = [int(x) for x in text.strip("() ").split(",")]
        a = Action(*(int(x) for x in text))
        if any(x not in (0, 1) for x in a):
            raise ValueError(f"action components must be 0 or 1: {text}")
        return a


FULL = Action(1, 1, 1)
BASE_AUDIO = Action(1, 0, 1)
NO_PRIORITY = Action(0, 0, 0)
DEFAULT_ACTIONS = (FULL, BASE_AUDIO, NO_PRIORITY)
ALL_ACTIONS = tuple(Action(*bits) for bits in itertools.product((0, 1), repeat=3))


@dataclass
class ControllerParams:
    alpha: float = 0.5
    beta: float = 0.5
    interval_ms: float = 50.0
    hysteresis_multiple: int = 5
    warmup_ms: float = 2000.0
    enumeration_threshold: int = 6
    actions: tuple = DEFAULT_ACTIONS

    def __post_init__(self):
        self.actions = tuple(Action.parse(a) for a in self.actions)
        if not 0.0 <= self.alpha <= 1.0 or not 0.0 <= self.beta <= 1.0:
            raise ValueError("alpha and beta must lie in [0, 1]")
        if self.interval_ms <= 0 or self.hysteresis_multiple < 1 or self.warmup_ms < 0:
            raise ValueError("interval, hysteresis and warm-up must be positive")
        if not self.actions:
            raise ValueError("the candidate action set is empty")
        if self.enumeration_threshold < 0:
            raise ValueError("enumeration_threshold must be non-negative")


def clip(x: float) -> float:
    return max(min(x, 1.0), 0.0)


def qoe_gain(action: Sequence[int], state) -> float:
    """Predicted Zoom QoE in [0, 1] after applying action to the flow state."""
    p_base, p_enh, p_audio = action
    q_b_fps = clip(state.base_fps / TARGET_BASE_FPS)
    # enhancement depends on the base layer
    q_e_fps = min(clip(state.enh_fps / TARGET_ENH_FPS), q_b_fps)
    q_b_delay = clip(1 - state.base_delay_ms / MAX_VIDEO_DELAY_MS)
    q_e_delay = clip(1 - state.enh_delay_ms / MAX_VIDEO_DELAY_MS)
    q_audio = clip(1 - state.audio_delay_ms / MAX_AUDIO_DELAY_MS)
    q_base = 0.7 * q_b_fps + 0.3 * q_b_delay
    q_enh = 0.5 * q_e_fps + 0.5 * q_e_delay
    q0 = 0.4 * q_base + 0.2 * q_enh + 0.4 * q_audio
    gain = 0.5 * (
        0.4 * p_base * (1 - q_base) + 0.2 * p_enh * (1 - q_enh) + 0.4 * p_audio * (1 - q_audio)
    )
    return clip(q0 + gain)


@dataclass
class QoeState:
    base_fps: float = 0.0
    enh_fps: float = 0.0
    base_delay_ms: float = 0.0
    enh_delay_ms: float = 0.0
    audio_delay_ms: float = 0.0


# -- fairness model --------------------------------------------------------------


@dataclass
class UeLoad:
    """What the fairness model needs to know about one UE in one direction."""

    ue: int
    bits_per_prb: int
    zoom_load: float
    nonzoom_load: float
    bw_hungry: bool = False
    # Zoom media loads by subflow, bits/s
    media: dict = field(default_factory=dict)

    @property
    def total_load(self) -> float:
        return self.zoom_load + self.nonzoom_load


def prb_demand(load_bps: float, bits_per_prb: int, interval_ms: float) -> int:
    if load_bps <= 0:
        return 0
    return math.ceil(load_bps * interval_ms / 1000.0 / bits_per_prb - 1e-9)


def high_priority_alloc_sim(load_bps: float, bits_per_prb: int, interval_ms: float) -> int:
    """PRBs to serve a prioritized load within one interval at strict priority."""
    return prb_demand(load_bps, bits_per_prb, interval_ms)


def alloc_sim(ues: Sequence[UeLoad], total_prb: int, interval_ms: float, policy: str = "RoundRobin") -> dict:
    """Default-scheduler allocation over one interval; bandwidth-hungry demand is unbounded."""
    demands = {}
    for u in ues:
        demands[u.ue] = INF if u.bw_hungry else prb_demand(u.total_load, u.bits_per_prb, interval_ms)
    metric = {u.ue: u.bits_per_prb for u in ues} if policy == "ProportionalFair" else None
    # with stationary loads the long-run PF share matches an equal split
    return allocate(demands, total_prb, "RoundRobin", [u.ue for u in ues], metric)


def nonzoom_prbs(ues: Sequence[UeLoad], total_prb: int, interval_ms: float, policy: str = "RoundRobin") -> tuple[float, dict]:
    prbs = alloc_sim(ues, total_prb, interval_ms, policy)
    used = 0.0
    for u in ues:
        if u.total_load > 0:
            share = u.nonzoom_load / u.total_load
        else:
            share = 1.0 if u.bw_hungry else 0.0
        used += prbs[u.ue] * share
    return used, prbs


def prioritized_load(action: Sequence[int], media: Mapping[str, float]) -> float:
    p_base, p_enh, p_audio = action
    load = 0.0
    if p_base:
        load += media.get("base", 0.0)
    if p_enh:
        load += media.get("enh", 0.0)
    if p_audio:
        load += media.get("audio", 0.0)
    return load


def fairness_score(total_prb: float, nonzoom: float, reserved: float) -> float:
    slack = total_prb - nonzoom
    excess = max(0.0, reserved - slack)
    return clip(excess / max(1.0, nonzoom))


def fairness_loss(
    K: Mapping,
    ues: Sequence[UeLoad],
    total_prb: int,
    interval_ms: float = 50.0,
    policy: str = "RoundRobin",
) -> float:
    """Share of ordinary traffic's PRBs displaced by prioritizing per K (keyed by UE id)."""
    U, _ = nonzoom_prbs(ues, total_prb, interval_ms, policy)
    R = 0
    for u in ues:
        action = K.get(u.ue, NO_PRIORITY)
        R += high_priority_alloc_sim(prioritized_load(action, u.media), u.bits_per_prb, interval_ms)
    return fairness_score(total_prb, U, R)


# -- optimization ---------------------------------------------------------------


@dataclass
class Problem:
    """One decision instance: q[i][j] in [0, 100], r[i][j] PRBs, per flow i and action j."""

    q: list
    r: list
    nonzoom: float
    total: float
    alpha: float
    beta: float
    actions: list  # actions[i][j] is the Action behind column j of flow i

    @property
    def slack(self) -> float:
        return self.total - self.nonzoom

    @property
    def cap(self) -> float:
        """Largest reserved PRB total that keeps the excess within its limit."""
        return self.slack + (1.0 - self.beta) * self.nonzoom

    @property
    def n(self) -> int:
        return len(self.q)


@dataclass
class Solution:
    choice: Optional[tuple]  # action column per flow; None means the all-(0,0,0) fallback
    actions: list
    objective: float
    excess: float
    reserved: float
    qoe_agg: float
    fairness: float
    fallback: bool
    nodes: int = 0


def excess_of(problem: Problem, reserved: float) -> float:
    return max(0.0, reserved - problem.slack)


def feasible_excess(problem: Problem, excess: float) -> bool:
    return excess <= (1.0 - problem.beta) * problem.nonzoom + 1e-9


def qoe_aggregate(problem: Problem, scores: Sequence[float]) -> float:
    if not scores:
        return 0.0
    return problem.alpha * min(scores) + (1 - problem.alpha) * (math.fsum(scores) / len(scores))


def objective_value(problem: Problem, choice: Sequence[int]) -> tuple[float, float, float, float]:
    """(objective, excess, reserved, qoe aggregate) for a full assignment."""
    scores = [problem.q[i][j] for i, j in enumerate(choice)]
    reserved = sum(problem.r[i][j] for i, j in enumerate(choice))
    e = excess_of(problem, reserved)
    qagg = qoe_aggregate(problem, scores)
    obj = (1 - problem.beta) * qagg + problem.beta * (1 - e / max(1.0, problem.nonzoom))
    return obj, e, reserved, qagg


def tie_key(problem: Problem, choice: Sequence[int]) -> tuple:
    acts = [problem.actions[i][j] for i, j in enumerate(choice)]
    return (sum(a.prioritized for a in acts), tuple(itertools.chain.from_iterable(acts)))


def _solution(problem: Problem, choice, nodes: int = 0) -> Solution:
    if choice is None:
        reserved = 0
        e = excess_of(problem, 0)
        scores = []
        acts = [NO_PRIORITY] * problem.n
        qagg = 0.0
        obj = (1 - problem.beta) * qagg + problem.beta * (1 - e / max(1.0, problem.nonzoom))
        return Solution(None, acts, obj, e, reserved, qagg, clip(e / max(1.0, problem.nonzoom)), True, nodes)
    obj, e, reserved, qagg = objective_value(problem, choice)
    acts = [problem.actions[i][j] for i, j in enumerate(choice)]
    return Solution(tuple(choice), acts, obj, e, reserved, qagg, clip(e / max(1.0, problem.nonzoom)), False, nodes)


def solve_enumeration(problem: Problem) -> Solution:
    """Exhaustive search; among objectives within tolerance of the best, smallest tie key wins."""
    evaluated = []
    best = -math.inf
    nodes = 0
    for choice in itertools.product(*(range(len(row)) for row in problem.q)):
        nodes += 1
        obj, e, _, _ = objective_value(problem, choice)
        if not feasible_excess(problem, e):
            continue
        evaluated.append((obj, choice))
        best = max(best, obj)
    if not evaluated:
        return _solution(problem, None, nodes)
    near = [c for o, c in evaluated if o >= best - TIE_TOLERANCE]
    choice = min(near, key=lambda c: tie_key(problem, c))
    return _solution(problem, choice, nodes)


class _Bounds:
    """Precomputed per-flow data for admissible bounds on partial assignments."""

    def __init__(self, problem: Problem):
        self.p = problem
        n = problem.n
        self.rmin = [min(row) for row in problem.r]
        self.suffix_rmin = [0] * (n + 1)
        for i in range(n - 1, -1, -1):
            self.suffix_rmin[i] = self.suffix_rmin[i + 1] + self.rmin[i]
        # upper convex hull of (r, q) per flow for the LP relaxation of the mean term
        self.hulls = [self._hull(problem.r[i], problem.q[i]) for i in range(n)]
        self.count_min = [min(a.prioritized for a in problem.actions[i]) for i in range(n)]
        self.suffix_count = [0] * (n + 1)
        for i in range(n - 1, -1, -1):
            self.suffix_count[i] = self.suffix_count[i + 1] + self.count_min[i]
        self.min_action = [min(problem.actions[i], key=lambda a: (a.prioritized, tuple(a))) for i in range(n)]
        # per flow: (q, cheapest r reaching at least q), q descending
        self.reach = []
        for i in range(n):
            pairs = sorted(zip(problem.q[i], problem.r[i]), key=lambda t: -t[0])
            best_r = math.inf
            rows = []
            for q, r in pairs:
                best_r = min(best_r, r)
                rows.append((q, best_r))
            self.reach.append(rows)

    @staticmethod
    def _hull(r_row, q_row):
        pts = sorted(set(zip(r_row, q_row)), key=lambda t: (t[0], -t[1]))
        # keep the best q for each r, then the undominated, concave frontier
        frontier = []
        for r, q in pts:
            if frontier and q <= frontier[-1][1]:
                continue
            while len(frontier) >= 2:
                (r1, q1), (r2, q2) = frontier[-2], frontier[-1]
                if (q2 - q1) * (r - r1) <= (q - q1) * (r2 - r1):
                    frontier.pop()
                else:
                    break
            frontier.append((r, q))
        return frontier

    def mean_bound(self, start: int, budget: float) -> float:
        """Upper bound on the sum of q over flows start.. given reserved budget."""
        if budget < 0:
            return -math.inf
        total = 0.0
        steps = []
        for i in range(start, self.p.n):
            hull = self.hulls[i]
            total += hull[0][1]
            budget -= hull[0][0]
            for (r1, q1), (r2, q2) in zip(hull, hull[1:]):
                steps.append(((q2 - q1) / (r2 - r1) if r2 > r1 else math.inf, r2 - r1, q2 - q1))
        if budget < 0:
            return -math.inf
        steps.sort(key=lambda s: -s[0])
        for slope, dr, dq in steps:
            if dr <= budget:
                total += dq
                budget -= dr
            else:
                total += slope * budget
                break
        return total

    def _cost_to_reach(self, i: int, z: float) -> float:
        cost = math.inf
        for q, r in self.reach[i]:
            if q < z:
                break
            cost = r
        return cost

    def min_bound(self, depth: int, min_q: float, budget: float) -> float:
        """Largest z every remaining flow can reach at once within the budget."""
        p = self.p
        if depth == p.n:
            return min_q
        candidates = {q for i in range(depth, p.n) for q in p.q[i] if q <= min_q}
        if min_q != math.inf:
            candidates.add(min_q)
        candidates = sorted(candidates)
        lo, hi = 0, len(candidates) - 1
        best = -math.inf
        while lo <= hi:
            mid = (lo + hi) // 2
            z = candidates[mid]
            need = 0.0
            for i in range(depth, p.n):
                need += self._cost_to_reach(i, z)
                if need > budget + 1e-9:
                    break
            if need <= budget + 1e-9:
                best = z
                lo = mid + 1
            else:
                hi = mid - 1
        return best

    def bound(self, depth: int, sum_q: float, min_q: float, reserved: float) -> float:
        p = self.p
        rest_r = reserved + self.suffix_rmin[depth]
        if rest_r > p.cap + 1e-9:
            return -math.inf
        mean_part = sum_q + self.mean_bound(depth, p.cap - reserved)
        if mean_part == -math.inf:
            return -math.inf
        z = self.min_bound(depth, min_q, p.cap - reserved) if p.alpha > 0 else 0.0
        if z == -math.inf:
            return -math.inf
        e_min = max(0.0, rest_r - p.slack)
        f = 1 - e_min / max(1.0, p.nonzoom)
        q_part = p.alpha * z + (1 - p.alpha) * mean_part / p.n
        return (1 - p.beta) * q_part + p.beta * f

    def optimistic_key(self, depth: int, prefix: tuple, count: int) -> tuple:
        suffix = tuple(itertools.chain.from_iterable(self.min_action[depth:]))
        return (count + self.suffix_count[depth], prefix + suffix)


def _solve_best_first(problem: Problem) -> Solution:
    """Best-first search, two passes: the optimal value, then the tie-break winner."""
    n = problem.n
    if n == 0:
        return _solution(problem, (), 0)
    b = _Bounds(problem)
    nodes = 0

    # pass 1: optimal objective value, seeded with two cheap full assignments
    best = -math.inf
    for pick in (
        lambda row_q, row_r: min(range(len(row_q)), key=lambda j: (row_r[j], -row_q[j])),
        lambda row_q, row_r: max(range(len(row_q)), key=lambda j: (row_q[j], -row_r[j])),
    ):
        guess = tuple(pick(problem.q[i], problem.r[i]) for i in range(n))
        obj, e, _, _ = objective_value(problem, guess)
        if feasible_excess(problem, e):
            best = max(best, obj)
    counter = itertools.count()
    root = b.bound(0, 0.0, math.inf, 0)
    # equal bounds pop deepest first so plateaus are walked depth-first
    heap = [(-root, 0, next(counter), 0, (), 0.0, math.inf, 0)] if root > best + BOUND_SLACK else []
    while heap:
        neg, _, _, depth, choice, sum_q, min_q, reserved = heapq.heappop(heap)
        if -neg <= best + BOUND_SLACK:
            break
        nodes += 1
        if depth == n:
            obj, e, _, _ = objective_value(problem, choice)
            if feasible_excess(problem, e) and obj > best:
                best = obj
            continue
        for j in range(len(problem.q[depth])):
            q = problem.q[depth][j]
            r = reserved + problem.r[depth][j]
            nq, nmin = sum_q + q, min(min_q, q)
            bd = b.bound(depth + 1, nq, nmin, r)
            if bd > best + BOUND_SLACK:
                heapq.heappush(heap, (-bd, -(depth + 1), next(counter), depth + 1, choice + (j,), nq, nmin, r))
    if best == -math.inf:
        return _solution(problem, None, nodes)

    # pass 2: smallest tie key among assignments within tolerance of the optimum
    threshold = best - TIE_TOLERANCE
    heap = [(b.optimistic_key(0, (), 0), next(counter), 0, (), 0.0, math.inf, 0, 0)]
    while heap:
        key, _, depth, choice, sum_q, min_q, reserved, count = heapq.heappop(heap)
        nodes += 1
        if depth == n:
            obj, e, _, _ = objective_value(problem, choice)
            if feasible_excess(problem, e) and obj >= threshold:
                return _solution(problem, choice, nodes)
            continue
        for j, act in enumerate(problem.actions[depth]):
            q = problem.q[depth][j]
            r = reserved + problem.r[depth][j]
            nq, nmin = sum_q + q, min(min_q, q)
            if b.bound(depth + 1, nq, nmin, r) < threshold - BOUND_SLACK:
                continue
            prefix = key[1][: 3 * depth] + tuple(act)
            ncount = count + act.prioritized
            heapq.heappush(
                heap,
                (b.optimistic_key(depth + 1, prefix, ncount), next(counter), depth + 1,
                 choice + (j,), nq, nmin, r, ncount),
            )
    # unreachable in exact arithmetic; fall back to enumeration semantics
    return solve_enumeration(problem)


class _FloorTables:
    """Suffix tables for one score floor z.

    tables[i][R] is the largest sum of q over flows i.. that reserves exactly R
    PRBs while every chosen q stays at or above z (-inf when impossible).
    """

    def __init__(self, problem: Problem, z: float, rmax: int):
        n = problem.n
        self.z = z
        self.allowed = [[j for j, q in enumerate(problem.q[i]) if q >= z] for i in range(n)]
        self.ok = all(self.allowed)
        tables = [None] * (n + 1)
        last = np.full(rmax + 1, -np.inf)
        last[0] = 0.0
        tables[n] = last
        for i in range(n - 1, -1, -1):
            nxt = tables[i + 1]
            cur = np.full(rmax + 1, -np.inf)
            for j in self.allowed[i]:
                r = int(problem.r[i][j])
                if r <= rmax:
                    np.maximum(cur[r:], nxt[: rmax + 1 - r] + problem.q[i][j], out=cur[r:])
            tables[i] = cur
        self.tables = tables


class _FloorSearch:
    """Exact optimum and tie-break search over integer PRB reservations.

    Every assignment is scored under the floor equal to its own minimum q, so the
    best value over all floors is the true optimum. Within a floor the objective
    depends only on (sum of q, reserved total), which the suffix tables cover
    exactly; the tables double as a perfect completion test for the tie-break pass.
    """

    def __init__(self, problem: Problem, rmax: int):
        p = self.p = problem
        self.rmax = rmax
        self.w_min = (1 - p.beta) * p.alpha
        self.w_sum = (1 - p.beta) * (1 - p.alpha) / p.n
        excess = np.maximum(0.0, np.arange(rmax + 1) - p.slack)
        self.f = p.beta * (1 - excess / max(1.0, p.nonzoom))
        self.nodes = 0

    def floors(self) -> list:
        if self.w_min == 0:
            return [-math.inf]
        top = min(max(row) for row in self.p.q)
        return sorted({q for row in self.p.q for q in row if q <= top}, reverse=True)

    def const(self, z: float) -> float:
        return 0.0 if z == -math.inf else self.w_min * z

    def scaled(self, tab: _FloorTables, i: int) -> np.ndarray:
        t = tab.tables[i]
        return np.where(np.isfinite(t), self.w_sum * np.where(np.isfinite(t), t, 0.0), -np.inf)

    def value(self, tab: _FloorTables) -> tuple[float, int]:
        vals = self.scaled(tab, 0) + self.f
        k = int(np.argmax(vals))
        return self.const(tab.z) + float(vals[k]), k

    def backtrack(self, tab: _FloorTables, reserved: int) -> tuple:
        p = self.p
        choice = []
        for i in range(p.n):
            target = tab.tables[i][reserved]
            for j in tab.allowed[i]:
                r = int(p.r[i][j])
                if r <= reserved and tab.tables[i + 1][reserved - r] + p.q[i][j] == target:
                    choice.append(j)
                    reserved -= r
                    break
        return tuple(choice)

    def best(self):
        """(best objective, a maximizing choice, floors that could hold near-ties)."""
        p = self.p
        top_sum = self.w_sum * sum(max(row) for row in p.q)
        found = []
        best, best_tab, best_r = -math.inf, None, 0
        for z in self.floors():
            if self.const(z) + top_sum + p.beta < best - TIE_TOLERANCE - ORACLE_SLACK:
                break
            tab = _FloorTables(p, z, self.rmax)
            if not tab.ok:
                continue
            self.nodes += 1
            v, k = self.value(tab)
            if v == -math.inf:
                continue
            found.append((v, tab))
            if v > best:
                best, best_tab, best_r = v, tab, k
        if best_tab is None:
            return None, None, []
        choice = self.backtrack(best_tab, best_r)
        obj = objective_value(p, choice)[0]
        return obj, choice, [tab for v, tab in found if v >= obj - TIE_TOLERANCE - ORACLE_SLACK]

    def smallest_key(self, tab: _FloorTables, threshold: float, incumbent: tuple, budget: int = HEAP_BUDGET):
        """Smallest tie key under this floor with objective >= threshold, or None
        once more than `budget` nodes have been expanded."""
        p = self.p
        n = p.n
        scaled = [self.scaled(tab, i) for i in range(n + 1)]
        c = self.const(tab.z)
        min_act = [min((p.actions[i][j] for j in tab.allowed[i]), key=lambda a: (a.prioritized, tuple(a))) for i in range(n)]
        suffix_count = [0] * (n + 1)
        for i in range(n - 1, -1, -1):
            suffix_count[i] = suffix_count[i + 1] + min_act[i].prioritized
        suffix_acts = [tuple(itertools.chain.from_iterable(min_act[i:])) for i in range(n + 1)]

        def reachable(depth, sum_q, reserved):
            room = self.rmax - reserved
            rest = scaled[depth][: room + 1] + self.f[reserved:]
            return c + self.w_sum * sum_q + float(rest.max()) >= threshold - ORACLE_SLACK

        best_key, best_choice = incumbent
        counter = itertools.count()
        heap = [((suffix_count[0], suffix_acts[0]), next(counter), 0, (), 0.0, 0, 0, ())]
        spent = 0
        while heap:
            key, _, depth, choice, sum_q, reserved, count, prefix = heapq.heappop(heap)
            if best_key is not None and key >= best_key:
                break
            self.nodes += 1
            spent += 1
            if spent > budget:
                return None
            if depth == n:
                obj, e, _, _ = objective_value(p, choice)
                if feasible_excess(p, e) and obj >= threshold:
                    best_key, best_choice = key, choice
                    break
                continue
            for j in tab.allowed[depth]:
                nres = reserved + int(p.r[depth][j])
                if nres > self.rmax:
                    continue
                nsum = sum_q + p.q[depth][j]
                if not reachable(depth + 1, nsum, nres):
                    continue
                act = p.actions[depth][j]
                ncount = count + act.prioritized
                nprefix = prefix + tuple(act)
                nkey = (ncount + suffix_count[depth + 1], nprefix + suffix_acts[depth + 1])
                heapq.heappush(heap, (nkey, next(counter), depth + 1, choice + (j,), nsum, nres, ncount, nprefix))
        return best_key, best_choice

    def smallest_key_by_count(self, tab: _FloorTables, threshold: float, incumbent: tuple):
        """Same answer as smallest_key, via tables that also track the prioritized count.

        The smallest feasible count comes straight from the tables; the action
        tuple is then fixed flow by flow, taking the first action in tuple order
        that still admits a completion with exactly the remaining count.
        """
        p = self.p
        n, rmax = p.n, self.rmax
        cmax = incumbent[0][0]
        tables = [None] * (n + 1)
        tables[n] = np.full((1, 1), 0.0)
        for i in range(n - 1, -1, -1):
            nxt = tables[i + 1]
            # a suffix can never exceed its own largest count or reservation
            ci = min(cmax, nxt.shape[0] - 1 + max(p.actions[i][j].prioritized for j in tab.allowed[i]))
            ri = min(rmax, nxt.shape[1] - 1 + max(int(p.r[i][j]) for j in tab.allowed[i]))
            cur = np.full((ci + 1, ri + 1), -np.inf)
            for j in tab.allowed[i]:
                k, r = p.actions[i][j].prioritized, int(p.r[i][j])
                if k <= ci and r <= ri:
                    h, w = min(nxt.shape[0], ci + 1 - k), min(nxt.shape[1], ri + 1 - r)
                    np.maximum(cur[k : k + h, r : r + w], nxt[:h, :w] + p.q[i][j], out=cur[k : k + h, r : r + w])
            tables[i] = cur
        c = self.const(tab.z)

        def reachable(depth, count, sum_q, reserved):
            if count >= tables[depth].shape[0]:
                return False
            t = tables[depth][count, : rmax - reserved + 1]
            fin = np.isfinite(t)
            if not fin.any():
                return False
            rest = self.w_sum * t[fin] + self.f[reserved : reserved + len(t)][fin]
            return c + self.w_sum * sum_q + float(rest.max()) >= threshold - ORACLE_SLACK

        target = next((k for k in range(cmax + 1) if reachable(0, k, 0.0, 0)), None)
        if target is None:
            return incumbent
        choice, sum_q, reserved, left = [], 0.0, 0, target
        for i in range(n):
            for j in sorted(tab.allowed[i], key=lambda j: tuple(p.actions[i][j])):
                act = p.actions[i][j]
                r = reserved + int(p.r[i][j])
                if act.prioritized <= left and r <= rmax and reachable(i + 1, left - act.prioritized, sum_q + p.q[i][j], r):
                    choice.append(j)
                    sum_q, reserved, left = sum_q + p.q[i][j], r, left - act.prioritized
                    break
            else:
                return incumbent
        self.nodes += n
        obj, e, _, _ = objective_value(p, choice)
        key = tie_key(p, choice)
        if feasible_excess(p, e) and obj >= threshold and key < incumbent[0]:
            return key, tuple(choice)
        return incumbent


def _integral(problem: Problem) -> bool:
    return all(float(r).is_integer() and r >= 0 for row in problem.r for r in row)


def solve_branch_and_bound(problem: Problem) -> Solution:
    """Exact solver matching enumeration, including its tie-break.

    Integer PRB reservations use the floor-indexed dynamic program above; anything
    else falls back to a plain best-first branch and bound.
    """
    n = problem.n
    if n == 0:
        return _solution(problem, (), 0)
    if not _integral(problem):
        return _solve_best_first(problem)
    rcap = math.floor(problem.cap + 1e-9)
    if rcap < sum(min(row) for row in problem.r):
        return _solution(problem, None, 0)
    search = _FloorSearch(problem, int(min(rcap, sum(max(row) for row in problem.r))))
    best, choice, floors = search.best()
    if choice is None:
        return _solution(problem, None, search.nodes)
    threshold = best - TIE_TOLERANCE
    incumbent = (tie_key(problem, choice), choice)
    for tab in floors:
        found = search.smallest_key(tab, threshold, incumbent)
        incumbent = found or search.smallest_key_by_count(tab, threshold, incumbent)
    return _solution(problem, incumbent[1], search.nodes)


def solve_problem(problem: Problem, enumeration_threshold: int = 6) -> Solution:
    if problem.n <= enumeration_threshold:
        return solve_enumeration(problem)
    return solve_branch_and_bound(problem)


# -- building instances from monitor reports -------------------------------------------


def ue_loads_from_report(report, direction: Direction) -> list[UeLoad]:
    out = []
    for (ue, d), u in sorted(report.ues.items(), key=lambda kv: kv[0][0]):
        if d is not direction:
            continue
        media = {c: u.loads[c] for c in ("base", "enh", "audio")}
        out.append(UeLoad(ue, max(1, u.bits_per_prb), u.zoom_load, u.nonzoom_load, u.bw_hungry, media))
    return out


@dataclass
class DirectionModel:
    """Fairness-model quantities shared by every candidate decision in one direction."""

    ues: list
    total_prb: int
    nonzoom: float
    default_prbs: dict
    interval_ms: float

    def ue(self, ue_id: int) -> Optional[UeLoad]:
        for u in self.ues:
            if u.ue == ue_id:
                return u
        return None

    def reserved(self, action: Sequence[int], ue_id: int) -> int:
        u = self.ue(ue_id)
        if u is None:
            return 0
        return high_priority_alloc_sim(prioritized_load(action, u.media), u.bits_per_prb, self.interval_ms)

    def default_zoom_bps(self, ue_id: int) -> float:
        u = self.ue(ue_id)
        if u is None or u.total_load <= 0:
            return 0.0
        prbs = self.default_prbs.get(ue_id, 0)
        return prbs * (u.zoom_load / u.total_load) * u.bits_per_prb * 1000.0 / self.interval_ms


def direction_model(report, direction: Direction, total_prb: int, interval_ms: float, policy: str) -> DirectionModel:
    ues = ue_loads_from_report(report, direction)
    U, prbs = nonzoom_prbs(ues, total_prb, interval_ms, policy)
    return DirectionModel(ues, total_prb, U, prbs, interval_ms)


def build_problem(flows: Sequence, model: DirectionModel, params: ControllerParams) -> Problem:
    q, r, acts = [], [], []
    for f in flows:
        q.append([100.0 * qoe_gain(a, f) for a in params.actions])
        r.append([model.reserved(a, f.ue) for a in params.actions])
        acts.append(list(params.actions))
    return Problem(q, r, model.nonzoom, model.total_prb, params.alpha, params.beta, acts)


# -- stabilization and shaping ----------------------------------------------------------


class Stabilizer:
    """Commits a new action only after it was proposed on enough consecutive intervals."""

    def __init__(self, params: ControllerParams):
        self.params = params
        self.committed: dict = {}
        self.pending: dict = {}

    def in_warmup(self, first_seen_ms: float, now_ms: float) -> bool:
        return now_ms - first_seen_ms < self.params.warmup_ms

    def stabilize(self, proposals: Mapping, now_ms: float, first_seen: Mapping) -> dict:
        out = {}
        need = self.params.hysteresis_multiple
        for flow, proposal in proposals.items():
            current = self.committed.setdefault(flow, FULL)
            warm = self.in_warmup(first_seen.get(flow, now_ms), now_ms)
            if proposal == current:
                self.pending.pop(flow, None)
            else:
                prev, count = self.pending.get(flow, (None, 0))
                count = count + 1 if prev == proposal else 1
                if count >= need and not warm:
                    self.committed[flow] = proposal
                    self.pending.pop(flow, None)
                else:
                    self.pending[flow] = (proposal, count)
            out[flow] = FULL if warm else self.committed[flow]
        return out


@dataclass
class ShapingDirectives:
    probe_drop_probability: float = 0.0
    enhancement_drop: bool = False


def shaping_directives(
    action: Sequence[int],
    direction: Direction,
    offered_bps: float,
    allocated_bps: float,
    in_warmup: bool = False,
) -> ShapingDirectives:
    enh_drop = tuple(action) == tuple(BASE_AUDIO) and direction is Direction.UPLINK
    if in_warmup or offered_bps <= 0 or offered_bps <= allocated_bps:
        p = 0.0
    else:
        p = clip((offered_bps - allocated_bps) / offered_bps)
    return ShapingDirectives(p, enh_drop and not in_warmup)


@dataclass
class FlowDecision:
    flow: str
    ue: int
    direction: Direction
    action: Action
    probe_drop_probability: float = 0.0
    enhancement_drop: bool = False
    epoch_ms: float = 0.0


DECISION_COLUMNS = (
    "interval", "flow", "proposed", "committed", "F", "Q_agg", "objective", "solve_time_ms",
)


class Controller:
    def __init__(
        self,
        params: Optional[ControllerParams] = None,
        total_prb: int = 3950,
        policy: str = "RoundRobin",
        probe_drop_override: Optional[float] = None,
        enhancement_drop_enabled: bool = True,
        timer=time.perf_counter,
    ):
        self.params = params or ControllerParams()
        self.total_prb = total_prb
        self.policy = policy
        self.stabilizer = Stabilizer(self.params)
        self.probe_drop_override = probe_drop_override
        self.enhancement_drop_enabled = enhancement_drop_enabled
        self.timer = timer
        self.log: list = []
        self.solve_times_ms: list = []

    def step(self, report, now_ms: float) -> dict:
        decisions = {}
        for direction in Direction:
            flows = sorted(report.flows_in(direction), key=lambda f: f.flow)
            if not flows:
                continue
            model = direction_model(report, direction, self.total_prb, self.params.interval_ms, self.policy)
            problem = build_problem(flows, model, self.params)
            t0 = self.timer()
            sol = solve_problem(problem, self.params.enumeration_threshold)
            elapsed = (self.timer() - t0) * 1000.0
            self.solve_times_ms.append(elapsed)
            proposals = {f.flow: a for f, a in zip(flows, sol.actions)}
            first_seen = {f.flow: f.first_seen_ms for f in flows}
            committed = self.stabilizer.stabilize(proposals, now_ms, first_seen)
            for f in flows:
                action = committed[f.flow]
                warm = self.stabilizer.in_warmup(f.first_seen_ms, now_ms)
                u = model.ue(f.ue)
                offered = sum(u.media.values()) if u else 0.0
                allocated = max(prioritized_load(action, u.media) if u else 0.0, model.default_zoom_bps(f.ue))
                sd = shaping_directives(action, direction, offered, allocated, warm)
                probe_p = sd.probe_drop_probability
                if self.probe_drop_override is not None and not warm:
                    probe_p = self.probe_drop_override
                decisions[f.flow] = FlowDecision(
                    f.flow, f.ue, direction, action, probe_p,
                    sd.enhancement_drop and self.enhancement_drop_enabled, now_ms,
                )
                self.log.append(
                    (report.interval, f.flow, str(proposals[f.flow]), str(action),
                     f"{sol.fairness:.6f}", f"{sol.qoe_agg:.6f}", f"{sol.objective:.6f}",
                     f"{elapsed:.3f}")
                )
        return decisions

    def write_log(self, path, include_timing: bool = False) -> None:
        write_decision_log(path, self.log, include_timing)


def write_decision_log(path, rows: Iterable, include_timing: bool = False) -> None:
    """Wall-clock solve times are blanked unless asked for, keeping runs byte-identical."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DECISION_COLUMNS)
        for row in rows:
            row = list(row)
            if not include_timing:
                row[-1] = ""
            w.writerow(row)


# -- marking -----------------------------------------------------------------------


def subflow_flag(action: Sequence[int], kind: SubflowKind) -> int:
    p_base, p_enh, p_audio = action
    if kind is SubflowKind.AUDIO:
        return p_audio
    if kind in ENHANCEMENT_KINDS or kind in (SubflowKind.PROBE, SubflowKind.SMALL_WINDOW_VIDEO):
        return p_enh
    return p_base  # base layer and control


class Marker:
    """Maps packets to priority classes and drop directives under the committed decisions."""

    def __init__(self, plugin: Optional[DpiPlugin] = None):
        self.plugin = plugin or get_plugin("zoom")
        self.decisions: dict = {}

    def update(self, decisions: Mapping) -> None:
        self.decisions.update(decisions)

    def mark(self, pkt: SimPacket, now_ms: float) -> PriorityClass:
        kind = self.plugin.classify(pkt)
        if kind is SubflowKind.BACKGROUND:
            return LOW
        dec = self.decisions.get(pkt.flow)
        if dec is None:
            return HIGH  # unseen flows are in warm-up
        if kind in ENHANCEMENT_KINDS and dec.enhancement_drop:
            return ALWAYS_DROP_CLASS
        level = Priority.HIGH if subflow_flag(dec.action, kind) else Priority.LOW
        if kind is SubflowKind.PROBE and dec.probe_drop_probability > 0:
            return PriorityClass(level, DropDirective.with_probability(dec.probe_drop_probability))
        return HIGH if level is Priority.HIGH else LOW


ALWAYS_DROP_CLASS = PriorityClass(Priority.LOW, ALWAYS_DROP)
