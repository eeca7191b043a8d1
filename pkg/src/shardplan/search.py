"""Minimum-time decision vector under the device memory limit.

Peak memory of a plan is ``sum(persistent) + max(transient surge) + fixed overhead``.
Ties on total time go to the lexicographically smallest vector of
``(slice_granularity, zdp_slices)`` in operator order.

Both the frontier search and the brute-force oracle compare plans in
exact integer arithmetic: every float in the table is a dyadic rational, so
scaling by a common power of two turns all sums and comparisons exact and makes
the result independent of summation order.
"""

from __future__ import annotations

import bisect
import math
import sys
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .costs import CostTable
from .errors import SearchTooLarge
from .model import DeviceSpec
from .splitting import Decision

BRUTE_FORCE_LIMIT = 10**7


@dataclass(frozen=True)
class PlanCandidate:
    decisions: tuple[Decision, ...]
    total_time_s: float
    peak_mem_bytes: float
    feasible: bool
    operator_ids: tuple[str, ...] = ()

    def decision_for(self, op_id: str) -> Decision:
        return self.decisions[self.operator_ids.index(op_id)]


def _common_scale(values) -> tuple[list[Fraction], int]:
    fracs = [Fraction(v) for v in values]
    den = 1
    for f in fracs:
        den = math.lcm(den, f.denominator)
    return fracs, den


class _ExactTable:
    """Integer-scaled view of a cost table plus the device constraint."""

    def __init__(self, table: CostTable, device: DeviceSpec):
        self.op_ids = table.operator_ids
        self.decisions = [[d for d, _ in table.entries[i]] for i in self.op_ids]
        flat = [c for i in self.op_ids for _, c in table.entries[i]]
        times, self.time_den = _common_scale([c.time_s for c in flat])
        mems, self.mem_den = _common_scale(
            [c.persistent_bytes for c in flat]
            + [c.transient_surge_bytes for c in flat]
            + [device.fixed_overhead_bytes, device.mem_limit_bytes]
        )
        n_flat = len(flat)
        pers = mems[:n_flat]
        surge = mems[n_flat : 2 * n_flat]
        self.overhead = int(mems[-2] * self.mem_den)
        self.limit = int(mems[-1] * self.mem_den)
        self.time = []
        self.pers = []
        self.surge = []
        pos = 0
        for opts in self.decisions:
            n = len(opts)
            self.time.append([int(t * self.time_den) for t in times[pos : pos + n]])
            self.pers.append([int(p * self.mem_den) for p in pers[pos : pos + n]])
            self.surge.append([int(s * self.mem_den) for s in surge[pos : pos + n]])
            pos += n

    def candidate(self, choice: Sequence[int]) -> PlanCandidate:
        t = sum(self.time[i][c] for i, c in enumerate(choice))
        peak = self.peak(choice)
        return PlanCandidate(
            decisions=tuple(self.decisions[i][c] for i, c in enumerate(choice)),
            total_time_s=t / self.time_den,
            peak_mem_bytes=peak / self.mem_den,
            feasible=peak <= self.limit,
            operator_ids=tuple(self.op_ids),
        )

    def peak(self, choice: Sequence[int]) -> int:
        pers = sum(self.pers[i][c] for i, c in enumerate(choice))
        surge = max((self.surge[i][c] for i, c in enumerate(choice)), default=0)
        return pers + surge + self.overhead


def evaluate_plan(table: CostTable, device: DeviceSpec, decisions: Sequence[Decision]) -> PlanCandidate:
    """Exact total time, peak memory and feasibility of a given decision vector."""
    ex = _ExactTable(table, device)
    if len(decisions) != len(ex.op_ids):
        raise ValueError(f"expected {len(ex.op_ids)} decisions, got {len(decisions)}")
    choice = [ex.decisions[i].index(d) for i, d in enumerate(decisions)]
    return ex.candidate(choice)


def _hull_segments(pers: list[int], time: list[int]):
    """Lower convex hull of an operator's (persistent, time) options.

    Returns (first, gains, costs, targets): the memory-minimal option index,
    then per hull edge the time saved, the extra bytes and the option reached.
    Ratios gain/cost are non-increasing along the hull.
    """
    pts = sorted(range(len(pers)), key=lambda c: (pers[c], time[c], c))
    first = pts[0]
    hull = [first]
    for c in pts[1:]:
        if time[c] >= time[hull[-1]]:
            continue
        while len(hull) >= 2:
            a, b = hull[-2], hull[-1]
            # drop b if it lies on or above the segment a -> c
            if (time[a] - time[b]) * (pers[c] - pers[a]) <= (time[a] - time[c]) * (pers[b] - pers[a]):
                hull.pop()
            else:
                break
        hull.append(c)
    gains, costs = [], []
    for a, b in zip(hull, hull[1:]):
        gains.append(time[a] - time[b])
        costs.append(pers[b] - pers[a])
    return first, gains, costs, hull[1:]


class _Frontier:
    """Non-dominated (surge, persistent, time) states of a set of operators.

    Stored per surge level as a staircase: persistent bytes ascending, time
    strictly descending. A state is dropped when another has no more surge, no
    more persistent memory and no more time.
    """

    __slots__ = ("levels", "size")

    def __init__(self, states):
        by_level: dict[int, list[tuple[int, int]]] = {}
        for surge, pers, time in states:
            by_level.setdefault(surge, []).append((pers, time))
        self.levels: list[tuple[int, list[int], list[int]]] = []
        lower_ps: list[int] = []
        lower_ts: list[int] = []
        self.size = 0
        for surge in sorted(by_level):
            ps, ts = [], []
            for pers, time in sorted(by_level[surge]):
                if ts and time >= ts[-1]:
                    continue
                # dominated by a state at a lower surge level?
                i = bisect.bisect_right(lower_ps, pers) - 1
                if i >= 0 and lower_ts[i] <= time:
                    continue
                ps.append(pers)
                ts.append(time)
            if not ps:
                continue
            self.levels.append((surge, ps, ts))
            self.size += len(ps)
            lower_ps, lower_ts = _merge_staircases(lower_ps, lower_ts, ps, ts)

    def __iter__(self):
        for surge, ps, ts in self.levels:
            for pers, time in zip(ps, ts):
                yield surge, pers, time

    def best_time(self, pers_used: int, surge_used: int, room: int) -> int | None:
        """Least time of a state that fits when combined with a prefix holding
        ``pers_used`` persistent bytes and ``surge_used`` surge, given ``room``
        bytes for persistent + surge in total."""
        best = None
        for surge, ps, ts in self.levels:
            budget = room - pers_used - max(surge_used, surge)
            i = bisect.bisect_right(ps, budget) - 1
            if i >= 0 and (best is None or ts[i] < best):
                best = ts[i]
        return best


def _merge_staircases(ps1, ts1, ps2, ts2):
    merged = sorted(zip(ps1 + ps2, ts1 + ts2))
    ps, ts = [], []
    for pers, time in merged:
        if ts and time >= ts[-1]:
            continue
        ps.append(pers)
        ts.append(time)
    return ps, ts


class _FrontierSearch:
    """Exact search in two passes.

    Backward: frontiers of every operator suffix. Forward: depth-first descent
    through operators in index order, children by increasing k, taking the first
    child from which the suffix frontier still reaches the optimal time. Leaves
    are met in lexicographic order, so the first optimal leaf is the
    lexicographically smallest optimum, and the exact suffix bound means the
    descent never backtracks.
    """

    def __init__(self, ex: _ExactTable, max_states: int | None = None):
        self.ex = ex
        self.n = len(ex.op_ids)
        self.max_states = max_states
        self.room = ex.limit - ex.overhead
        self.hulls = [_hull_segments(ex.pers[j], ex.time[j]) for j in range(self.n)]
        self.upper = self._greedy_upper_bound()
        self.frontiers: list[_Frontier | None] = [None] * (self.n + 1)
        self.states = 0

    def _greedy_upper_bound(self) -> int | None:
        """Time of a feasible plan built by taking hull segments in order of
        time saved per byte while they fit; None if even the memory-minimal
        choices do not fit."""
        ex = self.ex
        choice = [h[0] for h in self.hulls]
        pers = sum(ex.pers[j][c] for j, c in enumerate(choice))
        surges = [ex.surge[j][c] for j, c in enumerate(choice)]
        if pers + max(surges, default=0) > self.room:
            return None
        segs = []
        for j, (_, gains, costs, targets) in enumerate(self.hulls):
            for i in range(len(gains)):
                segs.append((Fraction(gains[i], costs[i]), j, i))
        segs.sort(key=lambda x: (-x[0], x[1], x[2]))
        taken = [0] * self.n
        top = max(surges, default=0)
        for _, j, i in segs:
            if taken[j] != i:
                continue
            _, gains, costs, targets = self.hulls[j]
            c = targets[i]
            new_surge = ex.surge[j][c]
            peak_surge = max(top, new_surge)
            if pers + costs[i] + peak_surge <= self.room:
                pers += costs[i]
                top = peak_surge
                choice[j] = c
                taken[j] += 1
        return sum(ex.time[j][c] for j, c in enumerate(choice))

    def _prefix_bounds(self):
        """For every prefix 0..j-1, breakpoints of its relaxed least time as a
        function of persistent bytes: (base_pers, base_time, cum_bytes, cum_gain)."""
        out = []
        base_pers = base_time = 0
        segs: list[tuple[Fraction, int, int]] = []
        for j in range(self.n + 1):
            cum_b, cum_g = [0], [0]
            for _, cost, gain in segs:
                cum_b.append(cum_b[-1] + cost)
                cum_g.append(cum_g[-1] + gain)
            out.append((base_pers, base_time, cum_b, cum_g))
            if j == self.n:
                break
            first, gains, costs, _ = self.hulls[j]
            base_pers += self.ex.pers[j][first]
            base_time += self.ex.time[j][first]
            for gain, cost in zip(gains, costs):
                bisect.insort(segs, (-Fraction(gain, cost), cost, gain))
        return out

    @staticmethod
    def _relaxed_time(bound, budget: int) -> int | None:
        """Lower bound on prefix time within ``budget`` persistent bytes, or None
        when the prefix cannot fit at all. Partial savings round up, so the
        bound never exceeds the true minimum."""
        base_pers, base_time, cum_b, cum_g = bound
        spare = budget - base_pers
        if spare < 0:
            return None
        i = bisect.bisect_right(cum_b, spare) - 1
        saved = cum_g[i]
        if i + 1 < len(cum_b):
            cost = cum_b[i + 1] - cum_b[i]
            gain = cum_g[i + 1] - cum_g[i]
            saved += -(-(gain * (spare - cum_b[i])) // cost)
        return base_time - saved

    def _build(self) -> None:
        ex = self.ex
        bounds = self._prefix_bounds()
        frontier = _Frontier([(0, 0, 0)])
        self.frontiers[self.n] = frontier
        upper = self.upper
        room = self.room
        bisect_right = bisect.bisect_right
        for j in range(self.n - 1, -1, -1):
            base_pers, base_time, cum_b, cum_g = bounds[j]
            last = len(cum_b) - 1
            options = list(zip(ex.time[j], ex.pers[j], ex.surge[j]))
            states = []
            for surge, pers, time in frontier:
                for t, p, s in options:
                    ss = surge if surge > s else s
                    pp = pers + p
                    tt = time + t
                    # the prefix must still fit next to this suffix and, given the
                    # incumbent, must be able to keep the total within its time;
                    # inlined form of _relaxed_time
                    spare = room - pp - ss - base_pers
                    if spare < 0:
                        continue
                    if upper is not None:
                        i = bisect_right(cum_b, spare) - 1
                        saved = cum_g[i]
                        if i < last:
                            saved += -(-((cum_g[i + 1] - saved) * (spare - cum_b[i])) // (cum_b[i + 1] - cum_b[i]))
                        if tt + base_time - saved > upper:
                            continue
                    states.append((ss, pp, tt))
            frontier = _Frontier(states)
            self.states += frontier.size
            if self.max_states is not None and frontier.size > self.max_states:
                raise SearchTooLarge(
                    f"exact search frontier reached {frontier.size} states at operator {j} of {self.n}; "
                    "too many distinct operators for exact search at this granularity"
                )
            self.frontiers[j] = frontier

    def run(self) -> list[int] | None:
        self._build()
        target = self.frontiers[0].best_time(0, 0, self.room)
        if target is None:
            return None
        ex = self.ex
        choice: list[int] = []
        pers = surge = time = 0
        for j in range(self.n):
            rest = self.frontiers[j + 1]
            for c in range(len(ex.time[j])):
                p = pers + ex.pers[j][c]
                s = max(surge, ex.surge[j][c])
                t = time + ex.time[j][c]
                reach = rest.best_time(p, s, self.room)
                if reach is not None and t + reach == target:
                    break
            else:  # pragma: no cover - the frontier guarantees a child reaches the target
                raise AssertionError("frontier descent lost the optimum")
            choice.append(c)
            pers, surge, time = p, s, t
        return choice


def _exhaustive_dfs(ex: _ExactTable) -> list[int] | None:
    """Unpruned depth-first enumeration in lexicographic order."""
    n = len(ex.op_ids)
    best: list = [None, None]

    def visit(j, choice, time, pers, surge):
        if j == n:
            if pers + surge + ex.overhead <= ex.limit and (best[0] is None or time < best[0]):
                best[0], best[1] = time, list(choice)
            return
        for c in range(len(ex.time[j])):
            choice.append(c)
            visit(j + 1, choice, time + ex.time[j][c], pers + ex.pers[j][c], max(surge, ex.surge[j][c]))
            choice.pop()

    old_limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(old_limit, n + 200))
    try:
        visit(0, [], 0, 0, 0)
    finally:
        sys.setrecursionlimit(old_limit)
    return best[1]


DEFAULT_MAX_STATES = 200_000


def search_optimal(
    table: CostTable, device: DeviceSpec, prune: bool = True, max_states: int | None = DEFAULT_MAX_STATES
) -> PlanCandidate | None:
    """Exact minimum-time plan; None when no decision vector fits.

    ``prune=False`` runs a plain exhaustive depth-first enumeration instead;
    the result is identical, only slower. Raises :class:`SearchTooLarge`
    rather than returning an unproven plan when a suffix frontier exceeds
    ``max_states``.
    """
    ex = _ExactTable(table, device)
    if prune:
        choice = _FrontierSearch(ex, max_states=max_states).run()
    else:
        choice = _exhaustive_dfs(ex)
    if choice is None:
        return None
    return ex.candidate(choice)


def brute_force_search(table: CostTable, device: DeviceSpec, limit: int = BRUTE_FORCE_LIMIT) -> PlanCandidate | None:
    """Exhaustive enumeration; same optimum and tie-break as :func:`search_optimal`."""
    ex = _ExactTable(table, device)
    sizes = [len(opts) for opts in ex.decisions]
    total = math.prod(sizes)
    if total > limit:
        raise SearchTooLarge(f"{total} decision vectors exceed the brute-force limit of {limit}")
    fits64 = (
        sum(max(t) for t in ex.time) < 2**62
        and sum(max(p) for p in ex.pers) + max(max(s) for s in ex.surge) + ex.overhead < 2**62
    )
    dtype = np.int64 if fits64 else object
    # outer sums flattened in C order enumerate vectors lexicographically
    time = np.zeros(1, dtype=dtype)
    pers = np.zeros(1, dtype=dtype)
    surge = np.zeros(1, dtype=dtype)
    for i in range(len(sizes)):
        time = np.add.outer(time, np.array(ex.time[i], dtype=dtype)).ravel()
        pers = np.add.outer(pers, np.array(ex.pers[i], dtype=dtype)).ravel()
        surge = np.maximum.outer(surge, np.array(ex.surge[i], dtype=dtype)).ravel()
    feasible = pers + surge + ex.overhead <= ex.limit
    if not feasible.any():
        return None
    idx = np.flatnonzero(feasible)
    best = idx[int(np.argmin(time[idx]))]
    choice = np.unravel_index(int(best), sizes)
    return ex.candidate([int(c) for c in choice])


def baseline_plans(table: CostTable, device: DeviceSpec) -> tuple[PlanCandidate, PlanCandidate]:
    """(all-DP, all-ZDP): every operator at its smallest / largest ``zdp_slices``."""
    ex = _ExactTable(table, device)
    all_dp = ex.candidate([0] * len(ex.op_ids))
    all_zdp = ex.candidate([len(opts) - 1 for opts in ex.decisions])
    return all_dp, all_zdp


def min_peak_memory(table: CostTable, device: DeviceSpec) -> float:
    """Smallest achievable peak memory over all decision vectors."""
    ex = _ExactTable(table, device)
    best = None
    thresholds = sorted({s for surges in ex.surge for s in surges})
    for cap in thresholds:
        total = 0
        for pers, surges in zip(ex.pers, ex.surge):
            allowed = [p for p, s in zip(pers, surges) if s <= cap]
            if not allowed:
                break
            total += min(allowed)
        else:
            value = total + cap + ex.overhead
            best = value if best is None else min(best, value)
    return best / ex.mem_den

