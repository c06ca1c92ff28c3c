"""Per-layer memory strategies: candidate generation and per-rank selection.

Candidates for a stage pair come from a multiple-choice knapsack over its
layers. Selection is a small 0-1 program per rank: one candidate per pair,
minimum total latency, and at every pair start the memory of the pairs live
at that instant within the rank's budget. Liveness only depends on the rank's
stage order, so the constraints are fixed before any retiming.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

from ..simulator.costs import LayerOption
from .core import Infeasible, MemoryStrategy, Schedule, retime

MEM_UNIT = 64 * 2**20
DEFAULT_S = 10
DEFAULT_GAP = 0.05


def pareto(cands: Sequence[MemoryStrategy]) -> list[MemoryStrategy]:
    """Non-dominated candidates, memory descending (latency ascending)."""
    out: list[MemoryStrategy] = []
    best = float("inf")
    for c in sorted(cands, key=lambda c: (c.mem, c.latency, c.choices)):
        if c.latency < best:
            out.append(c)
            best = c.latency
    return out[::-1]


def generate_candidates(
    layers: Sequence[Sequence[LayerOption]],
    S: int = DEFAULT_S,
    *,
    overhead: tuple[float, float] = (0.0, 0.0),
    unit: float = MEM_UNIT,
) -> list[MemoryStrategy]:
    """At most S strategies for one stage pair.

    Always includes the fastest and the smallest-memory combination. The
    memory range strictly between them is split into S-2 equal buckets and
    each bucket contributes its fastest combination, found by dynamic
    programming over memory quantized to ``unit`` bytes.
    """
    if S < 2:
        raise ValueError("S must be >= 2")
    if not layers:
        return [MemoryStrategy((), overhead[0], overhead[1], 0.0)]

    def make(opts: Sequence[LayerOption]) -> MemoryStrategy:
        return MemoryStrategy(
            tuple(o.strategy for o in opts),
            overhead[0] + sum(o.fw for o in opts),
            overhead[1] + sum(o.bw for o in opts),
            sum(o.mem for o in opts),
        )

    fastest = make([min(opts, key=lambda o: (o.latency, o.mem)) for opts in layers])
    leanest = make([min(opts, key=lambda o: (o.mem, o.latency)) for opts in layers])
    out = [fastest, leanest]
    lo, hi = leanest.mem, fastest.mem
    if S > 2 and hi > lo:
        # state: quantized memory -> (latency, exact memory, chosen option indices)
        states: dict[int, tuple[float, float, tuple[int, ...]]] = {0: (0.0, 0.0, ())}
        for opts in layers:
            nxt: dict[int, tuple[float, float, tuple[int, ...]]] = {}
            for q, (lat, mem, idx) in states.items():
                for j, o in enumerate(opts):
                    key = q + round(o.mem / unit)
                    val = (lat + o.latency, mem + o.mem, idx + (j,))
                    cur = nxt.get(key)
                    if cur is None or val < cur:
                        nxt[key] = val
            states = nxt
        width = (hi - lo) / (S - 2)
        buckets: dict[int, tuple[float, float, tuple[int, ...]]] = {}
        for lat, mem, idx in states.values():
            if lo < mem < hi:
                b = min(int((mem - lo) / width), S - 3)
                if b not in buckets or (lat, mem, idx) < buckets[b]:
                    buckets[b] = (lat, mem, idx)
        for b in sorted(buckets):
            idx = buckets[b][2]
            out.append(make([layers[i][j] for i, j in enumerate(idx)]))
    seen, uniq = set(), []
    for c in out:
        if (c.mem, c.latency) not in seen:
            seen.add((c.mem, c.latency))
            uniq.append(c)
    return pareto(uniq)


def rank_constraints(schedule: Schedule, rank: int) -> tuple[list[int], list[list[int]]]:
    """Pairs on ``rank`` in order of forward start, and the live sets.

    Pair i is live when pair k starts iff fw_i <= fw_k < bw_i in rank order.
    Live sets contained in another are dropped.
    """
    pb = schedule.problem
    pos = {s: i for i, s in enumerate(schedule.orders[rank])}
    pairs = sorted((p for p in pb.pairs if p.rank == rank), key=lambda p: pos[p.fw])
    sets = []
    for k in pairs:
        fk = pos[k.fw]
        sets.append(frozenset(j for j, i in enumerate(pairs) if pos[i.fw] <= fk < pos[i.bw]))
    uniq = sorted(set(sets), key=lambda s: (-len(s), sorted(s)))
    kept: list[frozenset] = []
    for s in uniq:
        if not any(s <= t for t in kept):
            kept.append(s)
    return [p.id for p in pairs], [sorted(s) for s in sorted(kept, key=sorted)]


@dataclass
class IlpResult:
    choice: list[int]
    objective: float
    bound: float
    nodes: int
    complete: bool  # search finished, so objective <= (1+gap) * optimum
    seconds: float


def _hull(cands: Sequence[tuple[float, float]]) -> list[tuple[float, float]]:
    """Lower convex hull steps from the smallest-memory candidate.

    Returns (memory added, latency saved) per step with non-increasing
    savings per byte, which is what the fractional bound consumes.
    """
    pts = sorted(set(cands), key=lambda c: (c[1], c[0]))
    # keep the cheapest latency per memory, then Pareto
    front = []
    for lat, mem in pts:
        if not front or lat < front[-1][0]:
            front.append((lat, mem))
    hull: list[tuple[float, float]] = []
    for p in front:
        while len(hull) >= 2:
            (l1, m1), (l2, m2) = hull[-2], hull[-1]
            # drop the middle point if it is not below the chord
            if (l2 - l1) * (p[1] - m1) >= (p[0] - l1) * (m2 - m1):
                hull.pop()
            else:
                break
        hull.append(p)
    return [(b[1] - a[1], a[0] - b[0]) for a, b in zip(hull, hull[1:])]


def solve_rank(
    cands: Sequence[Sequence[tuple[float, float]]],
    constraints: Sequence[Sequence[int]],
    cap: float,
    gap: float = DEFAULT_GAP,
    node_limit: int = 200_000,
) -> IlpResult:
    """Branch and bound for the per-rank selection problem.

    ``cands[i]`` lists (latency, memory) options of pair i. Warm-started
    greedily; subtrees whose fractional bound cannot beat the incumbent by
    more than ``gap`` are pruned.
    """
    t0 = time.perf_counter()
    n = len(cands)
    eps = 1e-9 * max(1.0, cap if cap < float("inf") else 1.0)
    if n == 0:
        return IlpResult([], 0.0, 0.0, 0, True, 0.0)
    in_con: list[list[int]] = [[] for _ in range(n)]
    for ci, con in enumerate(constraints):
        for i in con:
            in_con[i].append(ci)
    min_mem = [min(m for _, m in c) for c in cands]
    min_lat = [min(l for l, _ in c) for c in cands]
    lat_at_min_mem = [min(l for l, m in c if m == mm) for c, mm in zip(cands, min_mem)]
    hulls = [_hull(c) for c in cands]

    def usage(choice, con):
        return sum(cands[i][choice[i]][1] for i in con)

    for con in constraints:
        if sum(min_mem[i] for i in con) > cap + eps:
            raise Infeasible(f"{sum(min_mem[i] for i in con):.0f} bytes needed, {cap:.0f} available")

    # greedy warm start: fastest everywhere, then repair the worst violation
    # with the move that frees the most memory per second of latency
    order = [sorted(range(len(c)), key=lambda j: (c[j][0], c[j][1])) for c in cands]
    choice = [o[0] for o in order]
    while True:
        worst, over = None, eps
        for con in constraints:
            x = usage(choice, con) - cap
            if x > over:
                worst, over = con, x
        if worst is None:
            break
        best_move, best_ratio = None, -1.0
        for i in worst:
            l0, m0 = cands[i][choice[i]]
            for j, (l1, m1) in enumerate(cands[i]):
                if m1 < m0:
                    ratio = (m0 - m1) / (l1 - l0) if l1 > l0 else float("inf")
                    if ratio > best_ratio or (ratio == best_ratio and (i, j) < best_move):
                        best_move, best_ratio = (i, j), ratio
        if best_move is None:
            raise Infeasible("greedy repair failed")
        choice[best_move[0]] = best_move[1]
    incumbent = list(choice)
    best = sum(cands[i][choice[i]][0] for i in range(n))
    root_lb = sum(min_lat)
    if best <= root_lb * (1 + 1e-12):
        return IlpResult(incumbent, best, root_lb, 1, True, time.perf_counter() - t0)

    # branch on pairs that appear in the most constraints first
    branch = sorted(range(n), key=lambda i: (-len(in_con[i]), i))
    fixed: list[int | None] = [None] * n

    con_sets = [set(c) for c in constraints]

    def bound() -> float:
        val = [cands[i][fixed[i]][0] if fixed[i] is not None else min_lat[i] for i in range(n)]
        base = sum(val)
        lb = base
        for con, members in zip(constraints, con_sets):
            room = cap
            lat = 0.0
            steps = []
            for i in con:
                if fixed[i] is not None:
                    room -= cands[i][fixed[i]][1]
                    lat += cands[i][fixed[i]][0]
                else:
                    room -= min_mem[i]
                    lat += lat_at_min_mem[i]
                    steps.extend(hulls[i])
            if room < -eps:
                return float("inf")
            steps.sort(key=lambda s: s[1] / s[0] if s[0] > 0 else float("inf"), reverse=True)
            for dm, dl in steps:
                if dm <= room:
                    room -= dm
                    lat -= dl
                else:
                    lat -= dl * room / dm
                    break
            lb = max(lb, lat + base - sum(val[i] for i in members))
        return lb

    nodes = 0
    complete = True
    global_lb = bound()

    def dfs(depth: int):
        nonlocal best, incumbent, nodes, complete
        if nodes >= node_limit:
            complete = False
            return
        nodes += 1
        if depth == n:
            val = sum(cands[i][fixed[i]][0] for i in range(n))
            if val < best:
                best, incumbent = val, list(fixed)
            return
        i = branch[depth]
        for j in order[i]:
            fixed[i] = j
            ok = all(
                sum(cands[x][fixed[x]][1] if fixed[x] is not None else min_mem[x] for x in constraints[c]) <= cap + eps
                for c in in_con[i]
            )
            if ok and bound() * (1 + gap) < best:
                dfs(depth + 1)
            fixed[i] = None

    if global_lb * (1 + gap) < best:
        dfs(0)
    return IlpResult(incumbent, best, min(global_lb, best), nodes, complete, time.perf_counter() - t0)


def optimize_memory(
    schedule: Schedule, gap: float = DEFAULT_GAP, node_limit: int = 200_000
) -> tuple[Schedule, list[IlpResult]]:
    """Choose a candidate per stage pair on every rank, then retime.

    The stage order of ``schedule`` is kept; only latencies and memory change.
    """
    pb = schedule.problem
    choice = list(schedule.choice)
    results = []
    for r in range(pb.P):
        ids, cons = rank_constraints(schedule, r)
        cands = [[(c.latency, c.mem) for c in pb.pairs[i].candidates] for i in ids]
        res = solve_rank(cands, cons, pb.capacity[r], gap, node_limit)
        for i, j in zip(ids, res.choice):
            choice[i] = j
        results.append(res)
    return retime(pb, schedule.orders, choice), results
