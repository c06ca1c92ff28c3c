"""Exact makespan optimum for tiny instances, by exhaustive search.

Some optimal schedule is semi-active: each stage starts as soon as its rank is
free and its inputs have arrived. Such schedules are fixed by the per-rank
stage orders, so the search appends one ready stage at a time to its rank in
every possible way, restricted to active schedules and pruned with a
work-and-tail lower bound. Memory is
an order constraint: on a rank, a pair is live from its forward until its
backward, and a forward may only be appended if the live pairs fit.
"""

from __future__ import annotations

import math
from typing import Sequence

from .core import FW, Infeasible, Problem, Schedule, retime

MAX_STAGES = 16


class TooLarge(ValueError):
    pass


def brute_force_schedule(
    problem: Problem, choice: Sequence[int] | None = None, upper: float = math.inf
) -> Schedule:
    """Minimum-makespan schedule with every pair fixed to ``choice``.

    ``choice`` defaults to the smallest-memory candidate of every pair.
    ``upper`` may seed the search with a known makespan to beat (ties kept).
    """
    pb = problem
    n = pb.n_stages
    if n > MAX_STAGES:
        raise TooLarge(f"{n} stages; the exhaustive oracle stops at {MAX_STAGES}")
    if choice is None:
        choice = [p.min_mem for p in pb.pairs]
    if n == 0:
        return retime(pb, [[] for _ in range(pb.P)], choice)
    lat = [pb.latency(s, choice) for s in range(n)]
    if any(x < 0 for x in lat):
        raise ValueError("latencies must be non-negative")
    mem = [pb.pairs[st.pair].candidates[choice[st.pair]].mem for st in pb.stages]

    # tail: longest path from a stage's start to the end of the iteration
    tail = [0.0] * n
    for s in reversed(_topo(pb)):
        tail[s] = lat[s] + max((d + tail[x] for x, d in pb.succs[s]), default=0.0)

    remaining = [len(st.preds) for st in pb.stages]
    end = [0.0] * n
    free = [0.0] * pb.P
    work = [0.0] * pb.P
    for s, st in enumerate(pb.stages):
        work[st.rank] += lat[s]
    live = [0.0] * pb.P
    orders: list[list[int]] = [[] for _ in range(pb.P)]
    ready = {s for s in range(n) if remaining[s] == 0}
    best = {"mk": upper * (1 + 1e-12) if math.isfinite(upper) else math.inf, "orders": None}

    def est(s: int) -> float:
        st = pb.stages[s]
        t = free[st.rank]
        for p, d in st.preds:
            t = max(t, end[p] + d)
        return t

    def fits(s: int) -> bool:
        st = pb.stages[s]
        return st.direction != FW or live[st.rank] + mem[s] <= pb.capacity[st.rank] * (1 + 1e-9) + 1e-6

    def dfs(done: int, mk: float):
        if done == n:
            if mk < best["mk"] or best["orders"] is None and mk <= best["mk"]:
                best["mk"], best["orders"] = mk, [list(o) for o in orders]
            return
        lb = max(mk, max(free[r] + work[r] for r in range(pb.P)))
        for s in ready:
            lb = max(lb, est(s) + tail[s])
        if lb >= best["mk"] and best["orders"] is not None or lb > best["mk"]:
            return
        cands = [s for s in ready if fits(s)]
        # active-schedule branching: if stage x completes first, the next
        # stage on its rank starts before x would end, else x could go first
        # without delaying anything. Moving a forward ahead adds live memory,
        # so the cut only applies when x is a backward or memory is unlimited.
        if cands:
            x = min(cands, key=lambda s: (est(s) + lat[s], s))
            r = pb.stages[x].rank
            if pb.stages[x].direction != FW or not math.isfinite(pb.capacity[r]):
                c = est(x) + lat[x]
                cands = [s for s in cands if s == x or pb.stages[s].rank == r and est(s) < c]
        for s in sorted(cands, key=lambda x: (est(x), x)):
            st = pb.stages[s]
            r = st.rank
            t0 = est(s)
            saved = free[r]
            end[s] = t0 + lat[s]
            free[r] = end[s]
            work[r] -= lat[s]
            live[r] += mem[s] if st.direction == FW else -mem[s]
            orders[r].append(s)
            ready.discard(s)
            newly = []
            for x, _ in pb.succs[s]:
                remaining[x] -= 1
                if remaining[x] == 0:
                    ready.add(x)
                    newly.append(x)
            dfs(done + 1, max(mk, end[s]))
            for x, _ in pb.succs[s]:
                remaining[x] += 1
            for x in newly:
                ready.discard(x)
            ready.add(s)
            orders[r].pop()
            live[r] -= mem[s] if st.direction == FW else -mem[s]
            work[r] += lat[s]
            free[r] = saved

    dfs(0, 0.0)
    if best["orders"] is None:
        raise Infeasible("no schedule fits the memory limit (or beats the given bound)")
    return retime(pb, best["orders"], choice)


def _topo(pb: Problem) -> list[int]:
    indeg = [len(st.preds) for st in pb.stages]
    stack = [s for s in range(pb.n_stages) if indeg[s] == 0]
    out = []
    while stack:
        s = stack.pop()
        out.append(s)
        for x, _ in pb.succs[s]:
            indeg[x] -= 1
            if indeg[x] == 0:
                stack.append(x)
    return out
