"""Dual-queue greedy interleaving of forward and backward stages.

Every rank keeps its ready forward and backward stages in two queues. The
loop repeatedly picks the rank that can start work earliest and places one
stage there: when both a forward and a backward stage could start right away
it alternates with the previous type, which reproduces one-forward-one-
backward in steady state; otherwise it takes the stage that can start first.

Memory is gated per admission group: segments tied together by dependencies
(typically one microbatch, or one sub-microbatch of a lone module). A group's
forward stages may only start on a rank once the group is admitted there, and
admission reserves the group's whole activation footprint on that rank,
leaving room for every group that comes earlier in priority order and is not
yet admitted. The earliest unfinished group can therefore always proceed,
which rules out memory deadlocks whenever a single group fits. A group that
does not fit whole is admitted pair by pair instead, reserving only its
largest pair for as long as it waits.
"""

from __future__ import annotations

import heapq
import math
from typing import Sequence

from .core import BW, FW, Deadlock, Problem, Schedule

EVENT, T_MIN = "event", "t_min"


def priorities(problem: Problem, order: Sequence[int]) -> list[int]:
    """Class at position i of ``order`` gets priority n - i."""
    n = len(problem.classes)
    if sorted(order) != list(range(n)):
        raise ValueError("order must be a permutation of the classes")
    prio = [0] * n
    for i, c in enumerate(order):
        prio[c] = n - i
    return prio


def interleave_stages(
    problem: Problem,
    order: Sequence[int] | None = None,
    *,
    memory_gate: bool = True,
    rank_rule: str = T_MIN,
) -> Schedule:
    """Place every stage using the smallest-memory candidate of its pair.

    ``rank_rule`` picks the next rank: ``"t_min"`` (default) takes the rank
    with the smallest queued start time, ``"event"`` the rank whose next
    stage can actually start earliest (max of its last end and queued start
    times). Ties go to the lowest rank index.
    """
    pb = problem
    P = pb.P
    if order is None:
        order = pb.canonical_order()
    prio = priorities(pb, order)
    stages, segs = pb.stages, pb.segments
    n = len(stages)
    choice = [p.min_mem for p in pb.pairs]
    lat = [pb.latency(s, choice) for s in range(n)]
    seg_prio = [prio[seg.cls] for seg in segs]

    # admission groups: segments linked by dependencies, admitted in order
    # of their best class position
    parent = list(range(len(segs)))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for st in stages:
        for p, _ in st.preds:
            a, b = find(st.segment), find(stages[p].segment)
            if a != b:
                parent[max(a, b)] = min(a, b)
    pos = {c: i for i, c in enumerate(order)}
    rank_of: dict[int, tuple[int, int]] = {}
    for seg in segs:
        g = find(seg.id)
        rank_of[g] = min(rank_of.get(g, (len(order), seg.id)), (pos[seg.cls], seg.id))
    grp = {g: i for i, g in enumerate(sorted(rank_of, key=rank_of.get))}
    n_mb = len(grp)
    stage_mb = [grp[find(st.segment)] for st in stages]
    pair_mem = [p.candidates[p.min_mem].mem for p in pb.pairs]
    gate = memory_gate and any(math.isfinite(c) for c in pb.capacity)
    foot = [[0.0] * n_mb for _ in range(P)]
    for p in pb.pairs:
        foot[p.rank][stage_mb[p.fw]] += pair_mem[p.id]
    cap = [c * (1 + 1e-9) + 1e-6 for c in pb.capacity]
    # a group too large to reserve whole is admitted one pair at a time
    piecewise = [[foot[r][j] > cap[r] for j in range(n_mb)] for r in range(P)]
    reserve = [[0.0] * n_mb for _ in range(P)]
    for p in pb.pairs:
        j = stage_mb[p.fw]
        if piecewise[p.rank][j]:
            reserve[p.rank][j] = max(reserve[p.rank][j], pair_mem[p.id])
        else:
            reserve[p.rank][j] = foot[p.rank][j]
    if gate:
        for p in pb.pairs:
            if pair_mem[p.id] > cap[p.rank]:
                raise Deadlock(f"{pb.stage_name(p.fw)} needs {pair_mem[p.id]:.0f} bytes, "
                               f"{pb.capacity[p.rank]:.0f} available")
    admitted = [[False] * n_mb for _ in range(P)]
    committed = [0.0] * P

    def admissible(s: int) -> bool:
        r, j = stages[s].rank, stage_mb[s]
        if not gate or admitted[r][j] and not piecewise[r][j]:
            return True
        need = committed[r] + (pair_mem[stages[s].pair] if piecewise[r][j] else foot[r][j])
        for i in range(j):
            if not admitted[r][i]:
                need += reserve[r][i]
        return need <= cap[r]

    remaining = [len(st.preds) for st in stages]
    tstart = [0.0] * n
    fut = [[[], []] for _ in range(P)]  # keyed by start time
    avail = [[[], []] for _ in range(P)]  # keyed by priority
    blocked: list[list[int]] = [[] for _ in range(P)]
    t_last = [0.0] * P
    last_dir = [None] * P

    def key(s: int):
        return (-seg_prio[stages[s].segment], tstart[s], stages[s].segment, s)

    def push(s: int):
        st = stages[s]
        heapq.heappush(fut[st.rank][st.direction], (tstart[s],) + key(s))

    for s in range(n):
        if remaining[s] == 0:
            push(s)

    def refresh(r: int):
        for d in (FW, BW):
            f, a = fut[r][d], avail[r][d]
            while f and f[0][0] <= t_last[r]:
                item = heapq.heappop(f)
                heapq.heappush(a, item[1:])
        if gate:
            for heap, off in ((avail[r][FW], 3), (fut[r][FW], 4)):
                while heap and not admissible(heap[0][off]):
                    blocked[r].append(heapq.heappop(heap)[off])

    def rank_time(r: int) -> float:
        refresh(r)
        if rank_rule == EVENT:
            if avail[r][FW] or avail[r][BW]:
                return t_last[r]
            return min((f[0][0] for f in fut[r] if f), default=math.inf)
        vals = [x[1] for d in (FW, BW) for x in avail[r][d]]
        vals += [f[0][0] for f in fut[r] if f]
        return min(vals, default=math.inf)

    orders: list[list[int]] = [[] for _ in range(P)]
    start, end = [0.0] * n, [0.0] * n
    seq = []
    while len(seq) < n:
        best_r, best_t = -1, math.inf
        for r in range(P):
            t = rank_time(r)
            if t < best_t:
                best_r, best_t = r, t
        if best_r < 0:
            done = set(seq)
            left = [pb.stage_name(s) for s in range(n) if s not in done][:6]
            raise Deadlock(f"no rank can schedule; waiting: {left}")
        r = best_r
        a_fw, a_bw = avail[r][FW], avail[r][BW]
        if a_fw and a_bw:
            d = BW if last_dir[r] == FW else FW
            s = heapq.heappop(avail[r][d])[3]
        elif a_fw or a_bw:
            s = heapq.heappop(a_fw or a_bw)[3]
        else:
            heads = [f[0] for f in fut[r] if f]
            d = stages[min(heads)[4]].direction
            s = heapq.heappop(fut[r][d])[4]
        st = stages[s]
        if st.direction == FW and gate:
            j = stage_mb[s]
            if piecewise[r][j]:
                committed[r] += pair_mem[st.pair]
            elif not admitted[r][j]:
                committed[r] += foot[r][j]
            admitted[r][j] = True
        t0 = max(t_last[r], tstart[s])
        start[s], end[s] = t0, t0 + lat[s]
        t_last[r] = end[s]
        last_dir[r] = st.direction
        orders[r].append(s)
        seq.append(s)
        if st.direction == BW and gate:
            committed[r] -= pair_mem[st.pair]
            for b in blocked[r]:
                push(b)
            blocked[r].clear()
        for x, delay in pb.succs[s]:
            tstart[x] = max(tstart[x], end[s] + delay)
            remaining[x] -= 1
            if remaining[x] == 0:
                push(x)
    return Schedule(pb, orders, start, end, choice, seq)
