"""Shared instance generators and independent checkers for the test suite.

Nothing here imports the scheduler's own validation or search code: these are
second routes used to cross-check it.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass

from mmpipe.scheduler.core import FW, MemoryStrategy, Problem, Schedule, Unit, build_problem, fixed_strategy, retime

MODS = ("enc_a", "enc_b", "backbone")


@dataclass
class Instance:
    problem: Problem
    units: list
    edges: list
    p2p: float
    edge_lat: float


def random_instance(
    rng: random.Random,
    *,
    max_P: int = 8,
    max_mb: int = 16,
    max_mods: int = 3,
    max_submb: int = 3,
    max_depth: int = 3,
    capacity: str = "random",
    n_cands: int = 1,
    shared_costs: bool = False,
    max_stages: int | None = None,
) -> Instance:
    """Random multi-module instance: encoders feed a backbone per microbatch."""
    while True:
        P = rng.randint(1, max_P)
        n_mods = rng.randint(1, max_mods)
        mods = list(MODS[-n_mods:])
        depth = {m: rng.randint(1, max_depth) for m in mods}
        units = []
        for j in range(rng.randint(1, max_mb)):
            for m in mods:
                # encoders may be absent from a microbatch
                if m != "backbone" and rng.random() < 0.2:
                    continue
                for s in range(rng.randint(1, max_submb) if m != "backbone" else 1):
                    units.append(Unit(m, j, s, depth[m]))
        if max_stages is None or 2 * P * sum(u.depth for u in units) <= max_stages:
            break
    edges = [(m, "backbone") for m in mods if m != "backbone"]
    p2p = rng.choice([0.0, 0.0, 0.05, 0.2])
    edge_lat = rng.choice([0.0, 0.1])
    cache: dict = {}

    def cands(u: Unit, d: int, r: int) -> list[MemoryStrategy]:
        key = (u.module, u.microbatch, d, r) if shared_costs else (u.module, u.microbatch, u.submb, d, r)
        if key not in cache:
            out = []
            for i in range(n_cands):
                f = rng.uniform(0.5, 2.0) * (1 + 0.3 * i)
                out.append(MemoryStrategy((f"s{i}",), f, f * rng.uniform(1.5, 2.5), rng.uniform(1, 4) / (1 + i)))
            out.sort(key=lambda c: -c.mem)
            cache[key] = out
        return cache[key]

    pb = build_problem(units, P, edges, mods, cands, lambda u: p2p, math.inf,
                       edge_latency=lambda a, b: edge_lat, encoders=[m for m in mods if m != "backbone"])
    if capacity == "random" and rng.random() < 0.5:
        # one microbatch holds all of its pairs on a rank at once, so that
        # footprint is the smallest capacity any schedule can live with
        need = [0.0] * P
        for r in range(P):
            per_mb: dict[int, float] = {}
            for p in pb.pairs:
                if p.rank == r:
                    mb = pb.segments[pb.stages[p.fw].segment].microbatch
                    per_mb[mb] = per_mb.get(mb, 0.0) + p.candidates[p.min_mem].mem
            need[r] = max(per_mb.values())
        pb = pb.with_capacity([x * rng.uniform(1.0, 3.0) for x in need])
    return Instance(pb, units, edges, p2p, edge_lat)


def expected_preds(inst: Instance) -> dict[int, set[tuple[int, float]]]:
    """Stage dependencies re-derived from segment identities alone."""
    pb = inst.problem
    P = pb.P
    by_key = {}
    for seg in pb.segments:
        by_key[(seg.module, seg.microbatch, seg.submb, seg.depth, seg.direction)] = seg.id
    depth = {(u.module, u.microbatch, u.submb): u.depth for u in inst.units}
    out: dict[int, set] = {s.id: set() for s in pb.stages}

    def sid(seg, r):
        return seg * P + r

    for seg in pb.segments:
        key = (seg.module, seg.microbatch, seg.submb)
        K = depth[key]
        for r in range(P):
            me = sid(seg.id, r)
            hop = inst.p2p
            if seg.direction == FW:
                if r > 0:
                    out[me].add((sid(seg.id, r - 1), hop if P > 1 else 0.0))
                elif seg.depth > 0:
                    prev = by_key[key + (seg.depth - 1, FW)]
                    out[me].add((sid(prev, P - 1), hop if P > 1 else 0.0))
            else:
                out[me].add((sid(by_key[key + (seg.depth, FW)], r), 0.0))
                if r < P - 1:
                    out[me].add((sid(seg.id, r + 1), hop))
                elif seg.depth < K - 1:
                    nxt = by_key[key + (seg.depth + 1, 1)]
                    out[me].add((sid(nxt, 0), hop if P > 1 else 0.0))
    for prod, cons in inst.edges:
        for pk, pd in depth.items():
            if pk[0] != prod:
                continue
            for ck in depth:
                if ck[0] != cons or ck[1] != pk[1]:
                    continue
                d = (inst.p2p if P > 1 else 0.0) + inst.edge_lat
                last_fw = by_key[pk + (pd - 1, FW)]
                first_fw = by_key[ck + (0, FW)]
                out[sid(first_fw, 0)].add((sid(last_fw, P - 1), d))
                out[sid(last_fw + 1, P - 1)].add((sid(first_fw + 1, 0), d))
    return out


def violations(schedule: Schedule, inst: Instance | None = None, tol: float = 1e-9) -> list[str]:
    """Re-check a schedule from scratch: placement, durations, overlap, deps, memory."""
    pb = schedule.problem
    errs = []
    placed = sorted(s for o in schedule.orders for s in o)
    if placed != list(range(pb.n_stages)):
        return ["stages missing or duplicated"]
    preds = expected_preds(inst) if inst else {s.id: set(s.preds) for s in pb.stages}
    choice = schedule.choice
    for st in pb.stages:
        c = pb.pairs[st.pair].candidates[choice[st.pair]]
        want = c.fw if st.direction == FW else c.bw
        if abs(schedule.end[st.id] - schedule.start[st.id] - want) > tol:
            errs.append(f"stage {st.id}: wrong duration")
        for p, d in preds[st.id]:
            if schedule.start[st.id] + tol < schedule.end[p] + d:
                errs.append(f"stage {st.id} starts before pred {p}")
    for r, order in enumerate(schedule.orders):
        if any(pb.stages[s].rank != r for s in order):
            errs.append(f"rank {r}: foreign stage")
        iv = sorted((schedule.start[s], schedule.end[s]) for s in order)
        for a, b in zip(iv, iv[1:]):
            if b[0] + tol < a[1]:
                errs.append(f"rank {r}: overlap")
        # memory: sweep half-open [fw start, bw end) intervals
        ev = []
        for p in pb.pairs:
            if p.rank == r:
                m = p.candidates[choice[p.id]].mem
                ev.append((schedule.end[p.bw], 0, -m))
                ev.append((schedule.start[p.fw], 1, m))
        level = 0.0
        for _, _, d in sorted(ev):
            level += d
            if level > pb.capacity[r] * (1 + 1e-9) + 1e-9:
                errs.append(f"rank {r}: memory {level} over {pb.capacity[r]}")
                break
    return errs


def plain_oracle(pb: Problem) -> float:
    """Minimum makespan by enumerating every per-rank stage sequence.

    Appends any ready stage to its rank and times it as early as possible;
    memory is checked on the finished schedule. Only a trivial bound prunes.
    """
    choice = [p.min_mem for p in pb.pairs]
    n = pb.n_stages
    remaining = [len(st.preds) for st in pb.stages]
    orders = [[] for _ in range(pb.P)]
    end = [0.0] * n
    free = [0.0] * pb.P
    best = [math.inf]

    def rec(done: int, mk: float, ready: list[int]):
        if mk >= best[0] - 1e-12:
            return
        if done == n:
            s = retime(pb, orders, choice)
            if not violations(s):
                best[0] = min(best[0], s.makespan)
            return
        for s in list(ready):
            st = pb.stages[s]
            t = free[st.rank]
            for p, d in st.preds:
                t = max(t, end[p] + d)
            saved = free[st.rank]
            end[s] = t + pb.latency(s, choice)
            free[st.rank] = end[s]
            orders[st.rank].append(s)
            nxt = [x for x in ready if x != s]
            for x, _ in pb.succs[s]:
                remaining[x] -= 1
                if remaining[x] == 0:
                    nxt.append(x)
            rec(done + 1, max(mk, end[s]), nxt)
            for x, _ in pb.succs[s]:
                remaining[x] += 1
            orders[st.rank].pop()
            free[st.rank] = saved

    rec(0, 0.0, [s for s in range(n) if remaining[s] == 0])
    return best[0]


def uniform_chain(n: int, P: int, fw: float, bw: float, mem: float = 0.0, p2p: float = 0.0, cap=math.inf):
    units = [Unit("m", j, 0, 1) for j in range(n)]
    return build_problem(units, P, (), ("m",), lambda u, d, r: [fixed_strategy(fw, bw, mem)], lambda u: p2p, cap)
