"""Segments, stage graphs and timed schedules.

A pipeline segment is one forward or backward pass of a sub-microbatch through
one layer group of a module, spread over all P ranks; its share on one rank is
a stage. Stage ``seg * P + rank`` is the stage of segment ``seg`` on ``rank``.
Forward and backward stages of the same segment pair and rank form a stage
pair; its activation memory is held from forward start to backward end.
"""

from __future__ import annotations

import csv
import heapq
import io
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

FW, BW = 0, 1
DIRECTIONS = ("fw", "bw")


class Deadlock(RuntimeError):
    pass


class Infeasible(ValueError):
    pass


@dataclass(frozen=True)
class MemoryStrategy:
    """One way to run a stage pair: per-layer strategy choices and totals."""

    choices: tuple[str, ...]
    fw: float
    bw: float
    mem: float

    @property
    def latency(self) -> float:
        return self.fw + self.bw


def fixed_strategy(fw: float, bw: float, mem: float = 0.0, name: str = "none") -> MemoryStrategy:
    return MemoryStrategy((name,), fw, bw, mem)


@dataclass(frozen=True)
class Segment:
    id: int
    module: str
    microbatch: int
    submb: int
    depth: int
    direction: int
    cls: int  # equivalence class index: one per (microbatch, module)

    @property
    def name(self) -> str:
        return f"{self.module}.mb{self.microbatch}.s{self.submb}.k{self.depth}.{DIRECTIONS[self.direction]}"


@dataclass(frozen=True)
class StageTask:
    id: int
    segment: int
    rank: int
    direction: int
    pair: int
    preds: tuple[tuple[int, float], ...]  # (stage, transfer delay)


@dataclass(frozen=True)
class StagePair:
    id: int
    rank: int
    fw: int
    bw: int
    candidates: tuple[MemoryStrategy, ...]  # memory descending, latency ascending

    @property
    def min_mem(self) -> int:
        return len(self.candidates) - 1


@dataclass(frozen=True)
class Unit:
    """One sub-microbatch as seen by the scheduler."""

    module: str
    microbatch: int
    submb: int
    depth: int  # K of its module


@dataclass
class Problem:
    P: int
    segments: list[Segment]
    stages: list[StageTask]
    pairs: list[StagePair]
    classes: list[tuple[int, str]]  # (microbatch, module) per class index
    capacity: list[float]  # activation bytes available per rank
    module_order: tuple[str, ...] = ()
    encoders: frozenset = frozenset()

    def __post_init__(self):
        self.succs: list[list[tuple[int, float]]] = [[] for _ in self.stages]
        for st in self.stages:
            for p, d in st.preds:
                self.succs[p].append((st.id, d))

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    def canonical_order(self) -> list[int]:
        return list(range(len(self.classes)))

    def latency(self, stage: int, choice: Sequence[int] | None = None) -> float:
        st = self.stages[stage]
        pair = self.pairs[st.pair]
        c = pair.candidates[pair.min_mem if choice is None else choice[st.pair]]
        return c.fw if st.direction == FW else c.bw

    def stage_name(self, stage: int) -> str:
        st = self.stages[stage]
        return f"{self.segments[st.segment].name}@r{st.rank}"

    def with_extra_preds(self, extra: Mapping[int, Iterable[tuple[int, float]]]) -> "Problem":
        stages = [
            StageTask(s.id, s.segment, s.rank, s.direction, s.pair, s.preds + tuple(extra.get(s.id, ())))
            for s in self.stages
        ]
        return Problem(self.P, self.segments, stages, self.pairs, self.classes, self.capacity,
                       self.module_order, self.encoders)

    def with_capacity(self, capacity: Sequence[float] | float) -> "Problem":
        if not isinstance(capacity, (list, tuple)):
            capacity = [capacity] * self.P
        return Problem(self.P, self.segments, self.stages, self.pairs, self.classes, list(capacity),
                       self.module_order, self.encoders)

    def with_candidates(self, pick: Callable[[StagePair], Sequence[MemoryStrategy]]) -> "Problem":
        pairs = [StagePair(p.id, p.rank, p.fw, p.bw, tuple(pick(p))) for p in self.pairs]
        return Problem(self.P, self.segments, self.stages, pairs, self.classes, self.capacity,
                       self.module_order, self.encoders)


def enumerate_segments(
    units: Sequence[Unit], module_order: Sequence[str]
) -> tuple[list[Segment], list[tuple[int, str]]]:
    """All forward and backward segments, ordered by (microbatch, module, sub-mb, depth, dir)."""
    rank = {m: i for i, m in enumerate(module_order)}
    units = sorted(units, key=lambda u: (u.microbatch, rank[u.module], u.submb))
    classes: list[tuple[int, str]] = []
    cls_of: dict[tuple[int, str], int] = {}
    segs = []
    for u in units:
        key = (u.microbatch, u.module)
        if key not in cls_of:
            cls_of[key] = len(classes)
            classes.append(key)
        for k in range(u.depth):
            for d in (FW, BW):
                segs.append(Segment(len(segs), u.module, u.microbatch, u.submb, k, d, cls_of[key]))
    return segs, classes


def build_problem(
    units: Sequence[Unit],
    P: int,
    edges: Sequence[tuple[str, str]],
    module_order: Sequence[str],
    candidates: Callable[[Unit, int, int], Sequence[MemoryStrategy]],
    p2p: Callable[[Unit], float] = lambda u: 0.0,
    capacity: Sequence[float] | float = float("inf"),
    edge_latency: Callable[[str, str], float] = lambda a, b: 0.0,
    encoders: Iterable[str] = (),
) -> Problem:
    """Stage dependency graph for ``units``.

    Forward stages run rank 0..P-1 and depth 0..K-1; backward stages run the
    reverse. A module's first forward waits for the last forward of every
    producer sub-microbatch of the same microbatch, and gradients flow back
    along the same edges. ``candidates(unit, depth, rank)`` prices a stage pair.
    """
    segs, classes = enumerate_segments(units, module_order)
    by_unit: dict[tuple[str, int, int], dict[tuple[int, int], int]] = {}
    unit_of: dict[tuple[str, int, int], Unit] = {}
    for u in units:
        unit_of[(u.module, u.microbatch, u.submb)] = u
    for s in segs:
        by_unit.setdefault((s.module, s.microbatch, s.submb), {})[(s.depth, s.direction)] = s.id

    def hop(a_rank: int, b_rank: int, u: Unit) -> float:
        return p2p(u) if a_rank != b_rank else 0.0

    preds: dict[int, list[tuple[int, float]]] = {}

    def sid(seg: int, rank: int) -> int:
        return seg * P + rank

    for key, segmap in by_unit.items():
        u = unit_of[key]
        K = u.depth
        for k in range(K):
            f, b = segmap[(k, FW)], segmap[(k, BW)]
            for r in range(P):
                fp, bp = [], [(sid(f, r), 0.0)]
                if r > 0:
                    fp.append((sid(f, r - 1), hop(r - 1, r, u)))
                elif k > 0:
                    fp.append((sid(segmap[(k - 1, FW)], P - 1), hop(P - 1, 0, u)))
                if r < P - 1:
                    bp.append((sid(b, r + 1), hop(r + 1, r, u)))
                elif k < K - 1:
                    bp.append((sid(segmap[(k + 1, BW)], 0), hop(0, P - 1, u)))
                preds[sid(f, r)] = fp
                preds[sid(b, r)] = bp

    # cross-module edges within a microbatch
    for prod, cons in edges:
        lat = edge_latency(prod, cons)
        for ckey, cmap in by_unit.items():
            if ckey[0] != cons:
                continue
            for pkey, pmap in by_unit.items():
                if pkey[0] != prod or pkey[1] != ckey[1]:
                    continue
                pu = unit_of[pkey]
                last_fw = sid(pmap[(pu.depth - 1, FW)], P - 1)
                first_fw = sid(cmap[(0, FW)], 0)
                d = hop(P - 1, 0, pu) + lat
                preds[first_fw].append((last_fw, d))
                preds[sid(pmap[(pu.depth - 1, BW)], P - 1)].append((sid(cmap[(0, BW)], 0), d))

    stages, pairs = [], []
    for s in segs:
        for r in range(P):
            i = sid(s.id, r)
            fw_seg = s.id if s.direction == FW else s.id - 1
            pair = fw_seg // 2 * P + r
            stages.append(StageTask(i, s.id, r, s.direction, pair, tuple(preds[i])))
    for s in segs:
        if s.direction != FW:
            continue
        u = unit_of[(s.module, s.microbatch, s.submb)]
        for r in range(P):
            cands = tuple(candidates(u, s.depth, r))
            if not cands:
                raise ValueError(f"no candidates for {s.name} on rank {r}")
            pairs.append(StagePair(len(pairs), r, sid(s.id, r), sid(s.id + 1, r), cands))
    if not isinstance(capacity, (list, tuple)):
        capacity = [capacity] * P
    return Problem(P, segs, stages, pairs, classes, list(capacity), tuple(module_order), frozenset(encoders))


@dataclass(frozen=True)
class ScheduledStage:
    stage: int
    name: str
    rank: int
    direction: str
    start: float
    end: float
    strategy: tuple[str, ...]


@dataclass
class Schedule:
    problem: Problem
    orders: list[list[int]]
    start: list[float]
    end: list[float]
    choice: list[int]
    sequence: list[int]  # every stage, in an order respecting deps and rank orders

    @property
    def makespan(self) -> float:
        return max(self.end, default=0.0) if self.sequence else 0.0

    def latency(self, stage: int) -> float:
        return self.problem.latency(stage, self.choice)

    def ranks(self) -> list[list[ScheduledStage]]:
        pb = self.problem
        out = []
        for r, order in enumerate(self.orders):
            row = []
            for s in order:
                st = pb.stages[s]
                cand = pb.pairs[st.pair].candidates[self.choice[st.pair]]
                row.append(ScheduledStage(s, pb.stage_name(s), r, DIRECTIONS[st.direction],
                                          self.start[s], self.end[s], cand.choices))
            out.append(row)
        return out

    def memory_events(self, rank: int) -> list[tuple[float, float]]:
        """(time, delta) per rank: +mem at forward start, -mem at backward end."""
        pb = self.problem
        ev = []
        for p in pb.pairs:
            if p.rank != rank:
                continue
            m = p.candidates[self.choice[p.id]].mem
            ev.append((self.start[p.fw], m))
            ev.append((self.end[p.bw], -m))
        # releases first at equal times: intervals are half-open
        ev.sort(key=lambda e: (e[0], e[1]))
        return ev

    def memory_timeline(self, rank: int) -> list[tuple[float, float]]:
        level, out = 0.0, []
        for t, d in self.memory_events(rank):
            level += d
            if out and out[-1][0] == t:
                out[-1] = (t, level)
            else:
                out.append((t, level))
        return out

    def peak_memory(self, rank: int | None = None) -> float:
        ranks = range(self.problem.P) if rank is None else [rank]
        return max((b for r in ranks for _, b in self.memory_timeline(r)), default=0.0)

    def bubble_fraction(self) -> float:
        """Idle share of the ranks' combined time up to the makespan."""
        T = self.makespan
        if T <= 0:
            return 0.0
        busy = sum(self.end[s] - self.start[s] for s in self.sequence)
        return 1.0 - busy / (T * self.problem.P)

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "makespan_s": self.makespan,
            "ranks": [
                [
                    {"stage": x.stage, "segment": x.name.split("@")[0], "direction": x.direction,
                     "start_s": x.start, "end_s": x.end, "strategy": list(x.strategy)}
                    for x in row
                ]
                for row in self.ranks()
            ],
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rank", "stage", "segment", "module", "microbatch", "direction", "start_s", "end_s", "strategy"])
        pb = self.problem
        for row in self.ranks():
            for x in row:
                seg = pb.segments[pb.stages[x.stage].segment]
                w.writerow([x.rank, x.stage, x.name.split("@")[0], seg.module, seg.microbatch,
                            x.direction, repr(x.start), repr(x.end), "+".join(x.strategy)])
        return buf.getvalue()


def makespan(schedule: Schedule | None) -> float:
    return 0.0 if schedule is None else schedule.makespan


def retime(problem: Problem, orders: Sequence[Sequence[int]], choice: Sequence[int] | None = None) -> Schedule:
    """Earliest start times given fixed per-rank orders (semi-active timing)."""
    if choice is None:
        choice = [p.min_mem for p in problem.pairs]
    n = problem.n_stages
    nxt = [-1] * n
    indeg = [len(st.preds) for st in problem.stages]
    for order in orders:
        for a, b in zip(order, order[1:]):
            nxt[a] = b
            indeg[b] += 1
    start, end = [0.0] * n, [0.0] * n
    free = [0.0] * problem.P
    ready = [s for s in range(n) if indeg[s] == 0]
    heapq.heapify(ready)
    seq = []
    while ready:
        s = heapq.heappop(ready)
        st = problem.stages[s]
        t = free[st.rank]
        for p, d in st.preds:
            t = max(t, end[p] + d)
        start[s] = t
        end[s] = t + problem.latency(s, choice)
        free[st.rank] = end[s]
        seq.append(s)
        for x, _ in problem.succs[s]:
            indeg[x] -= 1
            if indeg[x] == 0:
                heapq.heappush(ready, x)
        if nxt[s] >= 0:
            indeg[nxt[s]] -= 1
            if indeg[nxt[s]] == 0:
                heapq.heappush(ready, nxt[s])
    if len(seq) != n:
        raise Deadlock("rank orders contradict stage dependencies")
    return Schedule(problem, [list(o) for o in orders], start, end, list(choice), seq)


def validate_schedule(schedule: Schedule, tol: float = 1e-9) -> list[str]:
    """Independent check of placement, overlap, dependencies and memory."""
    pb = schedule.problem
    errs = []
    seen = [0] * pb.n_stages
    for r, order in enumerate(schedule.orders):
        for s in order:
            seen[s] += 1
            if pb.stages[s].rank != r:
                errs.append(f"{pb.stage_name(s)} placed on rank {r}")
    for s, c in enumerate(seen):
        if c != 1:
            errs.append(f"{pb.stage_name(s)} scheduled {c} times")
    if errs:
        return errs
    for s in range(pb.n_stages):
        dur = schedule.end[s] - schedule.start[s]
        if abs(dur - schedule.latency(s)) > tol * max(1.0, dur):
            errs.append(f"{pb.stage_name(s)} runs {dur} s, expected {schedule.latency(s)}")
        if schedule.start[s] < -tol:
            errs.append(f"{pb.stage_name(s)} starts before 0")
        for p, d in pb.stages[s].preds:
            if schedule.start[s] < schedule.end[p] + d - tol:
                errs.append(f"{pb.stage_name(s)} starts before {pb.stage_name(p)} delivers")
    for r in range(pb.P):
        spans = sorted((schedule.start[s], schedule.end[s], s) for s in schedule.orders[r])
        for (a0, a1, x), (b0, b1, y) in zip(spans, spans[1:]):
            if b0 < a1 - tol:
                errs.append(f"rank {r}: {pb.stage_name(x)} overlaps {pb.stage_name(y)}")
        level = 0.0
        cap = pb.capacity[r]
        for t, d in schedule.memory_events(r):
            level += d
            if level > cap * (1 + 1e-9) + 1e-6:
                errs.append(f"rank {r}: {level:.0f} bytes live at t={t} exceeds {cap:.0f}")
                break
    return errs
