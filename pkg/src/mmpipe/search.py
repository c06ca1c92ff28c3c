"""Per-iteration planning loop: partition a batch, search orders, keep the best.

A rollout evaluates one class order: dual-queue interleaving followed by
per-rank memory selection, scored by makespan. With several workers the
rollout batches run in worker processes while the tree stays in the calling
thread, which applies every returned batch as one update.
"""

from __future__ import annotations

import csv
import io
import math
import os
import random
import threading
import time
from concurrent.futures import FIRST_COMPLETED, ProcessPoolExecutor, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

from .model import ENCODER, DeviceSpec
from .partitioner import SegmentPlan, SubMicrobatch
from .scheduler.core import Deadlock, Infeasible, MemoryStrategy, Problem, Schedule, Unit, build_problem
from .scheduler.interleave import T_MIN, interleave_stages
from .scheduler.mcts import (
    DEFAULT_ALPHA,
    DEFAULT_BETA,
    DEFAULT_ROLLOUTS,
    EXPLORERS,
    MctsTree,
    SearchResult,
    Tracker,
)
from .scheduler.memory import DEFAULT_GAP, DEFAULT_S, generate_candidates, optimize_memory
from .simulator.costs import CostModel
from .workload import BatchMeta


def auto_workers(cores: int | None = None) -> int:
    """Half the usable cores, at least one."""
    if cores is None:
        try:
            cores = len(os.sched_getaffinity(0))
        except AttributeError:
            cores = os.cpu_count() or 1
    return max(1, cores // 2)


@dataclass
class SearchBudget:
    wall_clock_ms: float = 1000.0
    workers: int | None = None  # None: half the cores
    max_rollouts: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.wall_clock_ms <= 0:
            raise ValueError("wall_clock_ms must be positive")
        if self.workers is None:
            self.workers = auto_workers()
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass
class SearchConfig:
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    rollouts_per_expand: int = DEFAULT_ROLLOUTS
    S: int = DEFAULT_S
    gap: float = DEFAULT_GAP
    rank_rule: str = T_MIN


@dataclass
class SearchReport:
    schedule: Schedule
    order: list[int]
    trace: list[tuple[float, float]]  # (elapsed ms, best makespan s)
    rollouts: int
    tree_size: int
    budget_exhausted: bool
    fallback: bool = False
    elapsed_ms: float = 0.0
    iteration: int = 0

    @property
    def makespan(self) -> float:
        return self.schedule.makespan

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["elapsed_ms", "best_makespan_s"])
        for t, m in self.trace:
            w.writerow([f"{t:.3f}", repr(m)])
        return buf.getvalue()


# --- problem construction ----------------------------------------------------


def iteration_problem(
    plan: SegmentPlan,
    submbs: Sequence[SubMicrobatch],
    costs: CostModel,
    S: int = DEFAULT_S,
) -> Problem:
    """Stage graph for one iteration's sub-microbatches under ``plan``.

    Each stage pair gets up to S memory strategies built from per-layer
    options of its chunk; a rank's capacity is device memory minus the
    static footprint of the chunks placed there.
    """
    model, P = plan.model, plan.P
    placement = plan.placement
    load_of = {s.key: s.load for s in submbs}
    units = [Unit(s.module, s.microbatch, s.index, plan.K[s.module]) for s in submbs]
    memo: dict = {}

    def candidates(u: Unit, depth: int, rank: int) -> list[MemoryStrategy]:
        load = load_of[(u.module, u.microbatch, u.submb)]
        chunk = placement.chunk(u.module, depth, rank)
        key = (u.module, load, chunk.num_layers)
        if key not in memo:
            opts = costs.layer_options(u.module, load)
            oh = costs.overhead(load)
            memo[key] = generate_candidates([opts] * chunk.num_layers, S, overhead=(oh, oh))
        return memo[key]

    def p2p(u: Unit) -> float:
        return costs.p2p(u.module, load_of[(u.module, u.microbatch, u.submb)])

    capacity = []
    for r in range(P):
        cap = costs.device.memory - costs.static_bytes(placement.for_rank(r))
        if cap <= 0:
            raise Infeasible(f"rank {r}: model state alone exceeds device memory")
        capacity.append(cap)
    edges = [(e.producer, e.consumer) for e in model.edges]
    edge_lat = {(e.producer, e.consumer): e.latency_s for e in model.edges}
    encoders = [m.name for m in model.modules if m.role == ENCODER]
    return build_problem(
        units, P, edges, model.topo_order(), candidates, p2p, capacity,
        edge_latency=lambda a, b: edge_lat.get((a, b), 0.0), encoders=encoders,
    )


def batch_submicrobatches(plan: SegmentPlan, batch: BatchMeta) -> list[SubMicrobatch]:
    out = []
    for j, mb in enumerate(batch.microbatches):
        out.extend(plan.split(mb, j))
    return out


# --- rollouts ------------------------------------------------------------------


def rollout(problem: Problem, order: Sequence[int], cfg: SearchConfig | None = None) -> Schedule:
    """Interleave under ``order``, then choose memory strategies per rank."""
    cfg = cfg or SearchConfig()
    sched = interleave_stages(problem, order, rank_rule=cfg.rank_rule)
    return optimize_memory(sched, cfg.gap)[0]


def rollout_makespan(problem: Problem, order: Sequence[int], cfg: SearchConfig | None = None) -> float:
    """Makespan of one rollout; ``inf`` when the order cannot be scheduled."""
    try:
        return rollout(problem, order, cfg).makespan
    except (Deadlock, Infeasible):
        return math.inf


class Evaluator:
    """Memoized rollout makespans for one problem, shareable across explorers."""

    def __init__(self, problem: Problem, cfg: SearchConfig | None = None):
        self.problem = problem
        self.cfg = cfg or SearchConfig()
        self._cache: dict[tuple[int, ...], float] = {}
        self._lock = threading.Lock()

    def __call__(self, order: Sequence[int]) -> float:
        key = tuple(order)
        hit = self._cache.get(key)
        if hit is None:
            hit = rollout_makespan(self.problem, key, self.cfg)
            with self._lock:
                hit = self._cache.setdefault(key, hit)
        return hit


_WORKER: dict = {}


def _worker_init(problem: Problem, cfg: SearchConfig) -> None:
    _WORKER["problem"], _WORKER["cfg"] = problem, cfg


def _worker_batch(orders: list[tuple[int, ...]]) -> list[float]:
    return [rollout_makespan(_WORKER["problem"], o, _WORKER["cfg"]) for o in orders]


def parallel_mcts(
    problem: Problem,
    budget: SearchBudget,
    cfg: SearchConfig | None = None,
    *,
    worst: bool = False,
) -> SearchResult:
    """MCTS with rollout batches spread over ``budget.workers`` processes."""
    cfg = cfg or SearchConfig()
    n = len(problem.classes)
    rng = random.Random(budget.seed)
    track = Tracker(lambda o: math.inf, budget.max_rollouts, budget.wall_clock_ms / 1e3, worst)
    tree = MctsTree(n, cfg.alpha, cfg.beta, cfg.rollouts_per_expand)
    inflight: dict = {}
    queued: set = set()

    def room() -> int | None:
        if budget.max_rollouts is None:
            return None
        return budget.max_rollouts - track.rollouts - len(queued)

    with ProcessPoolExecutor(budget.workers, initializer=_worker_init, initargs=(problem, cfg)) as pool:
        while True:
            while (len(inflight) < budget.workers and not tree.exhausted
                   and not track.out_of_budget() and (room() is None or room() > 0)):
                node, batch = tree.select(rng)
                fresh = []
                for seq in map(tuple, batch):
                    if seq not in track.cache and seq not in queued and seq not in fresh:
                        fresh.append(seq)
                left = room()
                if left is not None:
                    fresh = fresh[:left]
                known = [track.score(track.cache[s]) for s in map(tuple, batch) if s in track.cache]
                if not fresh:
                    if known:
                        tree.backprop(node, max(known))
                    continue
                queued.update(fresh)
                inflight[pool.submit(_worker_batch, fresh)] = (node, fresh, known)
            if not inflight:
                break
            done, _ = wait(list(inflight), return_when=FIRST_COMPLETED)
            for fut in [f for f in inflight if f in done]:
                node, fresh, known = inflight.pop(fut)
                scores = list(known)
                for seq, mk in zip(fresh, fut.result()):
                    queued.discard(seq)
                    track.record(seq, mk)
                    scores.append(track.score(mk))
                tree.backprop(node, max(scores))
    track.out_of_budget()
    return track.result(tree_size=tree.size, exhausted=tree.exhausted)


# --- orchestration -------------------------------------------------------------


def search_problem(
    problem: Problem,
    budget: SearchBudget,
    cfg: SearchConfig | None = None,
    *,
    explorer: str = "mcts",
    worst: bool = False,
    evaluate: Evaluator | None = None,
) -> SearchReport:
    """Budgeted order search on a prepared problem.

    Falls back to the canonical order when no rollout finished in time;
    raises Infeasible when not even that order can be scheduled.
    """
    cfg = cfg or SearchConfig()
    t0 = time.monotonic()
    n = len(problem.classes)
    if explorer == "mcts" and budget.workers > 1 and n > 1:
        res = parallel_mcts(problem, budget, cfg, worst=worst)
    else:
        fn = EXPLORERS[explorer]
        ev = evaluate or Evaluator(problem, cfg)
        kw = dict(max_rollouts=budget.max_rollouts, time_budget_s=budget.wall_clock_ms / 1e3,
                  seed=budget.seed, worst=worst)
        if explorer == "mcts":
            kw.update(alpha=cfg.alpha, beta=cfg.beta, rollouts_per_expand=cfg.rollouts_per_expand)
        res = fn(n, ev, **kw)
    fallback = not res.order and n > 0 or not math.isfinite(res.makespan)
    order = problem.canonical_order() if fallback else res.order
    try:
        sched = rollout(problem, order, cfg)
    except (Deadlock, Infeasible) as e:
        raise Infeasible(f"no memory-feasible schedule found: {e}") from e
    trace = list(res.trace)
    if fallback or not trace:
        trace.append(((time.monotonic() - t0) * 1e3, sched.makespan))
    return SearchReport(
        schedule=sched,
        order=list(order),
        trace=trace,
        rollouts=res.rollouts,
        tree_size=res.tree_size,
        budget_exhausted=res.budget_hit,
        fallback=fallback,
        elapsed_ms=(time.monotonic() - t0) * 1e3,
    )


def plan_iteration(
    plan: SegmentPlan,
    batch: BatchMeta,
    device: DeviceSpec | CostModel,
    budget: SearchBudget,
    cfg: SearchConfig | None = None,
    *,
    explorer: str = "mcts",
) -> SearchReport:
    """Split ``batch``, build its stage graph and search for the best schedule."""
    cfg = cfg or SearchConfig()
    costs = device if isinstance(device, CostModel) else CostModel(plan.model, device, plan.parallel.tp)
    submbs = batch_submicrobatches(plan, batch)
    problem = iteration_problem(plan, submbs, costs, cfg.S)
    report = search_problem(problem, budget, cfg, explorer=explorer)
    report.iteration = batch.iteration
    return report


def compare_explorers(
    problem: Problem,
    budget: SearchBudget,
    strategies: Iterable[str] = ("mcts", "dfs", "random"),
    cfg: SearchConfig | None = None,
) -> dict[str, SearchResult]:
    """Run each explorer with the same rollout budget and a shared evaluator.

    Runs single-threaded so that budgets are comparable rollout for rollout.
    """
    cfg = cfg or SearchConfig()
    ev = Evaluator(problem, cfg)
    n = len(problem.classes)
    out = {}
    for name in strategies:
        kw = dict(max_rollouts=budget.max_rollouts, time_budget_s=budget.wall_clock_ms / 1e3, seed=budget.seed)
        if name == "mcts":
            kw.update(alpha=cfg.alpha, beta=cfg.beta, rollouts_per_expand=cfg.rollouts_per_expand)
        out[name] = EXPLORERS[name](n, ev, **kw)
    return out


def pipeline_ahead(
    plan: SegmentPlan,
    batches: Iterable[BatchMeta],
    device: DeviceSpec | CostModel,
    budget: SearchBudget,
    cfg: SearchConfig | None = None,
) -> Iterator[SearchReport]:
    """Plan a stream of iterations one step ahead of the consumer.

    While the caller works with report k, the search for iteration k+1 runs
    on a background thread. Reports come out in iteration order.
    """
    costs = device if isinstance(device, CostModel) else CostModel(plan.model, device, plan.parallel.tp)
    it = iter(batches)
    with ThreadPoolExecutor(max_workers=1) as pool:
        nxt = next(it, None)
        pending = None if nxt is None else pool.submit(plan_iteration, plan, nxt, costs, budget, cfg)
        while pending is not None:
            report = pending.result()
            nxt = next(it, None)
            pending = None if nxt is None else pool.submit(plan_iteration, plan, nxt, costs, budget, cfg)
            yield report
