"""Baselines on real workloads and side-by-side comparison with the searcher."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

from .model import ModelSpec
from .partitioner import SegmentPlan, module_input
from .scheduler.baselines import CHAIN, best_layer_split, schedule_1f1b, schedule_encoder_first
from .scheduler.core import MemoryStrategy, Problem, Schedule, Unit, build_problem
from .scheduler.memory import DEFAULT_S, generate_candidates, optimize_memory
from .search import SearchBudget, SearchConfig, batch_submicrobatches, iteration_problem, search_problem
from .simulator.costs import STATIC_BYTES_PER_PARAM, CostModel, Load, layer_params
from .workload import BatchMeta, MicrobatchMeta


def _module_loads(model: ModelSpec, mb: MicrobatchMeta) -> dict[str, Load]:
    out = {}
    for m in model.modules:
        n, lengths = module_input(model, m, mb)
        if n:
            out[m.name] = Load.per_instance(lengths) if m.instance_based else Load.sequence(n)
    return out


def classic_layer_split(model: ModelSpec, P: int, costs: CostModel, batch: BatchMeta) -> list[tuple[int, int]]:
    """Contiguous split of the concatenated layer chain, balanced for the batch average."""
    per_layer = []
    n = len(batch.microbatches)
    for m in (model.module(x) for x in model.topo_order()):
        total = 0.0
        for mb in batch.microbatches:
            load = _module_loads(model, mb).get(m.name)
            if load is not None:
                opt = costs.layer_options(m.name, load)[0]
                total += opt.latency
        per_layer.extend([total / n] * m.num_layers)
    return best_layer_split(per_layer, P)


def classic_problem_for(
    plan: SegmentPlan, batch: BatchMeta, costs: CostModel, S: int = DEFAULT_S
) -> Problem:
    """Whole microbatches through the layer chain cut into P contiguous stages."""
    model, P = plan.model, plan.P
    order = model.topo_order()
    spans = [(name, model.module(name).num_layers) for name in order]
    cuts = classic_layer_split(model, P, costs, batch)
    loads = [_module_loads(model, mb) for mb in batch.microbatches]

    def rank_layers(r: int) -> list[tuple[str, int]]:
        lo, hi = cuts[r]
        out, base = [], 0
        for name, L in spans:
            a, b = max(lo, base), min(hi, base + L)
            if b > a:
                out.append((name, b - a))
            base += L
        return out

    memo: dict = {}

    def cands(u: Unit, depth: int, rank: int) -> list[MemoryStrategy]:
        key = (u.microbatch, rank)
        if key not in memo:
            layers, oh = [], 0.0
            for name, count in rank_layers(rank):
                load = loads[u.microbatch].get(name)
                if load is None:
                    continue
                layers.extend([costs.layer_options(name, load)] * count)
                oh += costs.overhead(load)
            memo[key] = generate_candidates(layers, S, overhead=(oh, oh))
        return memo[key]

    def p2p(u: Unit) -> float:
        # the last module carries the inter-rank activations for most ranks
        return costs.p2p(order[-1], loads[u.microbatch].get(order[-1], Load.sequence(0)))

    capacity = []
    for r in range(P):
        static = 0.0
        for name, count in rank_layers(r):
            static += count * layer_params(model.module(name)) * STATIC_BYTES_PER_PARAM / costs.tp
        capacity.append(costs.device.memory - static)
    units = [Unit(CHAIN, j, 0, 1) for j in range(len(batch.microbatches))]
    return build_problem(units, P, (), (CHAIN,), cands, p2p, capacity)


def schedule_classic_1f1b(plan: SegmentPlan, batch: BatchMeta, costs: CostModel, gap: float = 0.05) -> Schedule:
    """Megatron-style 1F1B over whole microbatches, memory strategies chosen per rank."""
    pb = classic_problem_for(plan, batch, costs)
    return optimize_memory(schedule_1f1b(pb), gap)[0]


@dataclass
class ComparisonRow:
    scheduler: str
    makespan_s: float
    peak_memory_bytes: float
    bubble_fraction: float


def compare_schedulers(
    plan: SegmentPlan,
    batch: BatchMeta,
    costs: CostModel,
    budget: SearchBudget,
    cfg: SearchConfig | None = None,
) -> tuple[list[ComparisonRow], dict[str, Schedule]]:
    cfg = cfg or SearchConfig()
    problem = iteration_problem(plan, batch_submicrobatches(plan, batch), costs, cfg.S)
    scheds = {
        "searched": search_problem(problem, budget, cfg).schedule,
        "1f1b": schedule_classic_1f1b(plan, batch, costs, cfg.gap),
        "encoder_first": schedule_encoder_first(problem),
    }
    rows = [ComparisonRow(k, s.makespan, s.peak_memory(), s.bubble_fraction()) for k, s in scheds.items()]
    return rows, scheds


def rows_csv(rows: Sequence[ComparisonRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scheduler", "makespan_s", "peak_memory_gib", "bubble_fraction"])
    for r in rows:
        w.writerow([r.scheduler, f"{r.makespan_s:.6f}", f"{r.peak_memory_bytes / 2**30:.3f}",
                    f"{r.bubble_fraction:.4f}"])
    return buf.getvalue()
