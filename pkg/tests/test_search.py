import itertools
import math
import random

import pytest

from helpers import random_instance
from mmpipe.model import ParallelConfig, builtin_device, builtin_model
from mmpipe.partitioner import make_segment_plan
from mmpipe.scheduler import dfs_explore, mcts_reorder, random_explore
from mmpipe.scheduler.mcts import MctsTree, Tracker
from mmpipe.search import (
    Evaluator,
    SearchBudget,
    SearchConfig,
    auto_workers,
    batch_submicrobatches,
    compare_explorers,
    iteration_problem,
    pipeline_ahead,
    plan_iteration,
    rollout_makespan,
    search_problem,
)
from mmpipe.simulator.costs import CostModel
from mmpipe.workload import synthetic_batch, vlm_mixture

H800 = builtin_device("H800")


@pytest.fixture(scope="module")
def plan():
    return make_segment_plan(builtin_model("VLM-S"), ParallelConfig(pp=4, tp=4), H800)


@pytest.fixture(scope="module")
def small(plan):
    batch = synthetic_batch(vlm_mixture(), 8192, 2, seed=0)
    costs = CostModel(plan.model, H800, plan.parallel.tp)
    return iteration_problem(plan, batch_submicrobatches(plan, batch), costs)


def table_eval(values):
    return lambda seq: values[tuple(seq)]


def test_single_class_returns_canonical_order():
    calls = []
    res = mcts_reorder(1, lambda s: calls.append(s) or 2.0, max_rollouts=100)
    assert res.order == [0] and res.makespan == 2.0
    assert res.exhausted and len(calls) == 1


@pytest.mark.parametrize("explorer", [mcts_reorder, dfs_explore, random_explore])
def test_three_classes_exhaustive_matches_brute_force(explorer):
    rng = random.Random(4)
    values = {p: rng.uniform(1, 2) for p in itertools.permutations(range(3))}
    res = explorer(3, table_eval(values), max_rollouts=1000, seed=1)
    assert res.exhausted and res.rollouts == 6
    assert res.makespan == min(values.values())
    assert values[tuple(res.order)] == res.makespan


def test_worst_mode_finds_slowest():
    rng = random.Random(8)
    values = {p: rng.uniform(1, 2) for p in itertools.permutations(range(4))}
    res = mcts_reorder(4, table_eval(values), max_rollouts=1000, worst=True)
    assert res.makespan == max(values.values())


def test_mcts_deterministic():
    rng = random.Random(9)
    values = {p: rng.uniform(1, 2) for p in itertools.permutations(range(6))}
    a = mcts_reorder(6, table_eval(values), max_rollouts=80, seed=3)
    b = mcts_reorder(6, table_eval(values), max_rollouts=80, seed=3)
    assert a.order == b.order and a.makespan == b.makespan and a.rollouts == b.rollouts == 80
    assert [m for _, m in a.trace] == [m for _, m in b.trace]


def test_trace_monotone_and_ends_at_best():
    rng = random.Random(10)
    values = {p: rng.uniform(1, 2) for p in itertools.permutations(range(6))}
    for explorer in (mcts_reorder, dfs_explore, random_explore):
        res = explorer(6, table_eval(values), max_rollouts=200, seed=0)
        marks = [m for _, m in res.trace]
        assert all(b < a for a, b in zip(marks, marks[1:]))
        assert marks[-1] == res.makespan


def test_infeasible_orders_are_never_best():
    values = {p: (math.inf if p[0] == 0 else 1.0 + p[0]) for p in itertools.permutations(range(3))}
    res = mcts_reorder(3, table_eval(values), max_rollouts=100)
    assert res.order[0] == 1 and res.makespan == 2.0


def test_tracker_counts_distinct_evaluations():
    calls = []
    t = Tracker(lambda s: calls.append(s) or 1.0, max_rollouts=2)
    assert t([0, 1]) == 1.0 and t([0, 1]) == 1.0
    assert t([1, 0]) == 1.0
    assert t([2, 0]) is None and t.budget_hit
    assert len(calls) == 2


def test_tree_visits_unvisited_children_first():
    tree = MctsTree(3, rollouts=1)
    rng = random.Random(0)
    firsts = []
    for _ in range(3):
        node, batch = tree.select(rng)
        firsts.append(node.prefix()[0])
        tree.backprop(node, 1.0)
    assert sorted(firsts) == [0, 1, 2]


def test_search_problem_exhaustive_reaches_optimum(small):
    ev = Evaluator(small)
    n = len(small.classes)
    best = min(ev(p) for p in itertools.permutations(range(n)))
    rep = search_problem(small, SearchBudget(60_000, workers=1, max_rollouts=10_000), evaluate=ev)
    assert rep.makespan == pytest.approx(best, rel=1e-12)
    assert not rep.fallback and rep.rollouts == math.factorial(n)
    assert rep.trace[-1][1] == pytest.approx(rep.makespan, rel=1e-12)


def test_parallel_search_matches_serial(small):
    serial = search_problem(small, SearchBudget(60_000, workers=1, max_rollouts=10_000))
    par = search_problem(small, SearchBudget(60_000, workers=2, max_rollouts=10_000))
    assert par.makespan == pytest.approx(serial.makespan, rel=1e-12)
    assert par.rollouts == serial.rollouts


def test_zero_rollouts_falls_back_to_canonical(small):
    rep = search_problem(small, SearchBudget(1000, workers=1, max_rollouts=0))
    assert rep.fallback and rep.rollouts == 0
    assert rep.order == small.canonical_order()
    assert rep.makespan == pytest.approx(rollout_makespan(small, small.canonical_order()))


def test_budget_validation():
    with pytest.raises(ValueError):
        SearchBudget(0)
    with pytest.raises(ValueError):
        SearchBudget(10, workers=0)


def test_auto_workers():
    assert auto_workers(1) == 1
    assert auto_workers(8) == 4
    assert auto_workers() >= 1


def test_compare_explorers_single_class_identical():
    inst = random_instance(random.Random(0), max_mb=1, max_mods=1, capacity="inf")
    out = compare_explorers(inst.problem, SearchBudget(1000, workers=1, max_rollouts=10))
    assert len({r.makespan for r in out.values()}) == 1
    assert all(r.order == [0] for r in out.values())


def test_compare_explorers_exhaustive_all_reach_optimum():
    rng = random.Random(21)
    inst = random_instance(rng, max_P=3, max_mb=2, max_mods=2, capacity="inf")
    while len(inst.problem.classes) < 3:
        inst = random_instance(rng, max_P=3, max_mb=2, max_mods=2, capacity="inf")
    out = compare_explorers(inst.problem, SearchBudget(60_000, workers=1, max_rollouts=10_000))
    ev = Evaluator(inst.problem)
    best = min(ev(p) for p in itertools.permutations(range(len(inst.problem.classes))))
    assert all(r.makespan == best for r in out.values())


def test_plan_iteration_and_pipeline_ahead(plan):
    batches = [synthetic_batch(vlm_mixture(), 8192, 2, seed=i, iteration=i) for i in range(3)]
    budget = SearchBudget(60_000, workers=1, max_rollouts=5)
    single = plan_iteration(plan, batches[0], H800, budget)
    reports = list(pipeline_ahead(plan, batches, H800, budget))
    assert [r.iteration for r in reports] == [0, 1, 2]
    assert reports[0].makespan == single.makespan
    assert reports[0].order == single.order
    assert list(pipeline_ahead(plan, [], H800, budget)) == []


def test_trace_csv(small):
    rep = search_problem(small, SearchBudget(1000, workers=1, max_rollouts=3))
    lines = rep.trace_csv().splitlines()
    assert lines[0] == "elapsed_ms,best_makespan_s"
    assert len(lines) == len(rep.trace) + 1


def test_config_rank_rule_is_used(small):
    cfg = SearchConfig(rank_rule="event")
    assert math.isfinite(rollout_makespan(small, small.canonical_order(), cfg))


def test_single_worker_reports_repeat(small):
    budget = SearchBudget(60_000, workers=1, max_rollouts=7, seed=5)
    a, b = search_problem(small, budget), search_problem(small, budget)
    assert a.order == b.order and a.rollouts == b.rollouts
    assert a.schedule.start == b.schedule.start and a.schedule.choice == b.schedule.choice


def test_best_so_far_flattens_within_budget(plan):
    batch = synthetic_batch(vlm_mixture(), 8192, 8, seed=0)
    rep = plan_iteration(plan, batch, H800, SearchBudget(10_000, workers=auto_workers()))
    half = [m for t, m in rep.trace if t <= 5_000]
    assert half, "no rollout finished in the first half of the budget"
    assert (half[-1] - rep.makespan) / rep.makespan < 0.01


def test_pipeline_ahead_overlaps_with_consumer(plan):
    import time

    batches = [synthetic_batch(vlm_mixture(), 8192, 4, seed=i, iteration=i) for i in range(2)]
    budget = SearchBudget(1_000, workers=1)
    t0 = time.monotonic()
    for _ in pipeline_ahead(plan, batches, H800, budget):
        time.sleep(1.0)  # the consumer trains on this iteration
    # sequential would be 2 searches + 2 training steps = 4 s
    assert time.monotonic() - t0 < 3.6
