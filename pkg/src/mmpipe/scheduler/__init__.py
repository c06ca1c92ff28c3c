"""Stage graphs, interleaving, memory selection, order search and baselines."""

from .baselines import (
    best_layer_split,
    classic_problem,
    encoder_first_order,
    schedule_1f1b,
    schedule_encoder_first,
    uniform_problem,
)
from .core import (
    BW,
    FW,
    Deadlock,
    Infeasible,
    MemoryStrategy,
    Problem,
    Schedule,
    Segment,
    StagePair,
    StageTask,
    Unit,
    build_problem,
    enumerate_segments,
    fixed_strategy,
    makespan,
    retime,
    validate_schedule,
)
from .interleave import EVENT, T_MIN, interleave_stages, priorities
from .mcts import EXPLORERS, MctsNode, MctsTree, SearchResult, dfs_explore, mcts_reorder, random_explore
from .memory import DEFAULT_GAP, DEFAULT_S, IlpResult, generate_candidates, optimize_memory, solve_rank
from .oracle import TooLarge, brute_force_schedule


def plan_order(problem: Problem, order=None, gap: float = DEFAULT_GAP, **kw) -> Schedule:
    """One rollout: interleave under ``order``, then choose memory strategies."""
    sched = interleave_stages(problem, order, **kw)
    return optimize_memory(sched, gap)[0]
