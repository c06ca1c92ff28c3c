"""Search over class priority orders: MCTS plus DFS and random baselines.

An order is a permutation of equivalence classes; position i gets priority
n - i. Explorers only see ``evaluate(order) -> makespan`` and share the same
bookkeeping: memoized evaluations, a rollout budget counted in distinct
orders, an optional wall-clock budget and a best-so-far trace.
"""

from __future__ import annotations

import itertools
import math
import random
import time
from dataclasses import dataclass
from typing import Callable, Sequence

DEFAULT_ALPHA = 1.0
DEFAULT_BETA = 1.4
DEFAULT_ROLLOUTS = 10


@dataclass
class SearchResult:
    order: list[int]
    makespan: float
    trace: list[tuple[float, float]]  # (elapsed ms, best makespan so far)
    rollouts: int
    tree_size: int = 0
    exhausted: bool = False  # the whole space was explored
    budget_hit: bool = False


class Tracker:
    """Memoized evaluation with budget accounting and a best-so-far trace.

    With ``worst=True`` the tracker hunts for the slowest order instead.
    """

    def __init__(
        self,
        evaluate: Callable[[tuple[int, ...]], float],
        max_rollouts: int | None = None,
        time_budget_s: float | None = None,
        worst: bool = False,
    ):
        self.evaluate_fn = evaluate
        self.max_rollouts = max_rollouts
        self.worst = worst
        self.t0 = time.monotonic()
        self.deadline = None if time_budget_s is None else self.t0 + time_budget_s
        self.cache: dict[tuple[int, ...], float] = {}
        self.best: tuple[int, ...] | None = None
        self.best_value = math.inf
        self.trace: list[tuple[float, float]] = []
        self.ref: float | None = None
        self.budget_hit = False

    @property
    def rollouts(self) -> int:
        return len(self.cache)

    def out_of_budget(self) -> bool:
        if self.max_rollouts is not None and self.rollouts >= self.max_rollouts:
            self.budget_hit = True
        elif self.deadline is not None and time.monotonic() >= self.deadline:
            self.budget_hit = True
        return self.budget_hit

    def record(self, seq: tuple[int, ...], makespan: float) -> float:
        """Store an evaluation; infeasible orders come back as ``inf``."""
        self.cache[seq] = makespan
        if not math.isfinite(makespan):
            return makespan
        if self.ref is None:
            self.ref = makespan
        better = makespan > -self.best_value if self.worst else makespan < self.best_value
        if better:
            self.best = seq
            self.best_value = -makespan if self.worst else makespan
            self.trace.append(((time.monotonic() - self.t0) * 1e3, makespan))
        return makespan

    def __call__(self, seq: Sequence[int]) -> float | None:
        seq = tuple(seq)
        hit = self.cache.get(seq)
        if hit is not None:
            return hit
        if self.out_of_budget():
            return None
        return self.record(seq, self.evaluate_fn(seq))

    def score(self, makespan: float) -> float:
        """Normalized so the first feasible rollout scores 1; larger is better."""
        if not math.isfinite(makespan):
            return 0.0
        if makespan <= 0 or not self.ref:
            return 1.0
        return makespan / self.ref if self.worst else self.ref / makespan

    def result(self, **kw) -> SearchResult:
        mk = -self.best_value if self.worst else self.best_value
        return SearchResult(list(self.best or ()), mk, list(self.trace), self.rollouts,
                            budget_hit=self.budget_hit, **kw)


class MctsNode:
    __slots__ = ("item", "depth", "parent", "children", "untried", "s", "N", "exhausted")

    def __init__(self, item: int | None, depth: int, parent: "MctsNode | None", untried: list[int]):
        self.item = item
        self.depth = depth
        self.parent = parent
        self.children: dict[int, MctsNode] = {}
        self.untried = untried
        self.s = 0.0  # best score seen below
        self.N = 0
        self.exhausted = False

    def prefix(self) -> list[int]:
        out, node = [], self
        while node.parent is not None:
            out.append(node.item)
            node = node.parent
        return out[::-1]


class MctsTree:
    """Search tree over priority orders.

    ``select`` walks down by UCB (unvisited children first, exhausted
    subtrees skipped), expands one child and returns it with a batch of
    random completions; ``backprop`` folds the batch's best score back up.
    Visits are counted at selection so that several batches can be in flight.
    """

    def __init__(self, n: int, alpha: float = DEFAULT_ALPHA, beta: float = DEFAULT_BETA,
                 rollouts: int = DEFAULT_ROLLOUTS):
        self.n = n
        self.alpha, self.beta, self.rollouts = alpha, beta, rollouts
        self.root = MctsNode(None, 0, None, list(range(n)))
        self.size = 1

    @property
    def exhausted(self) -> bool:
        return self.root.exhausted

    def ucb(self, parent: MctsNode, v: MctsNode) -> float:
        if v.N == 0:
            return math.inf
        return v.s**self.alpha + self.beta * math.sqrt(math.log(max(parent.N, 1)) / v.N)

    def select(self, rng: random.Random) -> tuple[MctsNode, list[list[int]]] | None:
        if self.root.exhausted:
            return None
        node = self.root
        while not node.untried and node.depth < self.n:
            live = [c for c in node.children.values() if not c.exhausted]
            node = max(live, key=lambda c: (self.ucb(node, c), -c.item))
        if node.untried:
            item = node.untried.pop(rng.randrange(len(node.untried)))
            rest = [x for x in node.untried] + [x for x in node.children]
            child = MctsNode(item, node.depth + 1, node, sorted(rest))
            node.children[item] = child
            self.size += 1
            node = child
        prefix = node.prefix()
        if node.depth == self.n:
            batch = [prefix]
            self._mark_exhausted(node)
        else:
            left = node.untried
            batch = []
            for _ in range(self.rollouts):
                tail = list(left)
                rng.shuffle(tail)
                batch.append(prefix + tail)
        walk = node
        while walk is not None:
            walk.N += len(batch)
            walk = walk.parent
        return node, batch

    def _mark_exhausted(self, node: MctsNode) -> None:
        node.exhausted = True
        p = node.parent
        while p is not None and not p.untried and all(c.exhausted for c in p.children.values()):
            p.exhausted = True
            p = p.parent

    def backprop(self, node: MctsNode, best_score: float) -> None:
        while node is not None:
            node.s = max(node.s, best_score)
            node = node.parent


def mcts_reorder(
    n: int,
    evaluate: Callable[[tuple[int, ...]], float],
    *,
    max_rollouts: int | None = None,
    time_budget_s: float | None = None,
    alpha: float = DEFAULT_ALPHA,
    beta: float = DEFAULT_BETA,
    rollouts_per_expand: int = DEFAULT_ROLLOUTS,
    seed: int = 0,
    worst: bool = False,
) -> SearchResult:
    """Single-threaded MCTS over orders of ``n`` classes."""
    if max_rollouts is None and time_budget_s is None:
        raise ValueError("give a rollout or time budget")
    rng = random.Random(seed)
    track = Tracker(evaluate, max_rollouts, time_budget_s, worst)
    tree = MctsTree(n, alpha, beta, rollouts_per_expand)
    if n <= 1:
        track(list(range(n)))
        return track.result(tree_size=1, exhausted=True)
    while not tree.exhausted and not track.out_of_budget():
        node, batch = tree.select(rng)
        scores = []
        for seq in batch:
            m = track(seq)
            if m is None:
                break
            scores.append(track.score(m))
        if scores:
            tree.backprop(node, max(scores))
    return track.result(tree_size=tree.size, exhausted=tree.exhausted)


def dfs_explore(
    n: int,
    evaluate: Callable[[tuple[int, ...]], float],
    *,
    max_rollouts: int | None = None,
    time_budget_s: float | None = None,
    seed: int = 0,
    worst: bool = False,
) -> SearchResult:
    """Depth-first enumeration in lexicographic order over seeded class labels.

    The seed shuffles which class each label stands for, so different seeds
    start from different orders; each run only ever perturbs the tail.
    """
    labels = list(range(n))
    random.Random(seed).shuffle(labels)
    track = Tracker(evaluate, max_rollouts, time_budget_s, worst)
    done = True
    for perm in itertools.permutations(range(n)):
        if track([labels[i] for i in perm]) is None:
            done = False
            break
    return track.result(exhausted=done)


def random_explore(
    n: int,
    evaluate: Callable[[tuple[int, ...]], float],
    *,
    max_rollouts: int | None = None,
    time_budget_s: float | None = None,
    seed: int = 0,
    worst: bool = False,
) -> SearchResult:
    """Distinct uniformly random orders."""
    rng = random.Random(seed)
    track = Tracker(evaluate, max_rollouts, time_budget_s, worst)
    total = math.factorial(n)
    while track.rollouts < total:
        seq = list(range(n))
        rng.shuffle(seq)
        if tuple(seq) in track.cache:
            continue
        if track(seq) is None:
            break
    return track.result(exhausted=track.rollouts >= total)


EXPLORERS = {"mcts": mcts_reorder, "dfs": dfs_explore, "random": random_explore}
