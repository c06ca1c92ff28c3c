"""Reference schedulers: classic 1F1B and encoder-first."""

from __future__ import annotations

from typing import Callable, Sequence

from .core import FW, MemoryStrategy, Problem, Schedule, Unit, build_problem, fixed_strategy, retime
from .interleave import interleave_stages

CHAIN = "chain"


def classic_problem(
    n: int,
    P: int,
    cost: Callable[[int, int], tuple[float, float, float]],
    p2p: float = 0.0,
    capacity: float = float("inf"),
) -> Problem:
    """One chain module cut into P stages; ``cost(mb, rank)`` gives (fw, bw, mem)."""
    units = [Unit(CHAIN, j, 0, 1) for j in range(n)]

    def cands(u: Unit, depth: int, rank: int) -> list[MemoryStrategy]:
        fw, bw, mem = cost(u.microbatch, rank)
        return [fixed_strategy(fw, bw, mem)]

    return build_problem(units, P, (), (CHAIN,), cands, lambda u: p2p, capacity)


def uniform_problem(n: int, P: int, fw: float, bw: float, mem: float = 0.0, p2p: float = 0.0,
                    capacity: float = float("inf")) -> Problem:
    return classic_problem(n, P, lambda j, r: (fw, bw, mem), p2p, capacity)


def one_f_one_b_orders(P: int, fw_stages: Sequence[Sequence[int]], bw_stages: Sequence[Sequence[int]]):
    """Per-rank 1F1B orders: min(P-r, n) warm-up forwards, then alternate."""
    orders = []
    for r in range(P):
        f, b = fw_stages[r], bw_stages[r]
        n = len(f)
        w = min(P - r, n)
        order = list(f[:w])
        for i in range(n):
            order.append(b[i])
            if w + i < n:
                order.append(f[w + i])
        orders.append(order)
    return orders


def schedule_1f1b(problem: Problem) -> Schedule:
    """Canonical 1F1B over a problem with one forward segment per microbatch."""
    pb = problem
    per_mb: dict[int, list] = {}
    for seg in pb.segments:
        per_mb.setdefault(seg.microbatch, []).append(seg)
    for mb, segs in per_mb.items():
        if len(segs) != 2:
            raise ValueError("1F1B needs exactly one segment pair per microbatch")
    fw = [[] for _ in range(pb.P)]
    bw = [[] for _ in range(pb.P)]
    for mb in sorted(per_mb):
        f = next(s for s in per_mb[mb] if s.direction == FW)
        b = next(s for s in per_mb[mb] if s.direction != FW)
        for r in range(pb.P):
            fw[r].append(f.id * pb.P + r)
            bw[r].append(b.id * pb.P + r)
    return retime(pb, one_f_one_b_orders(pb.P, fw, bw))


def encoder_first_problem(problem: Problem) -> Problem:
    """Holds every non-encoder forward on a rank until all encoder forwards there ran."""
    pb = problem
    enc_fw = [[] for _ in range(pb.P)]
    for st in pb.stages:
        if st.direction == FW and pb.segments[st.segment].module in pb.encoders:
            enc_fw[st.rank].append(st.id)
    extra = {}
    for st in pb.stages:
        if st.direction == FW and pb.segments[st.segment].module not in pb.encoders:
            extra[st.id] = [(e, 0.0) for e in enc_fw[st.rank]]
    return pb.with_extra_preds(extra)


def encoder_first_order(problem: Problem) -> list[int]:
    pb = problem
    rank = {m: i for i, m in enumerate(pb.module_order)}
    return sorted(
        range(len(pb.classes)),
        key=lambda c: (pb.classes[c][1] not in pb.encoders, rank.get(pb.classes[c][1], 0), pb.classes[c][0]),
    )


def schedule_encoder_first(problem: Problem) -> Schedule:
    """All encoder forwards of the batch first, then the rest, fastest strategies.

    Memory is not gated; the point of this baseline is its memory growth.
    """
    fast = problem.with_candidates(lambda p: p.candidates[:1]).with_capacity(float("inf"))
    gated = encoder_first_problem(fast)
    sched = interleave_stages(gated, encoder_first_order(fast), memory_gate=False)
    return Schedule(fast, sched.orders, sched.start, sched.end, sched.choice, sched.sequence)


def best_layer_split(costs: Sequence[float], P: int) -> list[tuple[int, int]]:
    """Contiguous split of a layer chain into P non-empty stages.

    Exact dynamic program over cut points: minimizes the slowest stage, then
    among those splits maximizes the fastest one.
    """
    L = len(costs)
    if not 1 <= P <= L:
        raise ValueError(f"cannot cut {L} layers into {P} stages")
    pre = [0.0]
    for c in costs:
        pre.append(pre[-1] + c)
    inf = float("inf")

    # f[p][i]: best (max stage) for the first i layers in p stages
    f = [[inf] * (L + 1) for _ in range(P + 1)]
    f[0][0] = 0.0
    for p in range(1, P + 1):
        for i in range(p, L + 1):
            f[p][i] = min(max(f[p - 1][j], pre[i] - pre[j]) for j in range(p - 1, i))
    cap = f[P][L] * (1 + 1e-12)

    # g[p][i]: largest possible min stage with every stage <= cap
    g = [[-inf] * (L + 1) for _ in range(P + 1)]
    arg = [[-1] * (L + 1) for _ in range(P + 1)]
    g[0][0] = inf
    for p in range(1, P + 1):
        for i in range(p, L + 1):
            for j in range(p - 1, i):
                seg = pre[i] - pre[j]
                if seg <= cap and g[p - 1][j] > -inf:
                    v = min(g[p - 1][j], seg)
                    if v > g[p][i]:
                        g[p][i], arg[p][i] = v, j
    out, i = [], L
    for p in range(P, 0, -1):
        j = arg[p][i]
        out.append((j, i))
        i = j
    return out[::-1]
