"""Static checks and discrete-event replay of execution plans.

Replay semantics: each rank runs its actions in order on a local clock.
Stages advance the clock by their duration. Posts (``isend``/``irecv``) are
instant. A send completes once its receive is posted; a receive completes
when the data lands, ``transfer_s`` after the send was issued. Waits block
until their operation completes. Nothing else blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .compile import (
    BATCHED_P2P,
    IRECV,
    ISEND,
    POST_KINDS,
    STAGE_KINDS,
    WAIT_IRECV,
    WAIT_ISEND,
    ExecutionPlan,
)

DEADLOCK = "Deadlock"
UNMATCHED_TAG = "UnmatchedTag"
UNMATCHED_WAIT = "UnmatchedWait"
BAD_BATCH = "BadBatch"


@dataclass
class Diagnostic:
    kind: str
    message: str
    witness: list[tuple[int, int]] = field(default_factory=list)  # (rank, action index)


@dataclass
class Replay:
    ok: bool
    diagnostics: list[Diagnostic]
    start: dict[int, float]  # stage id -> replayed start time
    end: dict[int, float]
    makespan: float


def _static_checks(plan: ExecutionPlan) -> list[Diagnostic]:
    out = []
    posts: dict[tuple[str, int], list[tuple[int, int, int]]] = {}
    wait_seen: dict[tuple[str, int, int], int] = {}
    for r in range(plan.P):
        for a in plan.ranks[r]:
            if a.kind == BATCHED_P2P and (not a.members or any(m.kind not in POST_KINDS for m in a.members)):
                out.append(Diagnostic(BAD_BATCH, f"rank {r}: batched_p2p may only group isend/irecv"))
        posted: set[tuple[str, int]] = set()
        for i, a in enumerate(plan.flat(r)):
            if a.kind in POST_KINDS:
                posts.setdefault((a.kind, a.tag), []).append((r, a.peer, i))
                posted.add((a.kind, a.tag))
            elif a.kind in (WAIT_ISEND, WAIT_IRECV):
                op = ISEND if a.kind == WAIT_ISEND else IRECV
                key = (op, a.tag, r)
                wait_seen[key] = wait_seen.get(key, 0) + 1
                if (op, a.tag) not in posted:
                    out.append(Diagnostic(UNMATCHED_WAIT, f"rank {r}: {a.kind} tag {a.tag} before its {op}",
                                          [(r, i)]))
    tags = {t for _, t in posts}
    for t in sorted(tags):
        s, v = posts.get((ISEND, t), []), posts.get((IRECV, t), [])
        if len(s) != 1 or len(v) != 1:
            where = [(r, i) for r, _, i in s + v]
            out.append(Diagnostic(UNMATCHED_TAG, f"tag {t}: {len(s)} isend, {len(v)} irecv", where))
            continue
        (sr, speer, si), (rr, rpeer, ri) = s[0], v[0]
        if speer != rr or rpeer != sr:
            out.append(Diagnostic(UNMATCHED_TAG, f"tag {t}: isend {sr}->{speer} vs irecv {rr}<-{rpeer}",
                                  [(sr, si), (rr, ri)]))
        for op, r in ((ISEND, sr), (IRECV, rr)):
            if wait_seen.get((op, t, r), 0) != 1:
                out.append(Diagnostic(UNMATCHED_WAIT, f"tag {t}: {op} on rank {r} needs exactly one wait"))
    for (op, t, r), n in wait_seen.items():
        if (op, t) not in posts:
            out.append(Diagnostic(UNMATCHED_TAG, f"rank {r}: wait on tag {t} that is never posted"))
    return out


def replay(plan: ExecutionPlan) -> Replay:
    """Execute ``plan`` and report stage times, or why it cannot finish."""
    diags = _static_checks(plan)
    P = plan.P
    acts = [plan.flat(r) for r in range(P)]
    pc = [0] * P
    clock = [0.0] * P
    send_at: dict[int, tuple[float, float]] = {}  # tag -> (issue time, transfer)
    recv_at: dict[int, float] = {}
    start: dict[int, float] = {}
    end: dict[int, float] = {}
    progress = True
    while progress:
        progress = False
        for r in range(P):
            while pc[r] < len(acts[r]):
                a = acts[r][pc[r]]
                if a.kind in STAGE_KINDS:
                    start[a.stage] = clock[r]
                    clock[r] += a.duration_s
                    end[a.stage] = clock[r]
                elif a.kind == ISEND:
                    send_at[a.tag] = (clock[r], a.transfer_s)
                elif a.kind == IRECV:
                    recv_at[a.tag] = clock[r]
                elif a.kind == WAIT_ISEND:
                    if a.tag not in recv_at or a.tag not in send_at:
                        break
                    clock[r] = max(clock[r], recv_at[a.tag])
                elif a.kind == WAIT_IRECV:
                    if a.tag not in send_at or a.tag not in recv_at:
                        break
                    t, d = send_at[a.tag]
                    clock[r] = max(clock[r], t + d)
                pc[r] += 1
                progress = True
    stuck = [r for r in range(P) if pc[r] < len(acts[r])]
    if stuck:
        diags.append(_deadlock(acts, pc, stuck))
    mk = max(end.values(), default=0.0)
    return Replay(not diags, diags, start, end, mk)


def _deadlock(acts, pc, stuck) -> Diagnostic:
    """Witness for ranks that stopped: a wait-for cycle if there is one."""
    waits_on: dict[int, int | None] = {}
    for r in stuck:
        a = acts[r][pc[r]]
        # who has to act next: the peer posting the missing half of the pair
        waits_on[r] = a.peer
    for r0 in stuck:
        seen, r = [], r0
        while r is not None and r in waits_on and r not in seen:
            seen.append(r)
            r = waits_on[r]
        if r is not None and r in seen:
            cyc = seen[seen.index(r):]
            desc = " -> ".join(f"rank {x} {acts[x][pc[x]].kind}(tag {acts[x][pc[x]].tag})" for x in cyc)
            return Diagnostic(DEADLOCK, f"wait cycle: {desc}", [(x, pc[x]) for x in cyc])
    r = stuck[0]
    a = acts[r][pc[r]]
    peer = a.peer
    gone = peer is None or not 0 <= peer < len(acts) or pc[peer] >= len(acts[peer])
    kind = UNMATCHED_TAG if gone else DEADLOCK
    return Diagnostic(kind, f"rank {r} blocked on {a.kind} tag {a.tag}", [(x, pc[x]) for x in stuck])


def validate_plan(plan: ExecutionPlan) -> list[Diagnostic]:
    """All problems with ``plan``; an empty list means it runs to completion."""
    return replay(plan).diagnostics
