"""Compile a timed schedule into per-rank action streams.

Every cross-rank stage dependency becomes one message, and so does a
same-rank dependency that carries a delay (an adapter latency on a one-rank
pipeline), addressed to the rank itself so the delay survives. The sender issues
``isend`` right after the producing stage and waits on it at once; the
receiver posts ``irecv`` right after its last stage that finishes no later
than the send is issued, and waits on it immediately before the consuming
stage. Since the receive is always posted by the time the send is issued,
neither side blocks longer than the schedule says. Runs of consecutive
posts are grouped into one ``batched_p2p`` action.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

from ..model import ChunkPlacement
from ..scheduler.core import FW, Schedule, Segment, validate_schedule
from ..simulator.costs import boundary_bytes

SCHEMA_VERSION = 1

FW_STAGE, BW_STAGE = "fw_stage", "bw_stage"
ISEND, IRECV = "isend", "irecv"
WAIT_ISEND, WAIT_IRECV = "wait_isend", "wait_irecv"
BATCHED_P2P = "batched_p2p"
STAGE_KINDS = (FW_STAGE, BW_STAGE)
POST_KINDS = (ISEND, IRECV)
WAIT_KINDS = (WAIT_ISEND, WAIT_IRECV)
KINDS = STAGE_KINDS + POST_KINDS + WAIT_KINDS + (BATCHED_P2P,)


class InvalidSchedule(ValueError):
    pass


@dataclass
class Action:
    kind: str
    # stage actions
    stage: int | None = None
    segment: str | None = None
    chunk: int | None = None
    microbatch: int | None = None
    submb: int | None = None
    strategy: tuple[str, ...] = ()
    duration_s: float = 0.0
    # communication actions
    peer: int | None = None
    tag: int | None = None
    bytes: float = 0.0
    transfer_s: float = 0.0
    members: list["Action"] = field(default_factory=list)

    def to_dict(self) -> dict:
        if self.kind in STAGE_KINDS:
            return {
                "kind": self.kind, "stage": self.stage, "segment": self.segment, "chunk": self.chunk,
                "microbatch": self.microbatch, "submb": self.submb, "strategy": list(self.strategy),
                "duration_s": self.duration_s,
            }
        if self.kind == BATCHED_P2P:
            return {"kind": self.kind, "members": [m.to_dict() for m in self.members]}
        d = {"kind": self.kind, "peer": self.peer, "tag": self.tag}
        if self.kind in POST_KINDS:
            d["bytes"] = self.bytes
            d["transfer_s"] = self.transfer_s
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "Action":
        kind = d["kind"]
        if kind not in KINDS:
            raise ValueError(f"unknown action kind {kind!r}")
        if kind in STAGE_KINDS:
            return cls(kind, stage=d["stage"], segment=d.get("segment"), chunk=d.get("chunk"),
                       microbatch=d.get("microbatch"), submb=d.get("submb"),
                       strategy=tuple(d.get("strategy", ())), duration_s=float(d["duration_s"]))
        if kind == BATCHED_P2P:
            return cls(kind, members=[cls.from_dict(m) for m in d["members"]])
        return cls(kind, peer=d["peer"], tag=d["tag"], bytes=float(d.get("bytes", 0.0)),
                   transfer_s=float(d.get("transfer_s", 0.0)))


@dataclass
class ExecutionPlan:
    ranks: list[list[Action]]
    plan_id: str = ""
    source_digest: str = ""
    makespan_s: float = 0.0

    @property
    def P(self) -> int:
        return len(self.ranks)

    def flat(self, rank: int) -> list[Action]:
        """The rank's actions with batches expanded in place."""
        out = []
        for a in self.ranks[rank]:
            out.extend(a.members if a.kind == BATCHED_P2P else [a])
        return out

    def unbatched(self) -> "ExecutionPlan":
        return ExecutionPlan([self.flat(r) for r in range(self.P)], self.plan_id, self.source_digest,
                             self.makespan_s)

    def count(self, kind: str) -> int:
        return sum(a.kind == kind for r in range(self.P) for a in self.flat(r))

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "plan_id": self.plan_id,
            "source_digest": self.source_digest,
            "num_ranks": self.P,
            "makespan_s": self.makespan_s,
            "ranks": [[a.to_dict() for a in row] for row in self.ranks],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExecutionPlan":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported plan schema {d.get('schema_version')!r}")
        return cls(
            [[Action.from_dict(a) for a in row] for row in d["ranks"]],
            d.get("plan_id", ""),
            d.get("source_digest", ""),
            float(d.get("makespan_s", 0.0)),
        )


def schedule_digest(schedule: Schedule) -> str:
    return hashlib.sha256(schedule.to_csv().encode()).hexdigest()


def compile_plan(
    schedule: Schedule,
    placement: ChunkPlacement | None = None,
    message_bytes: Callable[[Segment], float] | None = None,
    *,
    batch: bool = True,
    check: bool = True,
) -> ExecutionPlan:
    """Per-rank actions for ``schedule``.

    ``placement`` supplies chunk ids for stage actions; ``message_bytes``
    sizes the activation or gradient a segment hands to the next rank.
    """
    pb = schedule.problem
    if check:
        errs = validate_schedule(schedule)
        if errs:
            raise InvalidSchedule("; ".join(errs[:5]))
    P = pb.P
    pos = [0] * pb.n_stages
    for order in schedule.orders:
        for i, s in enumerate(order):
            pos[s] = i

    # messages: one per cross-rank or delayed dependency, tagged by consumer then producer
    msgs = []
    for st in pb.stages:
        for p, delay in st.preds:
            if pb.stages[p].rank != st.rank or delay > 0:
                msgs.append((st.segment, st.rank, st.id, p, delay))
    msgs.sort()
    sends: dict[int, list[tuple[int, int, float, float]]] = {}
    recv_after: dict[tuple[int, int], list] = {}  # (rank, position) -> messages
    waits: dict[int, list[int]] = {}
    for tag, (seg, rank, x, y, delay) in enumerate(msgs):
        nbytes = message_bytes(pb.segments[pb.stages[y].segment]) if message_bytes else 0.0
        sends.setdefault(y, []).append((tag, rank, nbytes, delay))
        t_send = schedule.end[y]
        # after the last stage before x on this rank that is done by the send
        at = -1
        for i in range(pos[x]):
            if schedule.end[schedule.orders[rank][i]] <= t_send:
                at = i
        recv_after.setdefault((rank, at), []).append((tag, pb.stages[y].rank, nbytes, delay))
        waits.setdefault(x, []).append(tag)

    def stage_action(s: int) -> Action:
        st = pb.stages[s]
        seg = pb.segments[st.segment]
        chunk = placement.chunk(seg.module, seg.depth, st.rank).id if placement else None
        cand = pb.pairs[st.pair].candidates[schedule.choice[st.pair]]
        return Action(
            FW_STAGE if st.direction == FW else BW_STAGE, stage=s, segment=seg.name, chunk=chunk,
            microbatch=seg.microbatch, submb=seg.submb, strategy=tuple(cand.choices),
            duration_s=schedule.latency(s),
        )

    ranks = []
    for r in range(P):
        row: list[Action] = []

        def point(i: int):
            posts, pend = [], []
            for tag, peer, nbytes, delay in sends.get(schedule.orders[r][i], []) if i >= 0 else []:
                posts.append(Action(ISEND, peer=peer, tag=tag, bytes=nbytes, transfer_s=delay))
                pend.append(Action(WAIT_ISEND, peer=peer, tag=tag))
            for tag, peer, nbytes, delay in recv_after.get((r, i), []):
                posts.append(Action(IRECV, peer=peer, tag=tag, bytes=nbytes, transfer_s=delay))
            if batch and len(posts) > 1:
                row.append(Action(BATCHED_P2P, members=posts))
            else:
                row.extend(posts)
            row.extend(pend)

        point(-1)
        for i, s in enumerate(schedule.orders[r]):
            for tag in waits.get(s, []):
                src = pb.stages[msgs[tag][3]].rank
                row.append(Action(WAIT_IRECV, peer=src, tag=tag))
            row.append(stage_action(s))
            point(i)
        ranks.append(row)
    digest = schedule_digest(schedule)
    return ExecutionPlan(ranks, digest[:16], digest, schedule.makespan)


def segment_message_bytes(plan, submbs: Sequence, costs) -> Callable[[Segment], float]:
    """Boundary activation size of each sub-microbatch, for compile_plan."""
    loads = {s.key: s.load for s in submbs}

    def size(seg: Segment) -> float:
        load = loads[(seg.module, seg.microbatch, seg.submb)]
        return boundary_bytes(plan.model.module(seg.module), load.tokens, costs.tp)

    return size

