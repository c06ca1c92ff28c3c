import json
import random

import pytest

from helpers import random_instance, uniform_chain
from mmpipe.model import ParallelConfig, builtin_device, builtin_model
from mmpipe.partitioner import make_segment_plan
from mmpipe.plan import (
    BATCHED_P2P,
    BW_STAGE,
    DEADLOCK,
    FW_STAGE,
    IRECV,
    ISEND,
    UNMATCHED_TAG,
    UNMATCHED_WAIT,
    WAIT_IRECV,
    WAIT_ISEND,
    Action,
    ExecutionPlan,
    InvalidSchedule,
    compile_plan,
    emit_gantt,
    replay,
    segment_message_bytes,
    validate_plan,
)
from mmpipe.scheduler import Deadlock, Unit, build_problem, fixed_strategy, interleave_stages, retime, schedule_1f1b
from mmpipe.scheduler import uniform_problem
from mmpipe.search import SearchBudget, batch_submicrobatches, iteration_problem, search_problem
from mmpipe.simulator.costs import CostModel
from mmpipe.workload import synthetic_batch, vlm_mixture


def kinds(actions):
    return [a.kind for a in actions]


def test_single_rank_has_no_comms():
    ep = compile_plan(interleave_stages(uniform_chain(3, 1, 1.0, 2.0)))
    assert set(kinds(ep.ranks[0])) == {FW_STAGE, BW_STAGE}
    assert len(ep.ranks[0]) == 6
    assert validate_plan(ep) == []


def test_two_rank_forward_hand_compiled():
    ep = compile_plan(interleave_stages(uniform_chain(1, 2, 1.0, 2.0, p2p=0.5)))
    r0, r1 = ep.flat(0), ep.flat(1)
    # forward hand-off: rank0 sends after its stage, rank1 receives before its own
    assert kinds(r0[:2]) == [FW_STAGE, ISEND]
    assert kinds(r1[:3]) == [IRECV, WAIT_IRECV, FW_STAGE]
    assert r0[1].peer == 1 and r1[0].peer == 0 and r0[1].tag == r1[0].tag
    assert WAIT_ISEND in kinds(r0) and kinds(r0).index(WAIT_ISEND) > 1
    # the gradient goes back the other way
    assert kinds(r1[-3:]) == [BW_STAGE, ISEND, WAIT_ISEND]
    assert kinds(r0[-2:]) == [WAIT_IRECV, BW_STAGE]


def test_sends_to_same_peer_are_batched():
    units = [Unit("vit", 0, 0, 1), Unit("vit", 0, 1, 1), Unit("lm", 0, 0, 1)]
    pb = build_problem(units, 2, [("vit", "lm")], ("vit", "lm"), lambda u, d, r: [fixed_strategy(1.0, 2.0)],
                       lambda u: 0.1, encoders=["vit"])
    ep = compile_plan(interleave_stages(pb))
    row = ep.ranks[0]
    i = next(i for i, a in enumerate(row) if a.kind == BW_STAGE and "lm" in a.segment)
    assert row[i + 1].kind == BATCHED_P2P
    sends = [m for m in row[i + 1].members if m.kind == ISEND]
    assert len(sends) == 2 and {m.peer for m in sends} == {1}
    assert validate_plan(ep) == []


def test_unbatched_plan_behaves_the_same():
    rng = random.Random(4)
    for _ in range(20):
        inst = random_instance(rng, capacity="inf")
        ep = compile_plan(interleave_stages(inst.problem))
        a, b = replay(ep), replay(ep.unbatched())
        assert a.ok and b.ok
        assert a.start == b.start
        if not any(a.kind == BATCHED_P2P for row in ep.ranks for a in row):
            assert ep.unbatched().to_dict() == ep.to_dict()


def test_round_trip_replay_matches_schedule():
    rng = random.Random(7)
    for _ in range(40):
        inst = random_instance(rng)
        try:
            s = interleave_stages(inst.problem)
        except Deadlock:
            continue
        ep = compile_plan(s)
        rp = replay(ep)
        assert rp.ok, rp.diagnostics
        for st in range(inst.problem.n_stages):
            assert abs(rp.start[st] - s.start[st]) <= 1e-9
        cross = sum(1 for st in inst.problem.stages for p, d in st.preds
                    if inst.problem.stages[p].rank != st.rank or d > 0)
        assert ep.count(ISEND) == ep.count(IRECV) == cross


def test_single_rank_adapter_delay_kept():
    units = [Unit("vit", 0, 0, 1), Unit("lm", 0, 0, 1)]
    pb = build_problem(units, 1, [("vit", "lm")], ("vit", "lm"), lambda u, d, r: [fixed_strategy(1.0, 2.0)],
                       edge_latency=lambda a, b: 0.25, encoders=["vit"])
    s = interleave_stages(pb)
    ep = compile_plan(s)
    assert ep.count(ISEND) == 2 and all(a.peer == 0 for a in ep.flat(0) if a.kind == ISEND)
    rp = replay(ep)
    assert rp.ok and rp.start == dict(enumerate(s.start))


def test_invalid_schedule_rejected():
    pb = uniform_chain(1, 1, 1.0, 2.0)
    s = retime(pb, [[0, 1]])
    s.start[1] = 0.5  # overlaps the forward
    with pytest.raises(InvalidSchedule):
        compile_plan(s)


def test_constructed_deadlock_has_two_rank_witness():
    ep = ExecutionPlan([
        [Action(IRECV, peer=1, tag=1), Action(WAIT_IRECV, peer=1, tag=1),
         Action(ISEND, peer=1, tag=0), Action(WAIT_ISEND, peer=1, tag=0)],
        [Action(IRECV, peer=0, tag=0), Action(WAIT_IRECV, peer=0, tag=0),
         Action(ISEND, peer=0, tag=1), Action(WAIT_ISEND, peer=0, tag=1)],
    ])
    diags = validate_plan(ep)
    assert [d.kind for d in diags] == [DEADLOCK]
    assert sorted(diags[0].witness) == [(0, 1), (1, 1)]


def test_orphan_irecv():
    ep = ExecutionPlan([[Action(IRECV, peer=1, tag=5), Action(WAIT_IRECV, peer=1, tag=5)], []])
    assert UNMATCHED_TAG in {d.kind for d in validate_plan(ep)}


def test_wait_without_post():
    ep = ExecutionPlan([[Action(WAIT_ISEND, peer=1, tag=0), Action(ISEND, peer=1, tag=0)],
                        [Action(IRECV, peer=0, tag=0), Action(WAIT_IRECV, peer=0, tag=0)]])
    assert UNMATCHED_WAIT in {d.kind for d in validate_plan(ep)}


def test_json_round_trip_and_chunks():
    model = builtin_model("VLM-S")
    dev = builtin_device("H800")
    plan = make_segment_plan(model, ParallelConfig(pp=4, tp=4), dev)
    batch = synthetic_batch(vlm_mixture(), 8192, 2, seed=1)
    costs = CostModel(model, dev, 4)
    submbs = batch_submicrobatches(plan, batch)
    rep = search_problem(iteration_problem(plan, submbs, costs), SearchBudget(1000, workers=1, max_rollouts=3))
    ep = compile_plan(rep.schedule, plan.placement, segment_message_bytes(plan, submbs, costs))
    d = json.loads(ep.to_json())
    assert d["schema_version"] == 1 and d["num_ranks"] == 4
    back = ExecutionPlan.from_dict(d)
    assert back.to_json() == ep.to_json()
    stages = [a for r in range(4) for a in ep.flat(r) if a.kind in (FW_STAGE, BW_STAGE)]
    assert all(a.chunk is not None for a in stages)
    sends = [a for r in range(4) for a in ep.flat(r) if a.kind == ISEND]
    assert all(a.bytes > 0 for a in sends)
    assert abs(replay(back).makespan - rep.makespan) <= 1e-9
    with pytest.raises(ValueError):
        ExecutionPlan.from_dict({**d, "schema_version": 99})


def test_compile_is_deterministic():
    s = interleave_stages(random_instance(random.Random(2), capacity="inf").problem)
    assert compile_plan(s).to_json() == compile_plan(s).to_json()


def test_gantt_csv_rows_and_determinism():
    s = schedule_1f1b(uniform_problem(8, 4, 1.0, 2.0))
    text = emit_gantt(s, "csv")
    assert len(text.splitlines()) == 1 + s.problem.n_stages
    assert emit_gantt(s, "csv") == text
    assert emit_gantt(s, "svg", "1f1b") == emit_gantt(s, "svg", "1f1b")
    # staircase: rank r starts r forward steps late
    firsts = [s.start[order[0]] for order in s.orders]
    assert firsts == [0.0, 1.0, 2.0, 3.0]


def test_gantt_empty_schedule_has_lanes():
    pb = build_problem([], 3, (), ("m",), lambda u, d, r: [])
    svg = emit_gantt(retime(pb, [[], [], []]), "svg")
    assert svg.count(">rank ") == 3
    with pytest.raises(ValueError):
        emit_gantt(retime(pb, [[], [], []]), "png")
