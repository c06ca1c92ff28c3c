import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmpipe.model import DeviceSpec, ParallelConfig, builtin_device, builtin_model
from mmpipe.partitioner import (
    EmptyInput,
    SegmentPlan,
    SubMicrobatchConfig,
    TooManyChunks,
    balanced_split,
    build_submicrobatches,
    efficiency_curve,
    make_segment_plan,
    partition_chunks,
    segment_counts,
    select_submb_size,
)
from mmpipe.workload import MicrobatchMeta, make_sample

H800 = builtin_device("H800")


def test_select_smallest_size_reaching_threshold():
    curve = [(4, 0.80), (8, 0.94), (12, 0.96), (16, 1.00)]
    assert select_submb_size(curve) == 12
    assert select_submb_size([(1, 5.0), (2, 5.0), (3, 5.0)]) == 1
    with pytest.raises(EmptyInput):
        select_submb_size([])


def test_efficiency_curve_increasing_with_fixed_overhead():
    vit = builtin_model("VLM-S").module("vit")
    curve = efficiency_curve(vit, range(1, 33), H800, tp=4, pp=4)
    thr = [t for _, t in curve]
    assert all(b > a for a, b in zip(thr, thr[1:]))
    # no overhead, no fixed cost: throughput is flat and the smallest size wins
    flat = DeviceSpec(flops=1e15, mem_bw=1e18, net_bw=1e11, stage_overhead_s=0.0)
    assert select_submb_size(efficiency_curve(vit, [1, 2, 4, 8], flat)) == 1


def test_segment_counts_examples():
    assert segment_counts([10.0, 12.0]) == [1, 1]
    assert segment_counts([10.0, 20.0]) == [1, 2]
    assert segment_counts([1.0, 2.5, 5.2]) == [1, 2, 5]
    # exact multiples are not lost to rounding
    assert segment_counts([0.1, 0.3]) == [1, 3]
    with pytest.raises(EmptyInput):
        segment_counts([])
    with pytest.raises(ValueError):
        segment_counts([2.0, 1.0])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.01, 100), min_size=1, max_size=5), st.floats(0.1, 10))
def test_segment_counts_scale_invariant(T, c):
    T = sorted(T)
    K = segment_counts(T)
    assert K[0] == 1
    assert all(k >= 1 for k in K)
    assert K == sorted(K)
    scaled = segment_counts([t * c for t in T])
    # only ties to an integer boundary may move under float rescaling
    for a, b, t in zip(K, scaled, T):
        ratio = t / T[0]
        if abs(ratio - round(ratio)) > 1e-6:
            assert a == b


def test_partition_chunks_even_and_uneven():
    m = builtin_model("VLM-M")
    pl = partition_chunks(m, 4, {"vit": 1, "lm": 4})
    lm = [c for c in pl.chunks if c.module == "lm"]
    assert [c.hi - c.lo for c in lm] == [4] * 16
    assert [(c.segment, c.rank) for c in lm[:5]] == [(0, 0), (0, 1), (0, 2), (0, 3), (1, 0)]

    s = builtin_model("VLM-S")
    pl = partition_chunks(s, 4, {"vit": 2, "lm": 1})
    vit = [c for c in pl.chunks if c.module == "vit"]
    assert [c.hi - c.lo for c in vit] == [8] * 7 + [7]
    assert vit[0].lo == 0 and vit[-1].hi == 63
    assert all(a.hi == b.lo for a, b in zip(vit, vit[1:]))


def test_too_many_chunks():
    with pytest.raises(TooManyChunks):
        partition_chunks(builtin_model("VLM-S"), 8, {"vit": 1, "lm": 5})


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 500), st.integers(1, 50))
def test_balanced_split(n, parts):
    sizes = balanced_split(n, parts)
    assert sum(sizes) == n and len(sizes) == parts
    assert max(sizes) - min(sizes) <= 1
    assert sizes == sorted(sizes, reverse=True)


def _mb(images):
    return MicrobatchMeta(8192, (make_sample(10, images),))


def test_build_submicrobatches():
    m = builtin_model("VLM-S")
    cfg = SubMicrobatchConfig({"vit": 12, "lm": 8192})
    vit = lambda subs: [s.instances for s in subs if s.module == "vit"]
    assert vit(build_submicrobatches(_mb(48), cfg, m)) == [12] * 4
    assert vit(build_submicrobatches(_mb(10), cfg, m)) == [10]
    assert vit(build_submicrobatches(_mb(25), cfg, m)) == [9, 8, 8]
    assert vit(build_submicrobatches(_mb(0), cfg, m)) == []
    subs = build_submicrobatches(_mb(25), cfg, m, mb_index=3)
    lm = [s for s in subs if s.module == "lm"]
    assert len(lm) == 1 and lm[0].instances == 25 * 169 + 10
    assert [s.key for s in subs[:2]] == [("vit", 3, 0), ("vit", 3, 1)]
    assert sum(s.load.tokens for s in subs if s.module == "vit") == 25 * 169


def test_vlm_s_segment_plan():
    m = builtin_model("VLM-S")
    plan = make_segment_plan(m, ParallelConfig(pp=4, tp=4), H800)
    assert plan.submb.sizes == {"vit": 12, "lm": 8192}
    assert plan.K == {"vit": 1, "lm": 5}
    assert plan.T["vit"] * 1e3 == pytest.approx(20.128, abs=1e-3)
    assert plan.T["lm"] * 1e3 == pytest.approx(114.918, abs=1e-3)
    # lm: 32 layers over 20 chunks
    lm = [c for c in plan.placement.chunks if c.module == "lm"]
    assert len(lm) == 20 and sum(c.hi - c.lo for c in lm) == 32
    assert SegmentPlan.from_dict(plan.to_dict()) == plan


def test_vlm_m_segment_plan():
    plan = make_segment_plan(builtin_model("VLM-M"), ParallelConfig(pp=4, tp=8), H800)
    assert plan.submb.sizes == {"vit": 17, "lm": 8192}
    assert plan.K == {"vit": 1, "lm": 15}


def test_segment_count_capped_by_layers():
    plan = make_segment_plan(builtin_model("VLM-S"), ParallelConfig(pp=8, tp=8), H800)
    assert plan.K["lm"] <= 32 // 8
