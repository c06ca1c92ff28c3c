"""Command-line entry point: mmpipe {profile,partition,plan,simulate,compare,bench}."""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys

from . import io as mio
from .compare import compare_schedulers, rows_csv
from .model import ParallelConfig
from .partitioner import DEFAULT_SWEEP, SegmentPlan, efficiency_curve, make_segment_plan, select_submb_size
from .plan import ExecutionPlan, compile_plan, emit_gantt, replay, segment_message_bytes
from .search import (
    SearchBudget,
    SearchConfig,
    batch_submicrobatches,
    iteration_problem,
    pipeline_ahead,
    search_problem,
)
from .simulator.costs import CostModel
from .workload import synthetic_batch


def _common(p: argparse.ArgumentParser, search: bool = False) -> None:
    p.add_argument("--model", default="VLM-S", help="preset name or model JSON")
    p.add_argument("--device", default="H800", help="preset name or device JSON")
    p.add_argument("--pp", type=int, help="pipeline ranks (default: from the preset)")
    p.add_argument("--tp", type=int, help="tensor-parallel size (default: from the preset)")
    p.add_argument("--instance-tokens", action="append", default=[], metavar="MODULE=TOKENS",
                   help="tokens per instance for modules without a fixed size")
    p.add_argument("--out", help="output file or directory")
    if search:
        p.add_argument("--segment-plan", help="SegmentPlan JSON from `partition` (default: derive)")
        p.add_argument("--batch", help="batch metadata JSON (default: synthetic)")
        p.add_argument("--dist", default="vlm_mixture", help="synthetic distribution name or JSON")
        p.add_argument("--video-tokens-per-second", type=float)
        p.add_argument("--microbatches", type=int, default=8)
        p.add_argument("--budget-ms", type=float, default=1000.0)
        p.add_argument("--workers", type=int, help="search processes (default: half the cores)")
        p.add_argument("--max-rollouts", type=int)
        p.add_argument("--seed", type=int, default=0)


def _setup(args):
    model, par = mio.load_model(args.model)
    dev = mio.load_device(args.device)
    pp = args.pp or (par.pp if par else 1)
    tp = args.tp or (par.tp if par else 1)
    par = ParallelConfig(pp=pp, tp=tp, dp=par.dp if par else 1)
    itok = {}
    for item in args.instance_tokens:
        name, _, val = item.partition("=")
        itok[name] = float(val)
    return model, par, dev, itok


def _segment_plan(args, model, par, dev, itok) -> SegmentPlan:
    if getattr(args, "segment_plan", None):
        return SegmentPlan.from_dict(mio.read_json(args.segment_plan))
    return make_segment_plan(model, par, dev, instance_tokens=itok)


def _batches(args, plan: SegmentPlan, n_iters: int = 1):
    if args.batch:
        return [mio.load_batch(args.batch)]
    dist = mio.load_distribution(args.dist, args.video_tokens_per_second)
    return [synthetic_batch(dist, plan.model.context_length, args.microbatches, args.seed + i, iteration=i)
            for i in range(n_iters)]


def _budget(args) -> SearchBudget:
    return SearchBudget(args.budget_ms, args.workers, args.max_rollouts, args.seed)


def _emit(text: str, out: str | None) -> None:
    if out:
        with open(out, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def cmd_profile(args) -> int:
    model, par, dev, itok = _setup(args)
    rows = []
    for m in model.modules:
        if not m.instance_based:
            continue
        curve = efficiency_curve(m, DEFAULT_SWEEP, dev, tp=par.tp, pp=par.pp, instance_tokens=itok.get(m.name))
        pick = select_submb_size(curve)
        for b, thr in curve:
            rows.append([m.name, b, f"{thr:.6f}", int(b == pick)])
    buf = _csv(["module", "size", "instances_per_s", "selected"], rows)
    _emit(buf, args.out)
    return 0


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def cmd_partition(args) -> int:
    model, par, dev, itok = _setup(args)
    plan = make_segment_plan(model, par, dev, instance_tokens=itok)
    if args.out:
        mio.write_json(plan, args.out)
    else:
        print(f"P={plan.P}")
        for name in plan.K:
            print(f"{name}: B={plan.submb.sizes[name]} K={plan.K[name]} T={plan.T[name] * 1e3:.3f} ms")
    return 0


def cmd_plan(args) -> int:
    model, par, dev, itok = _setup(args)
    plan = _segment_plan(args, model, par, dev, itok)
    batch = _batches(args, plan)[0]
    costs = CostModel(plan.model, dev, plan.parallel.tp)
    cfg = SearchConfig()
    submbs = batch_submicrobatches(plan, batch)
    problem = iteration_problem(plan, submbs, costs, cfg.S)
    report = search_problem(problem, _budget(args), cfg)
    ep = compile_plan(report.schedule, plan.placement, segment_message_bytes(plan, submbs, costs))
    print(f"iteration {batch.iteration}: makespan {report.makespan * 1e3:.3f} ms, "
          f"{report.rollouts} rollouts, {problem.n_stages} stages, plan {ep.plan_id}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        mio.write_json(report.schedule, os.path.join(args.out, "schedule.json"))
        with open(os.path.join(args.out, "plan.json"), "w") as f:
            f.write(ep.to_json() + "\n")
        _emit(emit_gantt(report.schedule, "svg", f"iteration {batch.iteration}"),
              os.path.join(args.out, "gantt.svg"))
        _emit(emit_gantt(report.schedule, "csv"), os.path.join(args.out, "gantt.csv"))
        _emit(report.trace_csv(), os.path.join(args.out, "trace.csv"))
    return 0


def cmd_simulate(args) -> int:
    ep = ExecutionPlan.from_dict(mio.read_json(args.plan))
    rp = replay(ep)
    for d in rp.diagnostics:
        print(f"{d.kind}: {d.message} at {d.witness}")
    if rp.ok:
        drift = abs(rp.makespan - ep.makespan_s)
        print(f"ok: {ep.P} ranks, makespan {rp.makespan * 1e3:.3f} ms (drift {drift:.3g} s)")
    return 0 if rp.ok else 1


def cmd_compare(args) -> int:
    model, par, dev, itok = _setup(args)
    plan = _segment_plan(args, model, par, dev, itok)
    batch = _batches(args, plan)[0]
    costs = CostModel(plan.model, dev, plan.parallel.tp)
    rows, _ = compare_schedulers(plan, batch, costs, _budget(args))
    _emit(rows_csv(rows), args.out)
    return 0


def cmd_bench(args) -> int:
    model, par, dev, itok = _setup(args)
    plan = _segment_plan(args, model, par, dev, itok)
    batches = _batches(args, plan, args.iterations)
    rows = []
    for rep in pipeline_ahead(plan, batches, dev, _budget(args)):
        rows.append([rep.iteration, f"{rep.makespan:.6f}", rep.rollouts, f"{rep.elapsed_ms:.1f}",
                     f"{rep.schedule.bubble_fraction():.4f}"])
    _emit(_csv(["iteration", "makespan_s", "rollouts", "search_ms", "bubble_fraction"], rows), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mmpipe", description="Pipeline schedule planning for multimodal training")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("profile", help="efficiency curves of instance-based modules (CSV)")
    _common(p)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("partition", help="derive sub-microbatch sizes, segment counts and chunks")
    _common(p)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("plan", help="search one iteration and write schedule, plan and Gantt")
    _common(p, search=True)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="replay and validate an execution plan JSON")
    p.add_argument("plan")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="searched vs 1F1B vs encoder-first table (CSV)")
    _common(p, search=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("bench", help="plan several synthetic iterations back to back (CSV)")
    _common(p, search=True)
    p.add_argument("--iterations", type=int, default=4)
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError) as e:
        print(f"mmpipe: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
