"""Operator/tensor DAGs and a deterministic list-scheduling simulator."""

from __future__ import annotations

import csv
import heapq
import io
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Mapping

from ..model import DeviceSpec

GPU, CPU, LINK = "GPU", "CPU", "LINK"


class CycleDetected(ValueError):
    pass


@dataclass(frozen=True)
class OperatorNode:
    """One low-level operation.

    ``device`` names the execution resource (a key of the device map given to
    :func:`simulate`); ``kind`` says what sort of resource it is. A non-None
    ``latency`` bypasses the analytic formula.
    """

    id: str
    device: str = "gpu"
    kind: str = GPU
    n_fop: float = 0.0
    n_mem: float = 0.0
    n_net: float = 0.0
    preds: tuple[str, ...] = ()
    latency: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "preds", tuple(self.preds))
        if min(self.n_fop, self.n_mem, self.n_net) < 0:
            raise ValueError(f"{self.id}: negative demand")
        if self.latency is not None and self.latency < 0:
            raise ValueError(f"{self.id}: negative latency")


@dataclass(frozen=True)
class TensorNode:
    """A data buffer. ``producer=None`` marks a persistent tensor."""

    id: str
    bytes: float
    producer: str | None = None
    consumers: tuple[str, ...] = ()
    device: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "consumers", tuple(self.consumers))
        if self.bytes < 0:
            raise ValueError(f"{self.id}: negative size")


def op_latency(node: OperatorNode, dev: DeviceSpec) -> float:
    if node.latency is not None:
        return node.latency
    if node.kind == CPU:
        return 0.0
    return max(
        dev.alpha_fop * node.n_fop / dev.flops,
        dev.alpha_mem * node.n_mem / dev.mem_bw,
        dev.alpha_net * node.n_net / dev.net_bw,
    )


@dataclass
class SimGraph:
    operators: list[OperatorNode] = field(default_factory=list)
    tensors: list[TensorNode] = field(default_factory=list)

    def __post_init__(self):
        self._ops = {}
        for op in self.operators:
            if op.id in self._ops:
                raise ValueError(f"duplicate operator {op.id!r}")
            self._ops[op.id] = op

    def add(self, op: OperatorNode) -> OperatorNode:
        if op.id in self._ops:
            raise ValueError(f"duplicate operator {op.id!r}")
        self.operators.append(op)
        self._ops[op.id] = op
        return op

    def add_tensor(self, t: TensorNode) -> TensorNode:
        self.tensors.append(t)
        return t

    def op(self, op_id: str) -> OperatorNode:
        return self._ops[op_id]

    @property
    def entry(self) -> list[str]:
        return [o.id for o in self.operators if not o.preds]

    @property
    def exit(self) -> list[str]:
        used = {p for o in self.operators for p in o.preds}
        return [o.id for o in self.operators if o.id not in used]

    def check(self) -> None:
        for o in self.operators:
            for p in o.preds:
                if p not in self._ops:
                    raise ValueError(f"{o.id}: unknown predecessor {p!r}")
        for t in self.tensors:
            for c in t.consumers + ((t.producer,) if t.producer else ()):
                if c not in self._ops:
                    raise ValueError(f"tensor {t.id}: unknown operator {c!r}")

    def topo_order(self) -> list[str]:
        """Kahn's algorithm; among ready operators the earliest inserted wins."""
        pos = {o.id: i for i, o in enumerate(self.operators)}
        indeg = {o.id: len(o.preds) for o in self.operators}
        succ: dict[str, list[str]] = {o.id: [] for o in self.operators}
        for o in self.operators:
            for p in o.preds:
                succ[p].append(o.id)
        ready = [pos[o.id] for o in self.operators if not o.preds]
        heapq.heapify(ready)
        out = []
        while ready:
            oid = self.operators[heapq.heappop(ready)].id
            out.append(oid)
            for s in succ[oid]:
                indeg[s] -= 1
                if indeg[s] == 0:
                    heapq.heappush(ready, pos[s])
        if len(out) != len(self.operators):
            stuck = sorted(k for k, v in indeg.items() if v > 0)
            raise CycleDetected(f"cycle among {stuck[:8]}")
        return out


@dataclass
class SimTimeline:
    start: dict[str, float]
    end: dict[str, float]
    makespan: float
    # device -> [(time, bytes)] step points; value holds until the next point
    memory: dict[str, list[tuple[float, float]]]
    device_of: dict[str, str] = field(default_factory=dict)

    @property
    def peak_memory(self) -> dict[str, float]:
        return {d: max((b for _, b in pts), default=0.0) for d, pts in self.memory.items()}

    def memory_at(self, device: str, t: float) -> float:
        pts = self.memory.get(device, [])
        i = bisect_right([p[0] for p in pts], t) - 1
        return pts[i][1] if i >= 0 else 0.0

    def busy(self, device: str) -> float:
        return sum(self.end[o] - self.start[o] for o, d in self.device_of.items() if d == device)


def tensor_lifetimes(graph: SimGraph, end: Mapping[str, float], makespan: float):
    """(device, alloc, free, bytes) per tensor over the half-open [alloc, free).

    Persistent tensors and tensors nobody consumes live until the makespan.
    """
    out = []
    for t in graph.tensors:
        if t.producer is None:
            lo, hi = 0.0, makespan
            home = graph.op(t.consumers[0]).device if t.consumers else "gpu"
        else:
            lo = end[t.producer]
            hi = max((end[c] for c in t.consumers), default=makespan)
            home = graph.op(t.producer).device
        out.append((t.device or home, lo, max(lo, hi), t.bytes))
    return out


def simulate(graph: SimGraph, devices: Mapping[str, DeviceSpec] | DeviceSpec) -> SimTimeline:
    """List-schedule ``graph`` in topological order.

    Each operator starts at the later of its predecessors' end and its
    device becoming free. ``devices`` may be a single spec used for every
    device name.
    """
    graph.check()
    order = graph.topo_order()
    free: dict[str, float] = {}
    start: dict[str, float] = {}
    end: dict[str, float] = {}
    for oid in order:
        op = graph.op(oid)
        dev = devices if isinstance(devices, DeviceSpec) else devices[op.device]
        t0 = max([free.get(op.device, 0.0)] + [end[p] for p in op.preds])
        start[oid] = t0
        end[oid] = t0 + op_latency(op, dev)
        free[op.device] = end[oid]
    makespan = max(end.values(), default=0.0)

    deltas: dict[str, dict[float, float]] = {}
    for dev, lo, hi, b in tensor_lifetimes(graph, end, makespan):
        d = deltas.setdefault(dev, {})
        if hi > lo:
            d[lo] = d.get(lo, 0.0) + b
            d[hi] = d.get(hi, 0.0) - b
    memory = {}
    for dev in sorted(deltas):
        level, pts = 0.0, []
        for t in sorted(deltas[dev]):
            level += deltas[dev][t]
            pts.append((t, level))
        memory[dev] = pts
    device_of = {o.id: o.device for o in graph.operators}
    return SimTimeline(start, end, makespan, memory, device_of)


def timeline_csv(graph: SimGraph, tl: SimTimeline) -> str:
    """CSV rows (device, op_id, start, end, bytes_delta) in start order.

    ``bytes_delta`` is the net memory change at the operator's end: tensors it
    produces minus tensors it was the last consumer of.
    """
    delta = {o.id: 0.0 for o in graph.operators}
    for t in graph.tensors:
        if t.producer:
            delta[t.producer] += t.bytes
            if t.consumers:
                last = max(t.consumers, key=lambda c: (tl.end[c], c))
                delta[last] -= t.bytes
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["device", "op_id", "start", "end", "bytes_delta"])
    for o in sorted(graph.operators, key=lambda o: (tl.start[o.id], o.device, o.id)):
        w.writerow([o.device, o.id, repr(tl.start[o.id]), repr(tl.end[o.id]), repr(delta[o.id])])
    return buf.getvalue()


def critical_path(graph: SimGraph, devices) -> float:
    """Longest latency-weighted path, a lower bound on the makespan."""
    best: dict[str, float] = {}
    for oid in graph.topo_order():
        op = graph.op(oid)
        dev = devices if isinstance(devices, DeviceSpec) else devices[op.device]
        best[oid] = max([best[p] for p in op.preds], default=0.0) + op_latency(op, dev)
    return max(best.values(), default=0.0)
