"""Analytic per-layer costs and per-stage operator graphs.

Per transformer layer with s tokens, hidden h, FFN width f, H heads and g KV
groups, the forward pass performs

    2*s*h*(h + 2*h*g/H + h)     QKV and output projections
  + 6*s*h*f                     gated FFN (three matmuls)
  + 4*attn_sq*h                 attention scores and weighted sum

FLOPs, all divided by the tensor-parallel width. ``attn_sq`` is s**2 when
attention spans the packed sequence and the sum of squared instance lengths
when it is confined to each instance. The backward pass costs twice the
forward in FLOPs and bytes. Memory traffic is the layer's parameter bytes plus
``C_ACT*s*h`` activation bytes; the same ``C_ACT*s*h/TP`` bytes are held from
forward to backward unless a memory strategy drops them.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from ..model import Chunk, DeviceSpec, ModalityModuleSpec, ModelSpec
from .graph import GPU, LINK, OperatorNode, SimGraph, TensorNode, simulate

C_ACT = 34  # activation bytes per token per hidden unit per layer (bf16)
C_BOUNDARY = 2  # bytes per token per hidden unit at a layer boundary
PARAM_BYTES = 2
STATIC_BYTES_PER_PARAM = 16  # bf16 weights and grads plus fp32 Adam states

NONE, CHECKPOINT, OFFLOAD = "none", "checkpoint", "offload"
STRATEGIES = (NONE, CHECKPOINT, OFFLOAD)
FORWARD, BACKWARD = "fw", "bw"


class EmptyStage(ValueError):
    pass


@dataclass(frozen=True)
class Load:
    """What one stage computes on: token count and attention work."""

    tokens: float = 0.0
    attn_sq: float = 0.0
    instances: int = 0

    @classmethod
    def sequence(cls, tokens: float) -> "Load":
        return cls(tokens, tokens * tokens, 0)

    @classmethod
    def per_instance(cls, lengths: Iterable[float]) -> "Load":
        lengths = list(lengths)
        return cls(sum(lengths), sum(t * t for t in lengths), len(lengths))

    @property
    def empty(self) -> bool:
        return self.tokens <= 0


def layer_params(m: ModalityModuleSpec) -> float:
    kv = m.hidden * m.groups / m.heads
    return 2 * m.hidden**2 + 2 * m.hidden * kv + 3 * m.hidden * m.ffn


def layer_fw_flops(m: ModalityModuleSpec, load: Load, tp: int = 1) -> float:
    s, h, f = load.tokens, m.hidden, m.ffn
    proj = 2 * s * h * (h + 2 * h * m.groups / m.heads + h)
    return (proj + 6 * s * h * f + 4 * load.attn_sq * h) / tp


def layer_fw_bytes(m: ModalityModuleSpec, load: Load, tp: int = 1) -> float:
    return (PARAM_BYTES * layer_params(m) + C_ACT * load.tokens * m.hidden) / tp


def activation_bytes(m: ModalityModuleSpec, tokens: float, tp: int = 1) -> float:
    return C_ACT * tokens * m.hidden / tp


def boundary_bytes(m: ModalityModuleSpec, tokens: float, tp: int = 1) -> float:
    return C_BOUNDARY * tokens * m.hidden / tp


@dataclass(frozen=True)
class CostOverrides:
    """Fixed per-layer seconds keyed by (module, direction), bypassing FLOPs.

    ``p2p_s`` when set replaces the analytic point-to-point latency.
    """

    per_layer: Mapping[tuple[str, str], float] = field(default_factory=dict)
    p2p_s: float | None = None

    def get(self, module: str, direction: str) -> float | None:
        return self.per_layer.get((module, direction))

    def to_dict(self) -> dict:
        rows = [
            {"module": m, "direction": d, "seconds": v}
            for (m, d), v in sorted(self.per_layer.items())
        ]
        return {"schema_version": 1, "per_layer": rows, "p2p_s": self.p2p_s}

    @classmethod
    def from_dict(cls, d: Mapping) -> "CostOverrides":
        table = {(r["module"], r["direction"]): float(r["seconds"]) for r in d.get("per_layer", [])}
        p2p = d.get("p2p_s")
        return cls(table, None if p2p is None else float(p2p))

    @classmethod
    def load(cls, path) -> "CostOverrides":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _layer_op(gid, m, load, tp, direction, overrides, preds):
    fixed = overrides.get(m.name, direction) if overrides else None
    if fixed is not None:
        return OperatorNode(gid, preds=preds, latency=fixed)
    mult = 2.0 if direction == BACKWARD else 1.0
    return OperatorNode(
        gid,
        kind=GPU,
        n_fop=mult * layer_fw_flops(m, load, tp),
        n_mem=mult * layer_fw_bytes(m, load, tp),
        preds=preds,
    )


def build_stage_graph(
    module: ModalityModuleSpec,
    chunk: Chunk | tuple[int, int],
    load: Load,
    strategy: str = NONE,
    *,
    direction: str = FORWARD,
    tp: int = 1,
    overhead_s: float = 0.0,
    overrides: CostOverrides | None = None,
) -> SimGraph:
    """Operator graph of one stage: one forward or backward pass of a chunk.

    Layers run back to back on the device. ``checkpoint`` keeps only each
    layer's input and recomputes the forward before its backward;
    ``offload`` keeps the input on device and ships the rest to host memory,
    paying the transfer on the same stream in both directions.
    """
    lo, hi = (chunk.lo, chunk.hi) if isinstance(chunk, Chunk) else chunk
    if hi <= lo:
        raise EmptyStage(f"{module.name}: empty layer range [{lo}, {hi})")
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown memory strategy {strategy!r}")
    g = SimGraph()
    if load.empty:
        return g
    full = activation_bytes(module, load.tokens, tp)
    keep = full if strategy == NONE else boundary_bytes(module, load.tokens, tp)
    moved = full - keep if strategy == OFFLOAD else 0.0
    last: tuple[str, ...] = ()
    if overhead_s > 0:
        last = (g.add(OperatorNode(f"{direction}.overhead", latency=overhead_s)).id,)

    if direction == FORWARD:
        for layer in range(lo, hi):
            op = g.add(_layer_op(f"fw.{layer}", module, load, tp, FORWARD, overrides, last))
            last = (op.id,)
            if moved:
                last = (g.add(OperatorNode(f"offload.{layer}", kind=LINK, n_net=moved, preds=last)).id,)
            # held until the backward stage, so it outlives this graph
            g.add_tensor(TensorNode(f"act.{layer}", keep, producer=op.id))
        return g

    for layer in reversed(range(lo, hi)):
        if moved:
            last = (g.add(OperatorNode(f"reload.{layer}", kind=LINK, n_net=moved, preds=last)).id,)
        if strategy == CHECKPOINT:
            last = (g.add(_layer_op(f"recompute.{layer}", module, load, tp, FORWARD, overrides, last)).id,)
        op = g.add(_layer_op(f"bw.{layer}", module, load, tp, BACKWARD, overrides, last))
        g.add_tensor(TensorNode(f"act.{layer}", keep, consumers=(op.id,)))
        last = (op.id,)
    return g


@dataclass(frozen=True)
class StageCost:
    module: str
    layer_range: tuple[int, int]
    load: Load
    strategy: str
    fw: float
    bw: float
    act_bytes: float  # held on device between forward and backward
    param_bytes: float
    fw_flops: float

    @property
    def latency(self) -> float:
        return self.fw + self.bw


@dataclass(frozen=True)
class LayerOption:
    strategy: str
    fw: float
    bw: float
    mem: float

    @property
    def latency(self) -> float:
        return self.fw + self.bw


class CostModel:
    """Memoized stage costs for one model on one device type.

    Reads are lock-free dictionary lookups; a miss computes outside the lock
    and publishes with ``setdefault`` so concurrent readers always see either
    nothing or a complete entry.
    """

    def __init__(
        self,
        model: ModelSpec,
        device: DeviceSpec,
        tp: int = 1,
        overrides: CostOverrides | None = None,
        strategies: Iterable[str] = STRATEGIES,
    ):
        self.model = model
        self.device = device
        self.tp = tp
        self.overrides = overrides
        self.strategies = tuple(strategies)
        self._cache: dict = {}
        self._lock = threading.Lock()

    def _memo(self, key, fn):
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        val = fn()
        with self._lock:
            return self._cache.setdefault(key, val)

    def _graph_latency(self, module, rng, load, strategy, direction, overhead):
        g = build_stage_graph(
            module, rng, load, strategy, direction=direction, tp=self.tp,
            overhead_s=overhead, overrides=self.overrides,
        )
        return simulate(g, self.device).makespan

    def stage(self, module: str, layer_range: tuple[int, int], load: Load, strategy: str = NONE) -> StageCost:
        key = ("stage", module, tuple(layer_range), load, strategy)
        return self._memo(key, lambda: self._stage(module, tuple(layer_range), load, strategy))

    def _stage(self, name, rng, load, strategy):
        m = self.model.module(name)
        n = rng[1] - rng[0]
        oh = 0.0 if load.empty else self.device.stage_overhead_s
        fw = self._graph_latency(m, rng, load, strategy, FORWARD, oh)
        bw = self._graph_latency(m, rng, load, strategy, BACKWARD, oh)
        if load.empty:
            held = 0.0
        elif strategy == NONE:
            held = n * activation_bytes(m, load.tokens, self.tp)
        else:
            held = n * boundary_bytes(m, load.tokens, self.tp)
        return StageCost(
            name, rng, load, strategy, fw, bw, held,
            n * PARAM_BYTES * layer_params(m) / self.tp,
            n * layer_fw_flops(m, load, self.tp),
        )

    def layer_options(self, module: str, load: Load) -> tuple[LayerOption, ...]:
        """Per-layer (fw, bw, held bytes) of each strategy, without overhead."""

        def build():
            m = self.model.module(module)
            out = []
            for s in self.strategies:
                fw = self._graph_latency(m, (0, 1), load, s, FORWARD, 0.0)
                bw = self._graph_latency(m, (0, 1), load, s, BACKWARD, 0.0)
                out.append(LayerOption(s, fw, bw, self.stage(module, (0, 1), load, s).act_bytes))
            return tuple(out)

        return self._memo(("layers", module, load), build)

    def overhead(self, load: Load) -> float:
        return 0.0 if load.empty else self.device.stage_overhead_s

    def p2p(self, module: str, load: Load) -> float:
        """Seconds to ship one boundary activation to the next rank."""
        if self.overrides is not None and self.overrides.p2p_s is not None:
            return self.overrides.p2p_s
        b = boundary_bytes(self.model.module(module), load.tokens, self.tp)
        return self.device.alpha_net * b / self.device.net_bw

    def static_bytes(self, chunks: Iterable[Chunk]) -> float:
        """Weights, gradients and optimizer state of ``chunks``."""
        total = 0.0
        for c in chunks:
            m = self.model.module(c.module)
            total += c.num_layers * layer_params(m) * STATIC_BYTES_PER_PARAM / self.tp
        return total


def stage_cost_table(
    costs: CostModel,
    placement,
    loads: Mapping[object, tuple[str, Load]],
    strategies: Iterable[str] | None = None,
) -> dict[tuple[int, object, str], StageCost]:
    """StageCost for every (chunk id, sub-microbatch key, strategy).

    ``loads`` maps a sub-microbatch key to (module name, Load); only chunks
    of that module are paired with it.
    """
    strategies = tuple(strategies or costs.strategies)
    out = {}
    for key, (module, load) in loads.items():
        for c in placement.chunks:
            if c.module != module:
                continue
            for s in strategies:
                out[(c.id, key, s)] = costs.stage(module, (c.lo, c.hi), load, s)
    return out
