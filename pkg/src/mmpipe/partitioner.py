"""Modality-aware partitioning.

Offline: pick a sub-microbatch size per module from its efficiency curve,
derive segment counts from the modules' latencies and cut every module into
P*K consecutive-layer chunks. Online: split each microbatch into balanced
modality-specific sub-microbatches.

Sizes are keyed by module name. Instance-scoped modules (ViT over images, DiT
over clips) count instances; sequence-scoped modules count tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .model import (
    Chunk,
    ChunkPlacement,
    DeviceSpec,
    ModalityModuleSpec,
    ModelSpec,
    ParallelConfig,
)
from .simulator.costs import CostModel, CostOverrides, Load
from .workload import MicrobatchMeta

EFFICIENCY_THRESHOLD = 0.95
# ratios this close below an integer count as that integer
_FLOOR_SLACK = 1e-9


class EmptyInput(ValueError):
    pass


class TooManyChunks(ValueError):
    pass


@dataclass(frozen=True)
class SubMicrobatchConfig:
    sizes: Mapping[str, int]

    def __post_init__(self):
        for name, b in self.sizes.items():
            if b < 1:
                raise ValueError(f"{name}: sub-microbatch size must be >= 1")

    def __getitem__(self, module: str) -> int:
        return self.sizes[module]


@dataclass(frozen=True)
class SubMicrobatch:
    module: str
    microbatch: int
    index: int
    instances: int  # tokens for sequence-scoped modules
    load: Load

    @property
    def tokens(self) -> float:
        return self.load.tokens

    @property
    def key(self) -> tuple[str, int, int]:
        return (self.module, self.microbatch, self.index)


def balanced_split(n: int, parts: int) -> list[int]:
    """``parts`` sizes summing to n, the first n % parts one larger."""
    q, r = divmod(n, parts)
    return [q + 1] * r + [q] * (parts - r)


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def _probe_model(module: ModalityModuleSpec) -> ModelSpec:
    return ModelSpec(module.name, (module,), ())


def module_latency(
    costs: CostModel, module: ModalityModuleSpec, load: Load, pp: int
) -> float:
    """Forward plus backward seconds of the whole module split over ``pp`` chunks."""
    total = 0.0
    for n in balanced_split(module.num_layers, pp):
        total += costs.stage(module.name, (0, n), load).latency
    return total


def probe_load(module: ModalityModuleSpec, size: int, instance_tokens: float | None = None) -> Load:
    if not module.instance_based:
        return Load.sequence(size)
    tpi = instance_tokens if instance_tokens is not None else module.tokens_per_instance
    if tpi is None:
        raise ValueError(f"{module.name}: tokens per instance must be configured")
    return Load.per_instance([tpi] * size)


def efficiency_curve(
    module: ModalityModuleSpec,
    sizes: Sequence[int],
    dev: DeviceSpec,
    *,
    tp: int = 1,
    pp: int = 1,
    instance_tokens: float | None = None,
    overrides: CostOverrides | None = None,
) -> list[tuple[int, float]]:
    """(size, instances per second) for the full module at each size."""
    if list(sizes) != sorted(sizes) or (sizes and sizes[0] < 1):
        raise ValueError("sizes must be ascending and >= 1")
    costs = CostModel(_probe_model(module), dev, tp, overrides)
    out = []
    for b in sizes:
        t = module_latency(costs, module, probe_load(module, b, instance_tokens), pp)
        out.append((b, b / t if t > 0 else math.inf))
    return out


def select_submb_size(curve: Sequence[tuple[int, float]], threshold: float = EFFICIENCY_THRESHOLD) -> int:
    """Smallest size whose throughput reaches ``threshold`` of the best tested."""
    if not curve:
        raise EmptyInput("empty efficiency curve")
    peak = max(t for _, t in curve)
    return min(b for b, t in curve if t >= threshold * peak)


def segment_counts(T: Sequence[float]) -> list[int]:
    """K_i = floor(T_i / T_1) for ascending latencies."""
    if not T:
        raise EmptyInput("no module latencies")
    if T[0] <= 0:
        raise ValueError("latencies must be positive")
    if any(b < a for a, b in zip(T, T[1:])):
        raise ValueError("latencies must be ascending")
    return [math.floor(t / T[0] + _FLOOR_SLACK) for t in T]


def partition_chunks(model: ModelSpec, P: int, K: Mapping[str, int]) -> ChunkPlacement:
    """Cut module i into P*K_i consecutive chunks; chunk (k, rank) is range k*P+rank.

    The first L mod (P*K) chunks get the extra layers.
    """
    chunks = []
    for name in model.topo_order():
        m = model.module(name)
        k = K[name]
        n = P * k
        if n > m.num_layers:
            raise TooManyChunks(f"{name}: {n} chunks for {m.num_layers} layers")
        lo = 0
        for j, size in enumerate(balanced_split(m.num_layers, n)):
            seg, rank = divmod(j, P)
            chunks.append(Chunk(len(chunks), name, lo, lo + size, seg, rank))
            lo += size
    return ChunkPlacement(P, tuple(chunks), {n: K[n] for n in model.topo_order()})


def module_input(model: ModelSpec, module: ModalityModuleSpec, mb: MicrobatchMeta) -> tuple[int, list[float]]:
    """(N, per-unit token lengths) a module sees in ``mb``.

    A sequence-scoped backbone reads the whole packed sequence; other modules
    read their own modality.
    """
    if module.instance_based:
        lengths = mb.instance_tokens(module.modality)
        return len(lengths), lengths
    if module.name == model.backbone.name:
        n = mb.total_tokens
    else:
        n = mb.tokens(module.modality)
    return n, []


def build_submicrobatches(
    mb: MicrobatchMeta, cfg: SubMicrobatchConfig, model: ModelSpec, mb_index: int = 0
) -> list[SubMicrobatch]:
    """M_i = ceil(N_i/B_i) balanced sub-microbatches per module, in module order."""
    out = []
    for name in model.topo_order():
        m = model.module(name)
        n, lengths = module_input(model, m, mb)
        if n == 0:
            continue
        sizes = balanced_split(n, ceil_div(n, cfg[name]))
        pos = 0
        for j, size in enumerate(sizes):
            if m.instance_based:
                load = Load.per_instance(lengths[pos : pos + size])
            else:
                load = Load.sequence(size)
            out.append(SubMicrobatch(name, mb_index, j, size, load))
            pos += size
    return out


@dataclass(frozen=True)
class SegmentPlan:
    model: ModelSpec
    parallel: ParallelConfig
    submb: SubMicrobatchConfig
    K: Mapping[str, int]
    T: Mapping[str, float]  # reference latency per module at its B_i
    placement: ChunkPlacement

    @property
    def P(self) -> int:
        return self.parallel.pp

    def split(self, mb: MicrobatchMeta, mb_index: int = 0) -> list[SubMicrobatch]:
        return build_submicrobatches(mb, self.submb, self.model, mb_index)

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "model": self.model.to_dict(),
            "parallel": {"pp": self.parallel.pp, "tp": self.parallel.tp, "dp": self.parallel.dp},
            "submb_sizes": dict(self.submb.sizes),
            "segment_counts": dict(self.K),
            "reference_latency_s": dict(self.T),
            "placement": self.placement.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SegmentPlan":
        return cls(
            model=ModelSpec.from_dict(d["model"]),
            parallel=ParallelConfig(**d["parallel"]),
            submb=SubMicrobatchConfig({k: int(v) for k, v in d["submb_sizes"].items()}),
            K={k: int(v) for k, v in d["segment_counts"].items()},
            T={k: float(v) for k, v in d.get("reference_latency_s", {}).items()},
            placement=ChunkPlacement.from_dict(d["placement"]),
        )


DEFAULT_SWEEP = tuple(range(1, 33))


def make_segment_plan(
    model: ModelSpec,
    parallel: ParallelConfig,
    dev: DeviceSpec,
    *,
    sizes: Mapping[str, int] | None = None,
    sweep: Sequence[int] = DEFAULT_SWEEP,
    instance_tokens: Mapping[str, float] | None = None,
    overrides: CostOverrides | None = None,
) -> SegmentPlan:
    """Offline phase: choose B_i, measure T_i, derive K_i and place chunks.

    Sequence-scoped modules default to one sub-microbatch per microbatch
    (B = context length). K_i is capped at floor(L_i / P) so every chunk
    keeps at least one layer.
    """
    sizes = dict(sizes or {})
    instance_tokens = dict(instance_tokens or {})
    P, tp = parallel.pp, parallel.tp
    costs = CostModel(model, dev, tp, overrides)
    T = {}
    for m in model.modules:
        itok = instance_tokens.get(m.name)
        if m.name not in sizes:
            if m.instance_based:
                curve = efficiency_curve(m, sweep, dev, tp=tp, pp=P, instance_tokens=itok, overrides=overrides)
                sizes[m.name] = select_submb_size(curve)
            else:
                sizes[m.name] = model.context_length
        T[m.name] = module_latency(costs, m, probe_load(m, sizes[m.name], itok), P)
    order = sorted(T, key=lambda n: (T[n], model.index(n)))
    counts = segment_counts([T[n] for n in order])
    K = {}
    for name, k in zip(order, counts):
        K[name] = max(1, min(k, model.module(name).num_layers // P))
    placement = partition_chunks(model, P, K)
    return SegmentPlan(model, parallel, SubMicrobatchConfig(sizes), K, T, placement)
