"""LMM architecture, device and parallelism descriptions, plus named presets."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

from .workload import DEFAULT_IMAGE_TOKENS, ModalityId

ENCODER, BACKBONE, DECODER = "encoder", "backbone", "decoder"
ROLES = (ENCODER, BACKBONE, DECODER)


class NotFound(KeyError):
    pass


@dataclass(frozen=True)
class ModalityModuleSpec:
    """One modality module (ViT encoder, LM backbone, DiT decoder, ...).

    ``tokens_per_instance`` is set for fixed-size instance modalities (image
    patches). ``attention_scope`` says whether attention spans each instance
    separately ("instance") or the whole packed sequence ("sequence").
    """

    name: str
    modality: str
    role: str
    num_layers: int
    hidden: int
    ffn: int
    heads: int
    groups: int
    tokens_per_instance: int | None = None
    attention_scope: str | None = None

    def __post_init__(self):
        if self.attention_scope is None:
            scope = "instance" if self.tokens_per_instance is not None else "sequence"
            object.__setattr__(self, "attention_scope", scope)

    @property
    def instance_based(self) -> bool:
        return self.attention_scope == "instance"

    def problems(self) -> list[str]:
        errs = []
        if self.role not in ROLES:
            errs.append(f"{self.name}: unknown role {self.role!r}")
        if self.num_layers < 1:
            errs.append(f"{self.name}: needs at least one layer")
        if min(self.hidden, self.ffn, self.heads, self.groups) <= 0:
            errs.append(f"{self.name}: dimensions must be positive")
        elif self.heads % self.groups:
            errs.append(f"{self.name}: attn_groups {self.groups} does not divide heads {self.heads}")
        if self.attention_scope not in ("instance", "sequence"):
            errs.append(f"{self.name}: bad attention scope {self.attention_scope!r}")
        return errs

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "modality": self.modality,
            "role": self.role,
            "num_layers": self.num_layers,
            "hidden": self.hidden,
            "ffn": self.ffn,
            "heads": self.heads,
            "groups": self.groups,
            "tokens_per_instance": self.tokens_per_instance,
            "attention_scope": self.attention_scope,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModalityModuleSpec":
        return cls(**{k: d.get(k) for k in cls.__dataclass_fields__ if k in d})


@dataclass(frozen=True)
class AdapterEdge:
    producer: str
    consumer: str
    latency_s: float = 0.0


@dataclass(frozen=True)
class ModelSpec:
    name: str
    modules: tuple[ModalityModuleSpec, ...]
    edges: tuple[AdapterEdge, ...]
    context_length: int = 8192

    def __post_init__(self):
        object.__setattr__(self, "modules", tuple(self.modules))
        object.__setattr__(
            self,
            "edges",
            tuple(e if isinstance(e, AdapterEdge) else AdapterEdge(*e) for e in self.edges),
        )

    def module(self, name: str) -> ModalityModuleSpec:
        for m in self.modules:
            if m.name == name:
                return m
        raise NotFound(name)

    def index(self, name: str) -> int:
        for i, m in enumerate(self.modules):
            if m.name == name:
                return i
        raise NotFound(name)

    def modality_ids(self) -> dict[str, ModalityId]:
        out: dict[str, ModalityId] = {}
        for m in self.modules:
            if m.modality not in out:
                out[m.modality] = ModalityId(m.modality, len(out))
        return out

    def producers(self, name: str) -> list[str]:
        return [e.producer for e in self.edges if e.consumer == name]

    def consumers(self, name: str) -> list[str]:
        return [e.consumer for e in self.edges if e.producer == name]

    def edge(self, producer: str, consumer: str) -> AdapterEdge:
        for e in self.edges:
            if e.producer == producer and e.consumer == consumer:
                return e
        raise NotFound((producer, consumer))

    @property
    def backbone(self) -> ModalityModuleSpec:
        """The unique backbone; without one, the unique sink module serves."""
        bbs = [m for m in self.modules if m.role == BACKBONE]
        if len(bbs) == 1:
            return bbs[0]
        if not bbs:
            sinks = [m for m in self.modules if not self.consumers(m.name)]
            if len(sinks) == 1:
                return sinks[0]
        raise ValueError(f"{self.name}: no unique backbone")

    def topo_order(self) -> list[str]:
        """Module names in dependency order (declaration order breaks ties)."""
        indeg = {m.name: 0 for m in self.modules}
        for e in self.edges:
            if e.consumer in indeg:
                indeg[e.consumer] += 1
        out = []
        ready = [m.name for m in self.modules if indeg[m.name] == 0]
        while ready:
            n = ready.pop(0)
            out.append(n)
            for c in self.consumers(n):
                indeg[c] -= 1
                if indeg[c] == 0:
                    ready.append(c)
        if len(out) != len(self.modules):
            raise ValueError(f"{self.name}: adapter edges contain a cycle")
        return out

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "name": self.name,
            "context_length": self.context_length,
            "modules": [m.to_dict() for m in self.modules],
            "edges": [
                {"producer": e.producer, "consumer": e.consumer, "latency_s": e.latency_s}
                for e in self.edges
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        return cls(
            name=d.get("name", "model"),
            modules=tuple(ModalityModuleSpec.from_dict(m) for m in d["modules"]),
            edges=tuple(
                AdapterEdge(e["producer"], e["consumer"], float(e.get("latency_s", 0.0)))
                for e in d.get("edges", ())
            ),
            context_length=int(d.get("context_length", 8192)),
        )


def validate_model(spec: ModelSpec) -> list[str]:
    """All invariant violations of ``spec``; an empty list means valid."""
    errs: list[str] = []
    names = [m.name for m in spec.modules]
    if not names:
        return ["model has no modules"]
    if len(set(names)) != len(names):
        errs.append("duplicate module names")
    for m in spec.modules:
        errs.extend(m.problems())
    known = set(names)
    for e in spec.edges:
        for end in (e.producer, e.consumer):
            if end not in known:
                errs.append(f"edge references unknown module {end!r}")
        if e.latency_s < 0:
            errs.append(f"edge {e.producer}->{e.consumer}: negative latency")
    if errs:
        return errs
    try:
        spec.topo_order()
    except ValueError:
        return errs + ["adapter edges contain a cycle"]

    backbones = [m for m in spec.modules if m.role == BACKBONE]
    if len(backbones) > 1:
        errs.append("multiple backbones")
        return errs
    try:
        bb = spec.backbone
    except ValueError:
        errs.append("no backbone")
        return errs

    def reaches(src: str, dst: str) -> bool:
        seen, todo = set(), [src]
        while todo:
            n = todo.pop()
            if n == dst:
                return True
            if n not in seen:
                seen.add(n)
                todo.extend(spec.consumers(n))
        return False

    for m in spec.modules:
        if m.role == ENCODER and not reaches(m.name, bb.name):
            errs.append(f"dangling encoder {m.name!r}")
    return errs


@dataclass(frozen=True)
class DeviceSpec:
    """Device throughput and capacity.

    Latency of an operator is ``max(a_fop*N_fop/F, a_mem*N_mem/B_mem,
    a_net*N_net/B_net)``; ``stage_overhead_s`` is a fixed cost paid by every
    non-empty pipeline stage (launch, synchronisation and P2P setup).
    """

    name: str = "device"
    flops: float = 989e12
    mem_bw: float = 3.35e12
    net_bw: float = 200e9
    memory: float = 80 * 2**30
    alpha_fop: float = 1.0
    alpha_mem: float = 1.0
    alpha_net: float = 1.0
    stage_overhead_s: float = 0.0

    def problems(self) -> list[str]:
        errs = []
        for f in ("flops", "mem_bw", "net_bw", "memory", "alpha_fop", "alpha_mem", "alpha_net"):
            if not getattr(self, f) > 0:
                errs.append(f"{f} must be > 0")
        for f in ("alpha_fop", "alpha_mem", "alpha_net"):
            if getattr(self, f) > 1:
                errs.append(f"{f} must be <= 1")
        if self.stage_overhead_s < 0:
            errs.append("stage_overhead_s must be >= 0")
        return errs

    def to_dict(self) -> dict:
        return {"schema_version": 1, **{k: getattr(self, k) for k in self.__dataclass_fields__}}

    @classmethod
    def from_dict(cls, d: Mapping) -> "DeviceSpec":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass(frozen=True)
class ParallelConfig:
    pp: int = 1
    tp: int = 1
    dp: int = 1

    def __post_init__(self):
        if min(self.pp, self.tp, self.dp) < 1:
            raise ValueError("parallel sizes must be >= 1")


@dataclass(frozen=True)
class Chunk:
    id: int
    module: str
    lo: int
    hi: int
    segment: int
    rank: int

    @property
    def num_layers(self) -> int:
        return self.hi - self.lo


@dataclass(frozen=True)
class ChunkPlacement:
    pp: int
    chunks: tuple[Chunk, ...]
    segments: Mapping[str, int] = field(default_factory=dict)

    def chunk(self, module: str, segment: int, rank: int) -> Chunk:
        return self._index[(module, segment, rank)]

    @property
    def _index(self) -> dict:
        idx = self.__dict__.get("_idx")
        if idx is None:
            idx = {(c.module, c.segment, c.rank): c for c in self.chunks}
            object.__setattr__(self, "_idx", idx)
        return idx

    def for_rank(self, rank: int) -> list[Chunk]:
        return [c for c in self.chunks if c.rank == rank]

    def problems(self, model: ModelSpec) -> list[str]:
        errs = []
        for m in model.modules:
            mine = sorted((c for c in self.chunks if c.module == m.name), key=lambda c: c.lo)
            covered = 0
            for c in mine:
                if c.lo != covered or c.hi <= c.lo:
                    errs.append(f"{m.name}: gap or overlap at layer {covered}")
                    break
                covered = c.hi
            else:
                if covered != m.num_layers:
                    errs.append(f"{m.name}: covers {covered} of {m.num_layers} layers")
            for k in range(self.segments.get(m.name, 0)):
                ranks = sorted(c.rank for c in mine if c.segment == k)
                if ranks != list(range(self.pp)):
                    errs.append(f"{m.name} segment {k}: ranks {ranks}")
        return errs

    def to_dict(self) -> dict:
        return {
            "pp": self.pp,
            "segments": dict(self.segments),
            "chunks": [
                {"id": c.id, "module": c.module, "lo": c.lo, "hi": c.hi, "segment": c.segment, "rank": c.rank}
                for c in self.chunks
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ChunkPlacement":
        return cls(
            pp=int(d["pp"]),
            chunks=tuple(Chunk(**c) for c in d["chunks"]),
            segments={k: int(v) for k, v in d.get("segments", {}).items()},
        )


# --- presets ----------------------------------------------------------------


def _vit(name, layers, h, f, heads, groups):
    return ModalityModuleSpec(name, "image", ENCODER, layers, h, f, heads, groups, DEFAULT_IMAGE_TOKENS)


def _lm(name, layers, h, f, heads, groups, role=BACKBONE):
    return ModalityModuleSpec(name, "text", role, layers, h, f, heads, groups)


def _dit(name, layers, h, f, heads, groups):
    # clip token counts come from the workload; attention is per clip
    return ModalityModuleSpec(name, "video", DECODER, layers, h, f, heads, groups, None, "instance")


VIT_5B = _vit("vit", 63, 1792, 15360, 16, 16)
VIT_22B = _vit("vit", 48, 6144, 24576, 48, 48)
LLAMA3_8B = _lm("lm", 32, 4096, 14336, 32, 8)
QWEN2_32B = _lm("lm", 64, 5120, 27648, 40, 8)
QWEN2_72B = _lm("lm", 80, 8192, 29568, 64, 8)
DIT_5B = _dit("dit", 28, 3584, 10240, 28, 28)
DIT_30B = _dit("dit", 48, 6144, 24576, 48, 48)


def _vlm(name, vit, lm) -> ModelSpec:
    return ModelSpec(name, (vit, lm), (AdapterEdge(vit.name, lm.name),), 8192)


def _t2v(name, lm, dit) -> ModelSpec:
    enc = replace(lm, role=ENCODER)
    return ModelSpec(name, (enc, dit), (AdapterEdge(enc.name, dit.name),), 8192)


_PRESETS: dict[str, tuple[ModelSpec, ParallelConfig]] = {
    "VLM-S": (_vlm("VLM-S", VIT_5B, LLAMA3_8B), ParallelConfig(pp=4, tp=4)),
    "VLM-M": (_vlm("VLM-M", VIT_5B, QWEN2_32B), ParallelConfig(pp=4, tp=8)),
    "VLM-L": (_vlm("VLM-L", VIT_22B, QWEN2_72B), ParallelConfig(pp=8, tp=8)),
    "T2V-S": (_t2v("T2V-S", LLAMA3_8B, DIT_5B), ParallelConfig(pp=4, tp=4)),
    "T2V-L": (_t2v("T2V-L", QWEN2_32B, DIT_30B), ParallelConfig(pp=8, tp=8)),
}

# Per-stage overhead chosen so that the simulated VLM-S image efficiency curve
# reaches 95% of its peak at 12 images per sub-microbatch.
H800 = DeviceSpec(
    name="H800",
    flops=989e12,
    mem_bw=3.35e12,
    net_bw=200e9,
    memory=80 * 2**30,
    stage_overhead_s=0.19e-3,
)

_DEVICES = {"H800": H800, "H100": replace(H800, name="H100"), "H20": replace(
    H800, name="H20", flops=148e12, mem_bw=4.0e12, memory=96 * 2**30)}


def builtin_models() -> dict[str, ModelSpec]:
    return {k: v[0] for k, v in _PRESETS.items()}


def builtin_model(name: str) -> ModelSpec:
    try:
        return _PRESETS[name][0]
    except KeyError:
        raise NotFound(f"unknown model preset {name!r}") from None


def builtin_parallel(name: str) -> ParallelConfig:
    try:
        return _PRESETS[name][1]
    except KeyError:
        raise NotFound(f"unknown model preset {name!r}") from None


def builtin_device(name: str) -> DeviceSpec:
    try:
        return _DEVICES[name]
    except KeyError:
        raise NotFound(f"unknown device preset {name!r}") from None
