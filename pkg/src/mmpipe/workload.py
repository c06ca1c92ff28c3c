"""Multimodal training-data metadata: samples, packed microbatches, batches.

Only metadata is modelled (instance and token counts per modality). The
synthetic sampler stands in for real datasets and reproduces the broad shapes
seen in practice: caption pairs with short texts, interleaved documents with a
variable number of images, and video clips of variable duration.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

DEFAULT_IMAGE_TOKENS = 169
TEXT = "text"


class SampleTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class ModalityId:
    name: str
    index: int


@dataclass(frozen=True)
class SampleMeta:
    """One training sample.

    ``modality_counts`` holds instance counts (images, clips); token-stream
    modalities such as text have tokens but no instances.
    """

    modality_counts: Mapping[str, int]
    modality_tokens: Mapping[str, int]
    sample_id: int = 0

    def __post_init__(self):
        for name, n in {**self.modality_counts, **self.modality_tokens}.items():
            if n < 0:
                raise ValueError(f"negative count for {name!r}")

    @property
    def total_tokens(self) -> int:
        return sum(self.modality_tokens.values())

    def instances(self, modality: str) -> int:
        return self.modality_counts.get(modality, 0)

    def tokens(self, modality: str) -> int:
        return self.modality_tokens.get(modality, 0)

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "modality_counts": dict(sorted(self.modality_counts.items())),
            "modality_tokens": dict(sorted(self.modality_tokens.items())),
        }

    @classmethod
    def from_dict(cls, d: Mapping, sample_id: int = 0) -> "SampleMeta":
        return cls(
            modality_counts={k: int(v) for k, v in d.get("modality_counts", {}).items()},
            modality_tokens={k: int(v) for k, v in d.get("modality_tokens", {}).items()},
            sample_id=int(d.get("sample_id", sample_id)),
        )


def make_sample(
    text_tokens: int,
    images: int = 0,
    *,
    image_tokens: int = DEFAULT_IMAGE_TOKENS,
    sample_id: int = 0,
) -> SampleMeta:
    """Convenience constructor for the common image+text case."""
    counts = {"image": images} if images else {}
    tokens = {TEXT: text_tokens}
    if images:
        tokens["image"] = images * image_tokens
    return SampleMeta(counts, tokens, sample_id)


@dataclass(frozen=True)
class MicrobatchMeta:
    capacity: int
    samples: tuple[SampleMeta, ...]

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if self.total_tokens > self.capacity:
            raise ValueError(
                f"microbatch holds {self.total_tokens} tokens, capacity {self.capacity}"
            )

    @property
    def total_tokens(self) -> int:
        return sum(s.total_tokens for s in self.samples)

    @property
    def modalities(self) -> list[str]:
        names = set()
        for s in self.samples:
            names.update(s.modality_counts)
            names.update(s.modality_tokens)
        return sorted(names)

    def instances(self, modality: str) -> int:
        """N_i: instance total for ``modality`` across samples."""
        return sum(s.instances(modality) for s in self.samples)

    def tokens(self, modality: str) -> int:
        return sum(s.tokens(modality) for s in self.samples)

    def instance_tokens(self, modality: str) -> list[float]:
        """Per-instance token counts in sample order.

        Samples only record totals, so instances inside one sample are taken
        to be equally sized.
        """
        out: list[float] = []
        for s in self.samples:
            n = s.instances(modality)
            if n:
                out.extend([s.tokens(modality) / n] * n)
        return out

    def to_dict(self) -> dict:
        return {"samples": [s.to_dict() for s in self.samples]}


@dataclass(frozen=True)
class BatchMeta:
    microbatches: tuple[MicrobatchMeta, ...]
    iteration: int = 0

    def __post_init__(self):
        object.__setattr__(self, "microbatches", tuple(self.microbatches))
        if not self.microbatches:
            raise ValueError("batch has no microbatches")
        caps = {mb.capacity for mb in self.microbatches}
        if len(caps) != 1:
            raise ValueError(f"microbatches disagree on capacity: {sorted(caps)}")

    @property
    def capacity(self) -> int:
        return self.microbatches[0].capacity

    def __len__(self) -> int:
        return len(self.microbatches)

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "iteration": self.iteration,
            "capacity": self.capacity,
            "microbatches": [mb.to_dict() for mb in self.microbatches],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "BatchMeta":
        cap = int(d["capacity"])
        mbs = []
        sid = 0
        for mb in d["microbatches"]:
            samples = []
            for s in mb["samples"]:
                samples.append(SampleMeta.from_dict(s, sample_id=sid))
                sid += 1
            mbs.append(MicrobatchMeta(cap, tuple(samples)))
        return cls(tuple(mbs), int(d.get("iteration", 0)))


def pack_samples(
    samples: Sequence[SampleMeta],
    capacity: int,
    *,
    max_instances: int | None = None,
    count_modalities: Iterable[str] | None = None,
) -> list[MicrobatchMeta]:
    """Greedily pack samples, in order, into fixed-capacity microbatches.

    A sample joins the open microbatch if it fits, otherwise it opens a new
    one; samples are never split. ``count_modalities`` restricts which
    modalities count against the capacity (e.g. only video tokens when the
    capacity is a clip-duration budget) and ``max_instances`` caps the
    instance total of those modalities per microbatch.
    """
    counted = None if count_modalities is None else frozenset(count_modalities)

    def size(s: SampleMeta) -> int:
        if counted is None:
            return s.total_tokens
        return sum(v for k, v in s.modality_tokens.items() if k in counted)

    def insts(s: SampleMeta) -> int:
        return sum(v for k, v in s.modality_counts.items() if counted is None or k in counted)

    # MicrobatchMeta checks total tokens against capacity; when only some
    # modalities count, the stored capacity must admit the full total.
    out: list[list[SampleMeta]] = []
    used = n_inst = 0
    for s in samples:
        sz = size(s)
        if sz > capacity or (max_instances is not None and insts(s) > max_instances):
            raise SampleTooLarge(f"sample {s.sample_id} needs {sz} > capacity {capacity}")
        fits = out and used + sz <= capacity
        if fits and max_instances is not None:
            fits = n_inst + insts(s) <= max_instances
        if not fits:
            out.append([])
            used = n_inst = 0
        out[-1].append(s)
        used += sz
        n_inst += insts(s)
    if counted is None:
        return [MicrobatchMeta(capacity, tuple(g)) for g in out]
    stored = max([capacity] + [sum(s.total_tokens for s in g) for g in out])
    return [MicrobatchMeta(stored, tuple(g)) for g in out]


# --- synthetic sampling -----------------------------------------------------


@dataclass(frozen=True)
class ModalityDist:
    """Generative parameters for one instance-based modality.

    ``tokens_per_instance`` is a constant or a ``(lo, hi)`` log-uniform range.
    If ``duration_s`` is given, each instance draws a duration uniformly and
    its tokens are ``duration * tokens_per_second``.
    """

    instances: tuple[int, int] = (1, 1)
    tokens_per_instance: float | tuple[float, float] = DEFAULT_IMAGE_TOKENS
    duration_s: tuple[float, float] | None = None
    tokens_per_second: float = 0.0

    def __post_init__(self):
        lo, hi = self.instances
        if not 0 <= lo <= hi:
            raise ValueError(f"bad instance range {self.instances}")
        if isinstance(self.tokens_per_instance, tuple):
            a, b = self.tokens_per_instance
            if not 0 < a <= b:
                raise ValueError(f"bad token range {self.tokens_per_instance}")
        if self.duration_s is not None:
            a, b = self.duration_s
            if not 0 < a <= b or self.tokens_per_second <= 0:
                raise ValueError("duration range needs 0 < lo <= hi and tokens_per_second > 0")

    def draw_tokens(self, rng: random.Random) -> int:
        if self.duration_s is not None:
            return max(1, round(rng.uniform(*self.duration_s) * self.tokens_per_second))
        tpi = self.tokens_per_instance
        if isinstance(tpi, tuple):
            return max(1, round(math.exp(rng.uniform(math.log(tpi[0]), math.log(tpi[1])))))
        return int(tpi)

    def to_dict(self) -> dict:
        d: dict = {"instances": list(self.instances)}
        tpi = self.tokens_per_instance
        d["tokens_per_instance"] = list(tpi) if isinstance(tpi, tuple) else tpi
        if self.duration_s is not None:
            d["duration_s"] = list(self.duration_s)
            d["tokens_per_second"] = self.tokens_per_second
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModalityDist":
        tpi = d.get("tokens_per_instance", DEFAULT_IMAGE_TOKENS)
        dur = d.get("duration_s")
        return cls(
            instances=tuple(d.get("instances", (1, 1))),
            tokens_per_instance=tuple(tpi) if isinstance(tpi, (list, tuple)) else tpi,
            duration_s=tuple(dur) if dur is not None else None,
            tokens_per_second=float(d.get("tokens_per_second", 0.0)),
        )


@dataclass(frozen=True)
class MixtureComponent:
    name: str
    weight: float
    text_tokens: tuple[int, int]
    modalities: Mapping[str, ModalityDist] = field(default_factory=dict)

    def __post_init__(self):
        lo, hi = self.text_tokens
        if not 0 <= lo <= hi:
            raise ValueError(f"bad text range {self.text_tokens}")
        if self.weight < 0:
            raise ValueError("negative mixture weight")


@dataclass(frozen=True)
class DistributionSpec:
    components: tuple[MixtureComponent, ...]

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        if not self.components:
            raise ValueError("distribution needs at least one component")
        total = sum(c.weight for c in self.components)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"mixture weights sum to {total}, expected 1")

    @classmethod
    def single(cls, text_tokens, **modalities: ModalityDist) -> "DistributionSpec":
        return cls((MixtureComponent("default", 1.0, tuple(text_tokens), modalities),))

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "components": [
                {
                    "name": c.name,
                    "weight": c.weight,
                    "text_tokens": list(c.text_tokens),
                    "modalities": {k: v.to_dict() for k, v in sorted(c.modalities.items())},
                }
                for c in self.components
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DistributionSpec":
        comps = []
        for c in d["components"]:
            comps.append(
                MixtureComponent(
                    name=c.get("name", f"c{len(comps)}"),
                    weight=float(c["weight"]),
                    text_tokens=tuple(c["text_tokens"]),
                    modalities={k: ModalityDist.from_dict(v) for k, v in c.get("modalities", {}).items()},
                )
            )
        return cls(tuple(comps))


def sample_synthetic(dist: DistributionSpec, n_samples: int, seed: int) -> list[SampleMeta]:
    if n_samples < 0:
        raise ValueError("n_samples must be >= 0")
    rng = random.Random(seed)
    weights = [c.weight for c in dist.components]
    out = []
    for i in range(n_samples):
        comp = rng.choices(dist.components, weights)[0]
        counts: dict[str, int] = {}
        tokens: dict[str, int] = {TEXT: rng.randint(*comp.text_tokens)}
        for name in sorted(comp.modalities):
            md = comp.modalities[name]
            n = rng.randint(*md.instances)
            if n:
                counts[name] = n
                tokens[name] = sum(md.draw_tokens(rng) for _ in range(n))
        out.append(SampleMeta(counts, tokens, i))
    return out


def caption_pairs(text_range=(8, 32), image_tokens: int = DEFAULT_IMAGE_TOKENS) -> DistributionSpec:
    """One image with a short caption per sample (LAION-like)."""
    return DistributionSpec.single(text_range, image=ModalityDist((1, 1), image_tokens))


def interleaved_documents(
    images=(0, 10), text_range=(64, 4096), image_tokens: int = DEFAULT_IMAGE_TOKENS
) -> DistributionSpec:
    """Long documents with a variable number of images (OBELICS-like)."""
    return DistributionSpec.single(text_range, image=ModalityDist(tuple(images), image_tokens))


def vlm_mixture(image_tokens: int = DEFAULT_IMAGE_TOKENS) -> DistributionSpec:
    return DistributionSpec(
        (
            MixtureComponent("caption", 0.5, (8, 32), {"image": ModalityDist((1, 1), image_tokens)}),
            MixtureComponent("document", 0.4, (64, 3000), {"image": ModalityDist((0, 10), image_tokens)}),
            MixtureComponent("text", 0.1, (256, 4096), {}),
        )
    )


def video_captions(tokens_per_second: float, duration_s=(2.0, 16.0), text_range=(16, 256)) -> DistributionSpec:
    """Single clip per sample with a caption; tokens scale linearly with duration."""
    return DistributionSpec.single(
        text_range,
        video=ModalityDist((1, 1), duration_s=tuple(duration_s), tokens_per_second=tokens_per_second),
    )


def build_batch(
    samples: Sequence[SampleMeta], capacity: int, n_microbatches: int | None = None, iteration: int = 0, **pack_kw
) -> BatchMeta:
    mbs = pack_samples(samples, capacity, **pack_kw)
    if n_microbatches is not None:
        if len(mbs) < n_microbatches:
            raise ValueError(f"only {len(mbs)} microbatches packed, wanted {n_microbatches}")
        mbs = mbs[:n_microbatches]
    return BatchMeta(tuple(mbs), iteration)


def synthetic_batch(
    dist: DistributionSpec, capacity: int, n_microbatches: int, seed: int, iteration: int = 0
) -> BatchMeta:
    """Draw samples until ``n_microbatches`` full microbatches are packed."""
    n = 4 * n_microbatches
    while True:
        samples = [s for s in sample_synthetic(dist, n, seed) if s.total_tokens <= capacity]
        mbs = pack_samples(samples, capacity)
        # the last microbatch may be partially filled; drop it
        if len(mbs) > n_microbatches:
            return BatchMeta(tuple(mbs[:n_microbatches]), iteration)
        n *= 2


@dataclass(frozen=True)
class ModalityStats:
    min_instances: int
    max_instances: int
    mean_instances: float
    total_instances: int
    total_tokens: int

    @property
    def ratio(self) -> float:
        """max/min instance ratio across microbatches (inf when min is 0)."""
        if self.min_instances == 0:
            return math.inf if self.max_instances else 1.0
        return self.max_instances / self.min_instances


def batch_stats(batch: BatchMeta) -> dict[str, ModalityStats]:
    names: set[str] = set()
    for mb in batch.microbatches:
        names.update(mb.modalities)
    out = {}
    n = len(batch.microbatches)
    for name in sorted(names):
        inst = [mb.instances(name) for mb in batch.microbatches]
        toks = sum(mb.tokens(name) for mb in batch.microbatches)
        out[name] = ModalityStats(min(inst), max(inst), sum(inst) / n, sum(inst), toks)
    return out
