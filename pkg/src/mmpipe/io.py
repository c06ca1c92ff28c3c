"""JSON loading and saving for models, devices, batches, distributions and plans."""

from __future__ import annotations

import json
import os
from typing import Any

from .model import DeviceSpec, ModelSpec, ParallelConfig, builtin_device, builtin_model, builtin_parallel
from .workload import (
    BatchMeta,
    DistributionSpec,
    caption_pairs,
    interleaved_documents,
    video_captions,
    vlm_mixture,
)

DISTRIBUTIONS = ("vlm_mixture", "caption_pairs", "interleaved_documents", "video_captions")


def read_json(path: str) -> Any:
    with open(path) as f:
        return json.load(f)


def write_json(obj: Any, path: str) -> None:
    """Write ``obj`` (anything with to_dict, or plain data) with sorted keys."""
    data = obj.to_dict() if hasattr(obj, "to_dict") else obj
    d = os.path.dirname(path)
    if d:
        os.makedirs(d, exist_ok=True)
    with open(path, "w") as f:
        json.dump(data, f, indent=1, sort_keys=True)
        f.write("\n")


def _is_path(ref: str) -> bool:
    return ref.endswith(".json") or os.path.sep in ref or os.path.exists(ref)


def load_model(ref: str) -> tuple[ModelSpec, ParallelConfig | None]:
    """Preset name or JSON path. Files may carry a ``parallel`` block next to the model."""
    if not _is_path(ref):
        return builtin_model(ref), builtin_parallel(ref)
    d = read_json(ref)
    par = ParallelConfig(**d["parallel"]) if "parallel" in d else None
    return ModelSpec.from_dict(d.get("model", d)), par


def load_device(ref: str) -> DeviceSpec:
    if not _is_path(ref):
        return builtin_device(ref)
    return DeviceSpec.from_dict(read_json(ref))


def load_batch(path: str) -> BatchMeta:
    return BatchMeta.from_dict(read_json(path))


def load_distribution(ref: str, video_tokens_per_second: float | None = None) -> DistributionSpec:
    """Built-in distribution name or JSON path."""
    if _is_path(ref):
        return DistributionSpec.from_dict(read_json(ref))
    if ref == "vlm_mixture":
        return vlm_mixture()
    if ref == "caption_pairs":
        return caption_pairs()
    if ref == "interleaved_documents":
        return interleaved_documents()
    if ref == "video_captions":
        if video_tokens_per_second is None:
            raise ValueError("video_captions needs --video-tokens-per-second")
        return video_captions(video_tokens_per_second)
    raise ValueError(f"unknown distribution {ref!r}; choose from {', '.join(DISTRIBUTIONS)} or a JSON file")
