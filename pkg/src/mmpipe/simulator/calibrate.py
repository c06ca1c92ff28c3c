"""Fit device efficiency factors to measured operator latencies."""

from __future__ import annotations

from dataclasses import replace
from typing import Iterable, Sequence

from ..model import DeviceSpec
from .graph import OperatorNode

FACTORS = ("fop", "mem", "net")


class InsufficientData(ValueError):
    def __init__(self, factor: str):
        super().__init__(f"no observation is bound by alpha_{factor}")
        self.factor = factor


def _terms(op: OperatorNode, dev: DeviceSpec) -> dict[str, float]:
    return {"fop": op.n_fop / dev.flops, "mem": op.n_mem / dev.mem_bw, "net": op.n_net / dev.net_bw}


def calibrate(
    measured: Sequence[tuple[OperatorNode, float]],
    dev: DeviceSpec,
    factors: Iterable[str] = ("fop", "mem"),
    max_iter: int = 100,
) -> DeviceSpec:
    """Least-squares fit of the requested alphas on relative latency error.

    Each observation is attributed to the term that binds under the current
    estimate; given that attribution the relative-error optimum for a factor
    has the closed form sum(r)/sum(r*r) with r = raw_term/observed. We
    alternate attribution and fitting until the attribution stops changing.
    Factors not requested keep their values from ``dev``.
    """
    factors = tuple(factors)
    obs = []
    for op, t in measured:
        if not t > 0:
            raise ValueError("observed latencies must be positive")
        obs.append((_terms(op, dev), t))
    alpha = {f: 1.0 if f in factors else getattr(dev, f"alpha_{f}") for f in FACTORS}

    binding = None
    for _ in range(max_iter):
        new = [max(FACTORS, key=lambda f: alpha[f] * x[f]) for x, _ in obs]
        if new == binding:
            break
        binding = new
        for f in factors:
            rs = [x[f] / t for (x, t), b in zip(obs, binding) if b == f and x[f] > 0]
            if not rs:
                raise InsufficientData(f)
            alpha[f] = min(1.0, max(1e-12, sum(rs) / sum(r * r for r in rs)))
    return replace(dev, **{f"alpha_{f}": alpha[f] for f in factors})
