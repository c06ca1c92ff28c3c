"""Gantt rendering of schedules as CSV or SVG; byte-identical for equal input."""

from __future__ import annotations

import csv
import io
from xml.sax.saxutils import escape

from ..scheduler.core import FW, Schedule

PALETTE = ("#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#edc948", "#b07aa1", "#9c755f")
LANE_H = 24
LEFT = 60
WIDTH = 1000


def _shade(color: str, factor: float) -> str:
    r, g, b = (int(color[i : i + 2], 16) for i in (1, 3, 5))
    return "#%02x%02x%02x" % tuple(int(c * factor) for c in (r, g, b))


def gantt_csv(schedule: Schedule) -> str:
    pb = schedule.problem
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rank", "stage", "module", "microbatch", "submb", "depth", "direction", "start_s", "end_s"])
    for r, order in enumerate(schedule.orders):
        for s in order:
            seg = pb.segments[pb.stages[s].segment]
            w.writerow([r, s, seg.module, seg.microbatch, seg.submb, seg.depth,
                        "fw" if seg.direction == FW else "bw",
                        f"{schedule.start[s]:.9f}", f"{schedule.end[s]:.9f}"])
    return buf.getvalue()


def gantt_svg(schedule: Schedule, title: str = "") -> str:
    """One lane per rank; color by module, darker boxes for backward stages."""
    pb = schedule.problem
    modules = list(pb.module_order) or sorted({s.module for s in pb.segments})
    color = {m: PALETTE[i % len(PALETTE)] for i, m in enumerate(modules)}
    T = schedule.makespan or 1.0
    scale = (WIDTH - LEFT - 10) / T
    top = 20 if title else 4
    height = top + LANE_H * pb.P + 20
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" '
        f'font-family="monospace" font-size="10">'
    ]
    if title:
        out.append(f'<text x="4" y="14">{escape(title)}</text>')
    for r in range(pb.P):
        y = top + r * LANE_H
        out.append(f'<text x="4" y="{y + 15}">rank {r}</text>')
        out.append(f'<rect x="{LEFT}" y="{y}" width="{WIDTH - LEFT - 10}" height="{LANE_H - 4}" '
                   f'fill="#f4f4f4"/>')
        for s in schedule.orders[r]:
            seg = pb.segments[pb.stages[s].segment]
            fill = color[seg.module] if seg.direction == FW else _shade(color[seg.module], 0.6)
            x0 = LEFT + schedule.start[s] * scale
            w = max((schedule.end[s] - schedule.start[s]) * scale, 0.5)
            out.append(
                f'<rect x="{x0:.2f}" y="{y}" width="{w:.2f}" height="{LANE_H - 4}" fill="{fill}" '
                f'stroke="#ffffff" stroke-width="0.5"><title>{escape(pb.stage_name(s))}</title></rect>'
            )
    y = top + LANE_H * pb.P + 14
    out.append(f'<text x="{LEFT}" y="{y}">0</text>')
    out.append(f'<text x="{WIDTH - 10}" y="{y}" text-anchor="end">{schedule.makespan * 1e3:.3f} ms</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_gantt(schedule: Schedule, fmt: str = "svg", title: str = "") -> str:
    if fmt == "csv":
        return gantt_csv(schedule)
    if fmt == "svg":
        return gantt_svg(schedule, title)
    raise ValueError(f"unknown gantt format {fmt!r}")
