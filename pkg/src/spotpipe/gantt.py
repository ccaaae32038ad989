"""Gantt timeline rendering for simulation results: SVG and CSV.

One horizontal row per pipeline stage; red bars are forward passes, green
backward, orange recompute and purple the per-stage gradient allreduce at the
far right. Output depends only on the result object, never on the clock or
environment, so renders are byte-reproducible.
"""

from __future__ import annotations

from typing import List, Sequence, Tuple

from .simulator import SimulationResult

COLORS = {"F": "#d62728", "B": "#2ca02c", "R": "#ff7f0e", "A": "#9467bd"}

_ROW_H = 26
_BAR_H = 18
_MARGIN_L = 64
_MARGIN_T = 30
_WIDTH = 1000

Row = Tuple[int, str, int, int, int]  # stage, kind, micro-batch, start, end


def gantt_csv(result: SimulationResult, replica: int = 0) -> str:
    """``stage,kind,microbatch,start_us,end_us`` rows (allreduce rows carry
    micro-batch 0)."""
    lines = ["stage,kind,microbatch,start_us,end_us"]
    for stage, kind, mb, start, end in result.gantt_rows(replica):
        lines.append(f"{stage},{kind},{mb},{start},{end}")
    return "\n".join(lines) + "\n"


def rows_to_svg(rows: Sequence[Row], title: str = "") -> str:
    """Render timeline rows (as produced by ``gantt_csv``) to an SVG chart."""
    stages = max((r[0] for r in rows), default=1)
    span = max((r[4] for r in rows), default=1)
    span = max(span, 1)
    height = _MARGIN_T + stages * _ROW_H + 40
    scale = (_WIDTH - _MARGIN_L - 20) / span

    def x(us: int) -> float:
        return _MARGIN_L + us * scale

    parts: List[str] = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_WIDTH}" height="{height}" '
        f'viewBox="0 0 {_WIDTH} {height}">',
        f'<rect width="{_WIDTH}" height="{height}" fill="white"/>',
    ]
    if title:
        parts.append(
            f'<text x="{_MARGIN_L}" y="18" font-family="sans-serif" font-size="13">{title}</text>'
        )
    for s in range(1, stages + 1):
        y = _MARGIN_T + (s - 1) * _ROW_H
        parts.append(
            f'<text x="4" y="{y + _BAR_H - 4}" font-family="sans-serif" '
            f'font-size="11">stage {s}</text>'
        )
        parts.append(
            f'<line x1="{_MARGIN_L}" y1="{y + _ROW_H - 3}" x2="{_WIDTH - 16}" '
            f'y2="{y + _ROW_H - 3}" stroke="#dddddd" stroke-width="1"/>'
        )
    axis_y = _MARGIN_T + stages * _ROW_H + 8
    parts.append(
        f'<line x1="{_MARGIN_L}" y1="{axis_y}" x2="{_WIDTH - 16}" y2="{axis_y}" '
        'stroke="black" stroke-width="1"/>'
    )
    parts.append(
        f'<text x="{_MARGIN_L}" y="{axis_y + 14}" font-family="sans-serif" font-size="10">0</text>'
    )
    parts.append(
        f'<text x="{x(span) - 40}" y="{axis_y + 14}" font-family="sans-serif" '
        f'font-size="10">{span} us</text>'
    )
    for stage, kind, mb, start, end in rows:
        y = _MARGIN_T + (stage - 1) * _ROW_H
        w = max((end - start) * scale, 0.5)
        label = f"{kind}{mb}" if kind != "A" else "AR"
        parts.append(
            f'<rect class="task" x="{x(start):.2f}" y="{y}" width="{w:.2f}" '
            f'height="{_BAR_H}" fill="{COLORS.get(kind, "#333333")}"><title>{label} '
            f'[{start},{end}]us</title></rect>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def gantt_svg(result: SimulationResult, replica: int = 0, title: str = "") -> str:
    return rows_to_svg(result.gantt_rows(replica), title)


def parse_gantt_csv(text: str) -> List[Row]:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("stage,"):
        raise ValueError("not a gantt CSV (missing header)")
    rows: List[Row] = []
    for ln in lines[1:]:
        stage, kind, mb, start, end = ln.split(",")
        rows.append((int(stage), kind, int(mb), int(start), int(end)))
    return rows


def render_gantt(
    result: SimulationResult,
    out_path: str,
    fmt: str = "svg",
    replica: int = 0,
    title: str = "",
) -> None:
    if fmt == "svg":
        payload = gantt_svg(result, replica, title)
    elif fmt == "csv":
        payload = gantt_csv(result, replica)
    else:
        raise ValueError(f"render_gantt: unknown format {fmt!r}")
    with open(out_path, "w") as f:
        f.write(payload)
