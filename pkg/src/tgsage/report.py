"""Search progress tables and a small SVG chart, derived from the event log only."""

from __future__ import annotations

import csv
import io
from pathlib import Path

from .orchestrator import counters_cost
from .space import genome_from_dict, genome_key
from .tracker import EVALUATED, TERMINAL, RunState, replay_dir


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def best_so_far(scores):
    out, best = [], None
    for s in scores:
        if s is not None and (best is None or s > best):
            best = s
        out.append(best)
    return out


def report_tables(state: RunState) -> dict[str, str]:
    records = [state.records[i] for i in sorted(state.records)]
    search = [r for r in records if r.phase == "search" and r.status in TERMINAL]
    scores = [r.result["combined"] if r.status == EVALUATED else None for r in search]
    curve = best_so_far(scores)
    progress = _csv(
        ["index", "sample_id", "status", "score", "best_so_far"],
        [(i + 1, r.sample_id, r.status, s, b) for i, (r, s, b) in enumerate(zip(search, scores, curve))],
    )

    cost_rows, cumulative, best = [], 0, None
    for r in (r for r in records if r.status in TERMINAL):
        if r.status == EVALUATED:
            cumulative += int(r.result.get("examples", 0))
            if r.phase == "search":
                best = r.result["combined"] if best is None else max(best, r.result["combined"])
        cost_rows.append((r.sample_id, r.phase, r.status, int(r.result.get("examples", 0)) if r.result else 0, cumulative, best))
    cost = _csv(["sample_id", "phase", "status", "examples", "cumulative_examples", "best_so_far"], cost_rows)
    if cumulative != counters_cost(state.counters):
        raise AssertionError("cost curve does not add up to the tracker counters")

    mature_of = {
        r.parent: r.result["mature"] for r in records if r.phase == "rerank" and r.status == EVALUATED
    }
    evaluated = sorted((r for r in search if r.status == EVALUATED), key=lambda r: (-r.result["combined"], r.sample_id))
    top = _csv(
        ["rank", "sample_id", "combined", "P", "TG", "mature", "genome"],
        [
            (k + 1, r.sample_id, r.result["combined"], r.result["P"], r.result.get("TG"), mature_of.get(r.sample_id),
             genome_key(genome_from_dict(r.genome)))
            for k, r in enumerate(evaluated[:5])
        ],
    )
    return {
        "best_so_far.csv": progress,
        "cost_curve.csv": cost,
        "top5.csv": top,
        "best_so_far.svg": svg_chart([c for c in curve], "sample index", "best combined score"),
    }


def svg_chart(values, xlabel: str, ylabel: str, width: int = 480, height: int = 320) -> str:
    pts = [(i + 1, v) for i, v in enumerate(values) if v is not None]
    pad = 48
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad // 2}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad // 2}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width // 2}" y="{height - 12}" font-size="12" text-anchor="middle">{xlabel}</text>',
        f'<text x="14" y="{height // 2}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {height // 2})">{ylabel}</text>',
    ]
    if pts:
        xs = [p[0] for p in pts]
        ys = [p[1] for p in pts]
        x0, x1 = min(xs), max(max(xs), min(xs) + 1)
        y0, y1 = min(ys), max(ys)
        if y1 == y0:
            y0, y1 = y0 - 0.5, y1 + 0.5
        def sx(x):
            return pad + (x - x0) / (x1 - x0) * (width - 1.5 * pad)
        def sy(y):
            return height - pad - (y - y0) / (y1 - y0) * (height - 1.5 * pad)
        path = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
        lines.append(f'<polyline fill="none" stroke="#1f5fa8" stroke-width="2" points="{path}"/>')
        lines.append(f'<text x="{pad - 4}" y="{sy(y1):.2f}" font-size="10" text-anchor="end">{y1:.3f}</text>')
        lines.append(f'<text x="{pad - 4}" y="{sy(y0):.2f}" font-size="10" text-anchor="end">{y0:.3f}</text>')
        lines.append(f'<text x="{sx(x1):.2f}" y="{height - pad + 14}" font-size="10" text-anchor="middle">{x1}</text>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def write_report(run_dir) -> list[Path]:
    run_dir = Path(run_dir)
    state = replay_dir(run_dir)
    out_dir = run_dir / "report"
    out_dir.mkdir(exist_ok=True)
    paths = []
    for name, text in report_tables(state).items():
        path = out_dir / name
        path.write_text(text, encoding="utf-8")
        paths.append(path)
    return paths
