"""Per-example attention traces and their JSON / SVG exports.

The SVG layout has one row per ACT step: hypothesis attention cells, then
premise attention cells, each aligned under its token, the step's ACT weight
at the left and the per-step class distribution at the right margin.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .data import LABELS

TRACE_FORMAT_VERSION = 1


@dataclass
class TraceStep:
    hyp_weights: list[float]
    prem_weights: list[float]
    act_weight: float
    softmax: list[float]


@dataclass
class AttentionTrace:
    premise_tokens: list[str]
    hypothesis_tokens: list[str]
    steps: list[TraceStep]
    prediction: str
    gold: str | None = None
    final_softmax: list[float] = field(default_factory=list)

    @property
    def act_weights(self) -> list[float]:
        return [s.act_weight for s in self.steps]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["version"] = TRACE_FORMAT_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttentionTrace":
        d = dict(d)
        d.pop("version", None)
        d["steps"] = [TraceStep(**s) for s in d["steps"]]
        return cls(**d)


def format_weight(p: float) -> str:
    return f"p={p:.2f}"


def save_trace_json(trace: AttentionTrace, path: str | Path):
    # json writes floats with repr(), which round-trips float64 exactly
    Path(path).write_text(json.dumps(trace.to_dict(), indent=1), encoding="utf-8")


def load_trace_json(path: str | Path) -> AttentionTrace:
    return AttentionTrace.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


_CELL_W, _CELL_H = 44, 26
_LEFT, _TOP, _GAP = 86, 110, 30
_PROB_W = 150
_COLORS = {"hyp": (31, 119, 180), "prem": (214, 39, 40)}


def _shade(weight: float, row_max: float, rgb: tuple[int, int, int]) -> str:
    t = 0.0 if row_max <= 0 else min(1.0, weight / row_max)
    r, g, b = (round(255 + (c - 255) * t) for c in rgb)
    return f"rgb({r},{g},{b})"


def _token_header(tokens: list[str], x0: float, label: str) -> list[str]:
    out = [f'<text x="{x0}" y="16" font-weight="bold">{escape(label)}</text>']
    for i, tok in enumerate(tokens):
        x = x0 + i * _CELL_W + _CELL_W / 2
        out.append(
            f'<text x="{x}" y="{_TOP - 8}" transform="rotate(-50 {x} {_TOP - 8})">{escape(tok)}</text>'
        )
    return out


def render_svg(trace: AttentionTrace) -> str:
    """Standalone SVG heatmap for one trace (no plotting dependency)."""
    m, n = len(trace.hypothesis_tokens), len(trace.premise_tokens)
    x_hyp = _LEFT
    x_prem = x_hyp + m * _CELL_W + _GAP
    x_prob = x_prem + n * _CELL_W + _GAP
    width = x_prob + _PROB_W + 10
    height = _TOP + len(trace.steps) * _CELL_H + 40
    el = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    el += _token_header(trace.hypothesis_tokens, x_hyp, "Hypothesis")
    el += _token_header(trace.premise_tokens, x_prem, "Premise")
    el.append(f'<text x="{x_prob}" y="16" font-weight="bold">Step classification</text>')
    for k, name in enumerate(LABELS):
        el.append(f'<text x="{x_prob + k * 50}" y="{_TOP - 8}">{name[:7]}</text>')

    for row, step in enumerate(trace.steps):
        y = _TOP + row * _CELL_H
        el.append(f'<g class="step" data-step="{row + 1}" data-act-weight="{step.act_weight!r}">')
        el.append(f'<text x="4" y="{y + 17}">{row + 1}: {format_weight(step.act_weight)}</text>')
        for x0, weights, key in (
            (x_hyp, step.hyp_weights, "hyp"),
            (x_prem, step.prem_weights, "prem"),
        ):
            top = max(weights) if weights else 0.0
            for i, w in enumerate(weights):
                el.append(
                    f'<rect x="{x0 + i * _CELL_W}" y="{y}" width="{_CELL_W}" height="{_CELL_H}" '
                    f'fill="{_shade(w, top, _COLORS[key])}" stroke="#ccc"><title>{w:.4f}</title></rect>'
                )
        best = int(np.argmax(step.softmax))
        for k, p in enumerate(step.softmax):
            weight = "bold" if k == best else "normal"
            el.append(f'<text x="{x_prob + k * 50}" y="{y + 17}" font-weight="{weight}">{p:.2f}</text>')
        el.append("</g>")

    foot = _TOP + len(trace.steps) * _CELL_H + 24
    gold = f", gold: {trace.gold}" if trace.gold else ""
    el.append(f'<text x="4" y="{foot}">prediction: {escape(trace.prediction)}{escape(gold)}</text>')
    el.append("</svg>")
    return "\n".join(el) + "\n"


def export_trace(trace: AttentionTrace, path: str | Path) -> tuple[Path, Path]:
    """Write ``<path>.json`` and ``<path>.svg``; returns both paths.

    ``path`` may carry either suffix or none. Raises ``OSError`` when the
    target cannot be written.
    """
    base = Path(path)
    if base.suffix in (".json", ".svg"):
        base = base.with_suffix("")
    json_path, svg_path = base.with_suffix(".json"), base.with_suffix(".svg")
    save_trace_json(trace, json_path)
    svg_path.write_text(render_svg(trace), encoding="utf-8")
    return json_path, svg_path
