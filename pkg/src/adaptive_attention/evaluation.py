"""Accuracy, confusion and step statistics; fixed-step-cap ablation."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import LABELS, Batch, Example, make_batches
from .errors import InputError
from .model import ModelParams, predict, predict_labels


@dataclass
class EvalReport:
    accuracy: float
    confusion: np.ndarray  # rows: gold class, columns: predicted class
    mean_steps: float
    step_histogram: dict[int, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    def merge(self, other: "EvalReport") -> "EvalReport":
        """Combine reports from disjoint shards."""
        conf = self.confusion + other.confusion
        hist = Counter(self.step_histogram)
        hist.update(other.step_histogram)
        n = sum(hist.values())
        mean = sum(k * v for k, v in hist.items()) / n if n else 0.0
        return EvalReport(float(np.trace(conf) / conf.sum()), conf, mean, dict(sorted(hist.items())))


def _as_batches(params: ModelParams, dataset, batch_size: int) -> list[Batch]:
    if not dataset:
        raise InputError("cannot evaluate an empty dataset")
    if isinstance(dataset[0], Batch):
        return list(dataset)
    if params.vocab is None:
        raise InputError("params carry no vocabulary; pass pre-built batches")
    return make_batches(dataset, params.vocab, batch_size)


def evaluate(
    params: ModelParams,
    dataset: Sequence[Example] | Sequence[Batch],
    config=None,
    batch_size: int = 128,
    max_steps: int | None = None,
) -> EvalReport:
    """Dropout-free argmax evaluation (lowest index wins ties)."""
    k = params.config.num_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    steps: Counter[int] = Counter()
    for batch in _as_batches(params, dataset, batch_size):
        out = predict(batch, params, max_steps=max_steps)
        preds = predict_labels(out.logits.data)
        np.add.at(confusion, (batch.labels, preds), 1)
        steps.update(r.steps_taken for r in out.records)
    n = int(confusion.sum())
    mean_steps = sum(s * c for s, c in steps.items()) / n
    return EvalReport(float(np.trace(confusion) / n), confusion, mean_steps, dict(sorted(steps.items())))


def evaluate_fixed_steps(
    params: ModelParams,
    dataset: Sequence[Example] | Sequence[Batch],
    config=None,
    step_caps: Sequence[int] = (1, 2, 4, 8, 20),
    batch_size: int = 128,
) -> dict:
    """Accuracy with the ACT loop capped at each of ``step_caps``.

    The model may still halt earlier; at the cap the last step takes the
    remainder weight. Key ``"adaptive"`` holds the accuracy at the model's
    configured cap.
    """
    batches = _as_batches(params, dataset, batch_size)
    results: dict = {}
    for cap in step_caps:
        results[int(cap)] = evaluate(params, batches, max_steps=int(cap)).accuracy
    results["adaptive"] = evaluate(params, batches).accuracy
    return results


def format_report(report: EvalReport) -> str:
    lines = [f"accuracy,{report.accuracy!r}", f"mean_steps,{report.mean_steps!r}"]
    lines.append("gold\\pred," + ",".join(LABELS))
    for name, row in zip(LABELS, report.confusion):
        lines.append(name + "," + ",".join(str(int(v)) for v in row))
    lines.append("steps,count")
    lines += [f"{k},{v}" for k, v in report.step_histogram.items()]
    return "\n".join(lines)
