"""Temporal grounding metrics: interval IoU, R1@tau and mIoU."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

DEFAULT_TAUS = (0.3, 0.5, 0.7)


@dataclass(frozen=True)
class Window:
    start: float
    end: float

    def __post_init__(self):
        if not (math.isfinite(self.start) and math.isfinite(self.end)):
            raise ValueError(f"non-finite window {self}")
        if self.start < 0 or self.start > self.end:
            raise ValueError(f"invalid window [{self.start}, {self.end}]")

    def clamp(self, duration: float) -> "Window":
        return Window(min(max(self.start, 0.0), duration), min(max(self.end, 0.0), duration))


@dataclass(frozen=True)
class ParseFailure:
    reason: str
    text: str = ""


def as_window(w) -> Window:
    return w if isinstance(w, Window) else Window(float(w[0]), float(w[1]))


def temporal_iou(a, b) -> float:
    a, b = as_window(a), as_window(b)
    inter = max(0.0, min(a.end, b.end) - max(a.start, b.start))
    union = max(a.end, b.end) - min(a.start, b.start)
    if union == 0.0:
        # both are the same point
        return 1.0
    return inter / union


def sample_ious(preds: Sequence, gts: Sequence, duration: float | None = None) -> list[float]:
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground truths")
    out = []
    for p, g in zip(preds, gts):
        if p is None or isinstance(p, ParseFailure):
            out.append(0.0)
            continue
        p = as_window(p)
        if duration is not None:
            p = p.clamp(duration)
        out.append(temporal_iou(p, g))
    return out


def recall_at_iou(preds: Sequence, gts: Sequence, tau: float, duration: float | None = None) -> float:
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must be in (0, 1], got {tau}")
    ious = sample_ious(preds, gts, duration)
    if not ious:
        raise ValueError("no samples")
    return sum(iou >= tau for iou in ious) / len(ious)


def mean_iou(preds: Sequence, gts: Sequence, duration: float | None = None) -> float:
    ious = sample_ious(preds, gts, duration)
    if not ious:
        raise ValueError("no samples")
    return sum(ious) / len(ious)


def summarize(preds: Sequence, gts: Sequence, duration: float | None = None, taus=DEFAULT_TAUS) -> dict:
    """Metrics report {R1@tau..., mIoU, parse_failure_rate, n}."""
    ious = sample_ious(preds, gts, duration)
    if not ious:
        raise ValueError("no samples")
    n = len(ious)
    report = {f"R1@{t}": sum(i >= t for i in ious) / n for t in taus}
    report["mIoU"] = sum(ious) / n
    report["parse_failure_rate"] = sum(isinstance(p, ParseFailure) or p is None for p in preds) / n
    report["n"] = n
    return report
