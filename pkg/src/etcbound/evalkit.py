"""Interval IoU, rank-1 recall at IoU thresholds, intersection-ratio histogram."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

Interval = tuple[float, float]

DEFAULT_THRESHOLDS = (0.1, 0.3, 0.5)


def interval_iou(a: Interval, b: Interval) -> float:
    """|a intersect b| / |a union b|; 0 when the union has zero length."""
    a_sta, a_end = float(a[0]), float(a[1])
    b_sta, b_end = float(b[0]), float(b[1])
    if a_sta > a_end or b_sta > b_end:
        raise ValueError("intervals must have sta <= end")
    inter = max(0.0, min(a_end, b_end) - max(a_sta, b_sta))
    union = (a_end - a_sta) + (b_end - b_sta) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def intersection_ratio(pred: Interval, gt: Interval) -> float:
    """|pred intersect gt| / |gt|; caller must ensure |gt| > 0."""
    inter = max(0.0, min(pred[1], gt[1]) - max(pred[0], gt[0]))
    return inter / (gt[1] - gt[0])


@dataclass(frozen=True)
class Histogram:
    edges: tuple[float, ...]
    counts: tuple[int, ...]
    n_skipped: int = 0

    def mass_at_least(self, lo: float) -> float:
        """Fraction of counted samples in bins whose left edge is >= lo."""
        total = sum(self.counts)
        if total == 0:
            return 0.0
        picked = sum(c for e, c in zip(self.edges[:-1], self.counts) if e >= lo - 1e-12)
        return picked / total

    def to_json_obj(self) -> dict:
        return {"edges": list(self.edges), "counts": list(self.counts), "n_skipped": self.n_skipped}

    def to_csv(self) -> str:
        lines = ["bin_lo,bin_hi,count"]
        for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
            lines.append(f"{lo},{hi},{c}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class EvalReport:
    """Recall per IoU threshold plus the intersection-ratio histogram."""

    recalls: dict[float, float]
    n_instances: int
    mean_iou: float
    histogram: Histogram | None = None

    def to_json_obj(self) -> dict:
        return {
            "recalls": {str(k): v for k, v in sorted(self.recalls.items())},
            "n_instances": self.n_instances,
            "mean_iou": self.mean_iou,
            "histogram": self.histogram.to_json_obj() if self.histogram else None,
        }


def _check_aligned(predictions: Sequence[Interval], gts: Sequence[Interval]) -> None:
    if len(predictions) != len(gts):
        raise ValueError(f"got {len(predictions)} predictions for {len(gts)} ground truths")


def rank1_at_iou(
    predictions: Sequence[Interval],
    gts: Sequence[Interval],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
) -> EvalReport:
    """Fraction of instances whose IoU strictly exceeds each threshold."""
    _check_aligned(predictions, gts)
    ious = [interval_iou(p, g) for p, g in zip(predictions, gts)]
    n = len(ious)
    recalls = {
        float(th): (sum(1 for v in ious if v > th) / n if n else 0.0) for th in thresholds
    }
    mean_iou = float(np.mean(ious)) if ious else 0.0
    return EvalReport(recalls=recalls, n_instances=n, mean_iou=mean_iou)


def intersection_ratio_histogram(
    predictions: Sequence[Interval],
    gts: Sequence[Interval],
    n_bins: int = 10,
) -> Histogram:
    """Histogram of |pred intersect gt| / |gt| over instances with |gt| > 0."""
    _check_aligned(predictions, gts)
    ratios = []
    skipped = 0
    for p, g in zip(predictions, gts):
        if g[1] - g[0] <= 0.0:
            skipped += 1
            continue
        ratios.append(intersection_ratio(p, g))
    counts, edges = np.histogram(ratios, bins=n_bins, range=(0.0, 1.0))
    return Histogram(edges=tuple(float(e) for e in edges), counts=tuple(int(c) for c in counts), n_skipped=skipped)


def evaluate(
    predictions: Sequence[Interval],
    gts: Sequence[Interval],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    n_bins: int = 10,
) -> EvalReport:
    base = rank1_at_iou(predictions, gts, thresholds)
    hist = intersection_ratio_histogram(predictions, gts, n_bins)
    return EvalReport(
        recalls=base.recalls, n_instances=base.n_instances, mean_iou=base.mean_iou, histogram=hist
    )


def format_report_table(rows: Sequence[tuple[str, EvalReport]]) -> str:
    """Plain-text table: one row per method, one column per R1@threshold."""
    if not rows:
        return "(no rows)\n"
    thresholds = sorted(rows[0][1].recalls)
    header = ["method"] + [f"R1@{th:g}" for th in thresholds] + ["mIoU"]
    width = max(12, max(len(label) for label, _ in rows) + 2)
    lines = [header[0].ljust(width) + "".join(h.rjust(9) for h in header[1:])]
    for label, report in rows:
        cells = [f"{100.0 * report.recalls[th]:.2f}" for th in thresholds]
        cells.append(f"{100.0 * report.mean_iou:.2f}")
        lines.append(label.ljust(width) + "".join(c.rjust(9) for c in cells))
    return "\n".join(lines) + "\n"
