"""Frame-wise and segmental evaluation metrics for action segmentation.

All scores are percentages. Segmental metrics (F1@k, edit, mAP@mid) ignore
an optional background class; frame accuracy always counts it. Frames with
``mask=False`` are ignored everywhere and split segments.
"""
from __future__ import annotations

import itertools
import json
import warnings
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

F1_THRESHOLDS = (10, 25, 50)


class Segment(NamedTuple):
    class_id: int
    start: int  # inclusive
    end: int    # exclusive

    @property
    def midpoint(self) -> int:
        return (self.start + self.end - 1) // 2


class ScoredSegment(NamedTuple):
    class_id: int
    start: int
    end: int
    score: float

    @property
    def midpoint(self) -> int:
        return (self.start + self.end - 1) // 2


@dataclass
class MetricReport:
    accuracy: float
    f1: dict[int, float]
    edit: float
    map_mid: float | None

    def flat(self) -> dict[str, float | None]:
        out = {"accuracy": self.accuracy}
        out.update({f"f1@{k}": v for k, v in sorted(self.f1.items())})
        out["edit"] = self.edit
        out["map_mid"] = self.map_mid
        return out


def labels_to_segments(labels: Sequence[int], mask: Sequence[bool] | None = None) -> list[Segment]:
    """Run-length encode real frames; masked frames end the current run."""
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.size == 0:
        raise ValueError("labels must be a non-empty vector")
    mask = np.ones(labels.size, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    segs = []
    start = None
    for t in range(labels.size + 1):
        boundary = (t == labels.size or not mask[t]
                    or (start is not None and labels[t] != labels[start]))
        if start is not None and boundary:
            segs.append(Segment(int(labels[start]), start, t))
            start = None
        if t < labels.size and mask[t] and start is None:
            start = t
    return segs


def _drop(segs: Iterable, background: int | None) -> list:
    return [s for s in segs if s.class_id != background] if background is not None else list(segs)


def _check_lengths(pred, gt) -> None:
    if len(pred) != len(gt):
        raise ValueError(f"prediction has {len(pred)} frames but ground truth has {len(gt)}")


def frame_accuracy(pred, gt, mask=None) -> float:
    pred, gt = np.asarray(pred), np.asarray(gt)
    _check_lengths(pred, gt)
    mask = np.ones(len(gt), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("frame_accuracy: no real frames")
    return 100.0 * int((pred[mask] == gt[mask]).sum()) / n


def _iou(a: Segment, b: Segment) -> float:
    inter = min(a.end, b.end) - max(a.start, b.start)
    if inter <= 0:
        return 0.0
    return inter / (max(a.end, b.end) - min(a.start, b.start))


class F1Counts(NamedTuple):
    tp: int
    fp: int
    fn: int

    def f1(self) -> float:
        if self.tp == 0:
            return 0.0
        precision = self.tp / (self.tp + self.fp)
        recall = self.tp / (self.tp + self.fn)
        return 100.0 * 2 * precision * recall / (precision + recall)


def f1_counts(pred_segs: Sequence[Segment], gt_segs: Sequence[Segment], k: float,
              background: int | None = None) -> F1Counts:
    """Greedy IoU matching in temporal order of the predicted segments.

    Each prediction takes the unmatched same-class ground-truth segment with
    the highest IoU (earliest on ties); it is a hit if that IoU >= k/100.
    """
    if not 0 < k <= 100:
        raise ValueError(f"k must lie in (0, 100], got {k}")
    pred_segs = _drop(pred_segs, background)
    gt_segs = _drop(gt_segs, background)
    used = [False] * len(gt_segs)
    tp = fp = 0
    for p in pred_segs:
        best, best_iou = -1, 0.0
        for j, g in enumerate(gt_segs):
            if used[j] or g.class_id != p.class_id:
                continue
            iou = _iou(p, g)
            if iou > best_iou:
                best, best_iou = j, iou
        if best >= 0 and best_iou >= k / 100:
            used[best] = True
            tp += 1
        else:
            fp += 1
    return F1Counts(tp, fp, len(gt_segs) - tp)


def f1_at_k(pred_segs, gt_segs, k: float, background: int | None = None) -> float:
    counts = f1_counts(pred_segs, gt_segs, k, background)
    if counts.tp + counts.fp + counts.fn == 0:
        warnings.warn("f1_at_k: no segments on either side; reporting 0", RuntimeWarning)
    return counts.f1()


def levenshtein(a: Sequence, b: Sequence) -> int:
    row = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        prev, row[0] = row[0], i
        for j, y in enumerate(b, 1):
            prev, row[j] = row[j], min(row[j] + 1, row[j - 1] + 1, prev + (x != y))
    return row[-1]


def edit_parts(pred_segs, gt_segs, background: int | None = None) -> tuple[int, int]:
    """(Levenshtein distance, normaliser) between the segment class strings."""
    p = [s.class_id for s in _drop(pred_segs, background)]
    g = [s.class_id for s in _drop(gt_segs, background)]
    return levenshtein(p, g), max(len(p), len(g))


def edit_score(pred_segs, gt_segs, background: int | None = None) -> float:
    """Normalised edit similarity; two empty segmentations score 100."""
    dist, norm = edit_parts(pred_segs, gt_segs, background)
    if norm == 0:
        return 100.0
    return min(100.0, max(0.0, 100.0 * (1.0 - dist / norm)))


def score_segments(segs: Sequence[Segment], probs: np.ndarray) -> list[ScoredSegment]:
    """Attach the mean predicted probability of each segment's class."""
    probs = np.asarray(probs, dtype=np.float32)
    # sequential float64 sum, so scores do not depend on numpy's pairwise blocking
    return [ScoredSegment(s.class_id, s.start, s.end,
                          sum(map(float, probs[s.start:s.end, s.class_id])) / (s.end - s.start))
            for s in segs]


def _average_precision(hits: list[bool], n_gt: int) -> float:
    """All-points interpolated AP of a ranked hit list."""
    precision, recall, tp = [], [], 0
    for rank, hit in enumerate(hits, 1):
        tp += hit
        precision.append(tp / rank)
        recall.append(tp / n_gt)
    # precision envelope from the right, accumulated at every recall step
    envelope = list(itertools.accumulate(reversed(precision), max))[::-1]
    ap, prev = 0.0, 0.0
    for r, p in zip(recall, envelope):
        if r > prev:
            ap += (r - prev) * p
            prev = r
    return ap


def map_at_mid(detections: Sequence[Sequence[ScoredSegment]],
               gt_segs: Sequence[Sequence[Segment]], C: int,
               background: int | None = None) -> float:
    """Midpoint-hit mean average precision over classes with ground truth.

    ``detections[v]`` and ``gt_segs[v]`` belong to sequence ``v``. Detections
    are ranked per class by descending score, ties by earlier start frame then
    sequence index. A detection hits when its midpoint frame lies in a
    still-unmatched same-class ground-truth segment of the same sequence.
    """
    if len(detections) != len(gt_segs):
        raise ValueError(f"{len(detections)} detection lists for {len(gt_segs)} sequences")
    aps = []
    for c in range(C):
        if c == background:
            continue
        gts = [[g for g in seq if g.class_id == c] for seq in gt_segs]
        n_gt = sum(map(len, gts))
        if n_gt == 0:
            continue
        ranked = sorted(((d.score, d.start, v, d) for v, seq in enumerate(detections)
                         for d in seq if d.class_id == c),
                        key=lambda r: (-r[0], r[1], r[2]))
        used = [[False] * len(g) for g in gts]
        hits = []
        for _, _, v, d in ranked:
            hit = False
            m = d.midpoint
            for j, g in enumerate(gts[v]):
                if not used[v][j] and g.start <= m < g.end:
                    used[v][j] = hit = True
                    break
            hits.append(hit)
        aps.append(_average_precision(hits, n_gt) if hits else 0.0)
    if not aps:
        raise ValueError("map_at_mid: no ground-truth segments")
    return 100.0 * sum(aps) / len(aps)


@dataclass
class SequenceEval:
    """Everything needed to score one sequence alone or pooled with others."""
    source_id: str
    correct: int
    total: int
    f1_counts: dict[int, F1Counts]
    edit_dist: int
    edit_norm: int
    detections: list[ScoredSegment]
    gt_segs: list[Segment]
    report: MetricReport = field(repr=False)


def evaluate_sequence(pred, gt, C: int, probs=None, mask=None, background: int | None = None,
                      source_id: str = "") -> SequenceEval:
    pred, gt = np.asarray(pred), np.asarray(gt)
    _check_lengths(pred, gt)
    mask = np.ones(len(gt), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    pred_segs = labels_to_segments(pred, mask)
    gt_segs = labels_to_segments(gt, mask)
    counts = {k: f1_counts(pred_segs, gt_segs, k, background) for k in F1_THRESHOLDS}
    dist, norm = edit_parts(pred_segs, gt_segs, background)
    dets = score_segments(_drop(pred_segs, background), probs) if probs is not None else []
    gts = _drop(gt_segs, background)
    map_mid = None
    if probs is not None and gts:
        map_mid = map_at_mid([dets], [gts], C, background)
    report = MetricReport(
        accuracy=frame_accuracy(pred, gt, mask),
        f1={k: c.f1() for k, c in counts.items()},
        edit=100.0 if norm == 0 else 100.0 * (1.0 - dist / norm),
        map_mid=map_mid,
    )
    return SequenceEval(source_id, int((pred[mask] == gt[mask]).sum()), int(mask.sum()), counts,
                        dist, norm, dets, gts, report)


def aggregate(evals: Sequence[SequenceEval], C: int, mode: str = "per-video",
              background: int | None = None) -> MetricReport:
    """Corpus report: mean of per-sequence scores, or scores of pooled counts."""
    if not evals:
        raise ValueError("aggregate: nothing to aggregate")
    if mode == "per-video":
        maps = [e.report.map_mid for e in evals if e.report.map_mid is not None]
        return MetricReport(
            accuracy=float(np.mean([e.report.accuracy for e in evals])),
            f1={k: float(np.mean([e.report.f1[k] for e in evals])) for k in F1_THRESHOLDS},
            edit=float(np.mean([e.report.edit for e in evals])),
            map_mid=float(np.mean(maps)) if maps else None,
        )
    if mode != "pooled":
        raise ValueError(f"unknown aggregation mode {mode!r}")
    f1 = {}
    for k in F1_THRESHOLDS:
        tp = sum(e.f1_counts[k].tp for e in evals)
        fp = sum(e.f1_counts[k].fp for e in evals)
        fn = sum(e.f1_counts[k].fn for e in evals)
        f1[k] = F1Counts(tp, fp, fn).f1()
    norm = sum(e.edit_norm for e in evals)
    has_probs = any(e.detections for e in evals) and any(e.gt_segs for e in evals)
    return MetricReport(
        accuracy=100.0 * sum(e.correct for e in evals) / sum(e.total for e in evals),
        f1=f1,
        edit=100.0 if norm == 0 else 100.0 * (1.0 - sum(e.edit_dist for e in evals) / norm),
        map_mid=map_at_mid([e.detections for e in evals], [e.gt_segs for e in evals], C,
                           background) if has_probs else None,
    )


def format_report(report: MetricReport, prefix: str = "") -> str:
    """Flat ``key=value`` lines."""
    lines = []
    for key, value in report.flat().items():
        shown = "nan" if value is None else f"{value:.4f}"
        lines.append(f"{prefix}{key}={shown}")
    return "\n".join(lines) + "\n"


def write_reports(path_prefix, evals: Sequence[SequenceEval], C: int,
                  background: int | None = None) -> dict:
    """Write ``<prefix>.txt`` and ``<prefix>.json`` with per-sequence and corpus scores."""
    corpus = {mode: aggregate(evals, C, mode, background) for mode in ("per-video", "pooled")}
    doc = {
        "sequences": [{"source_id": e.source_id, **e.report.flat()} for e in evals],
        "aggregate": {mode: r.flat() for mode, r in corpus.items()},
    }
    text = "".join(format_report(r, f"{mode}.") for mode, r in corpus.items())
    with open(f"{path_prefix}.json", "w") as fh:
        json.dump(doc, fh, indent=2)
    with open(f"{path_prefix}.txt", "w") as fh:
        fh.write(text)
    return doc
