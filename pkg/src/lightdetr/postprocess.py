"""Top-K extraction, class-aware NMS and the score-threshold sweep."""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels

HISTOGRAM_EDGES = (0, 100, 500, 1000, 5000, 30000)
DEFAULT_NMS_IOU = 0.65
SWEEP_COLUMNS = ("threshold", "bucket_lo", "bucket_hi", "count", "mean_boxes", "mean_kept", "nms_ms")


@dataclass
class DetectionSet:
    boxes: np.ndarray  # (N, 4) normalized cx, cy, w, h
    scores: np.ndarray  # (N,)
    labels: np.ndarray  # (N,)
    image_id: str | int = 0

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if not len(self.boxes) == len(self.scores) == len(self.labels):
            raise ValueError("boxes, scores and labels differ in length")

    def __len__(self):
        return len(self.scores)

    def take(self, index) -> "DetectionSet":
        index = np.asarray(index, dtype=np.int64)
        return DetectionSet(self.boxes[index], self.scores[index], self.labels[index], self.image_id)

    def sorted(self) -> "DetectionSet":
        return self.take(np.argsort(-self.scores, kind="stable"))


def detr_select(logits, boxes, k: int, image_id=0) -> DetectionSet:
    """Top-K (query, class) pairs by sigmoid score; ties go to the lower flat index."""
    logits = np.asarray(logits, dtype=np.float64)
    n_queries, n_classes = logits.shape
    if not 1 <= k <= logits.size:
        raise ValueError(f"K={k} must lie in [1, {logits.size}]")
    scores = (0.5 * (1 + np.tanh(0.5 * logits))).ravel()
    order = np.argsort(-scores, kind="stable")[:k]
    q, c = np.divmod(order, n_classes)
    return DetectionSet(np.asarray(boxes)[q], scores[order], c, image_id)


def greedy_nms(d: DetectionSet, iou_threshold: float = DEFAULT_NMS_IOU,
               score_threshold: float = 0.0) -> DetectionSet:
    """Drop scores at or below ``score_threshold``, then suppress same-class overlaps above ``iou_threshold``."""
    for name, v in (("iou_threshold", iou_threshold), ("score_threshold", score_threshold)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {v}")
    d = d.take(np.flatnonzero(d.scores > score_threshold))
    keep = kernels.greedy_nms(d.boxes, d.scores, d.labels, float(iou_threshold))
    return d.take(keep)


@dataclass
class SweepReport:
    threshold: float
    per_image_box_counts: list[int]
    histogram: list[int]
    mean_boxes: float
    per_image_kept_counts: list[int] = field(default_factory=list)
    mean_kept: float = 0.0
    nms_ms: float = 0.0


def box_histogram(counts) -> list[int]:
    """Counts per bucket [0,100) ... [5000,30000); larger counts fall in the last bucket."""
    edges = np.asarray(HISTOGRAM_EDGES)
    idx = np.clip(np.searchsorted(edges, np.asarray(counts), side="right") - 1, 0, len(edges) - 2)
    return np.bincount(idx, minlength=len(edges) - 1).tolist()


def threshold_sweep(detections: list[DetectionSet], thresholds, iou_threshold: float = DEFAULT_NMS_IOU,
                    run_nms: bool = True) -> list[SweepReport]:
    """Box counts that survive each score cut, before and after NMS."""
    thresholds = list(thresholds)
    if not thresholds:
        raise ValueError("at least one threshold is required")
    if not detections:
        raise ValueError("at least one image is required")
    reports = []
    for t in thresholds:
        pre = [int(np.count_nonzero(d.scores > t)) for d in detections]
        kept, elapsed = [], 0.0
        if run_nms:
            for d in detections:
                start = time.perf_counter()
                kept.append(len(greedy_nms(d, iou_threshold, t)))
                elapsed += time.perf_counter() - start
        reports.append(SweepReport(
            threshold=float(t),
            per_image_box_counts=pre,
            histogram=box_histogram(pre),
            mean_boxes=float(np.mean(pre)),
            per_image_kept_counts=kept,
            mean_kept=float(np.mean(kept)) if kept else 0.0,
            nms_ms=1000.0 * elapsed / len(detections),
        ))
    return reports


# ---------------------------------------------------------------- file formats

def detection_records(d: DetectionSet):
    for box, score, label in zip(d.boxes, d.scores, d.labels):
        yield {"image_id": d.image_id, "cx": float(box[0]), "cy": float(box[1]), "w": float(box[2]),
               "h": float(box[3]), "score": float(score), "label": int(label)}


def dumps_detections(sets) -> str:
    if isinstance(sets, DetectionSet):
        sets = [sets]
    lines = [json.dumps(r, sort_keys=False) for d in sets for r in detection_records(d)]
    return "".join(line + "\n" for line in lines)


def write_detections(path, sets) -> None:
    Path(path).write_text(dumps_detections(sets))


def read_detections(path) -> list[DetectionSet]:
    """Group JSON-lines detection records by image, preserving first-seen order."""
    groups: dict = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                r = json.loads(line)
                groups.setdefault(r["image_id"], []).append(
                    ([r["cx"], r["cy"], r["w"], r["h"]], r["score"], r["label"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{n}: bad detection record ({exc})") from exc
    out = []
    for image_id, rows in groups.items():
        boxes, scores, labels = zip(*rows)
        out.append(DetectionSet(np.array(boxes), np.array(scores), np.array(labels), image_id).sorted())
    return out


def sweep_csv(reports: list[SweepReport]) -> str:
    """Long format: one row per (threshold, histogram bucket)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in reports:
        for lo, hi, count in zip(HISTOGRAM_EDGES[:-1], HISTOGRAM_EDGES[1:], r.histogram):
            w.writerow([f"{r.threshold:g}", lo, hi, count, f"{r.mean_boxes:.4f}", f"{r.mean_kept:.4f}",
                        f"{r.nms_ms:.4f}"])
    return buf.getvalue()
