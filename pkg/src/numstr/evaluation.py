"""Matching predictions to ground truth and per-length accuracy / error attribution."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .core import DEFAULT_NMS_IOU, Detection, StringSample, detection_order, iou
from .inference import DEFAULT_CONF, StringReading, predict_strings

DEFAULT_MATCH_IOU = 0.5


class Verdict(str, Enum):
    CORRECT = "correct"
    CLASSIFICATION = "classification_error"
    DETECTION = "detection_error"


@dataclass
class MatchResult:
    pairs: list = field(default_factory=list)
    unmatched_gt: list = field(default_factory=list)
    unmatched_det: list = field(default_factory=list)


def match_detections(dets: Sequence[Detection], gts, iou_threshold: float = DEFAULT_MATCH_IOU) -> MatchResult:
    """Greedy class-agnostic matching in descending posterior order.

    `gts` holds BoundingBoxes or objects with a `.box`. Each detection takes
    the still-unmatched ground truth of highest IoU if it reaches the threshold.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    gt_boxes = [getattr(g, "box", g) for g in gts]
    free = set(range(len(gt_boxes)))
    pairs, unmatched_det = [], []
    for d in detection_order(dets):
        best, best_iou = None, -1.0
        for g in sorted(free):
            v = iou(dets[d].box, gt_boxes[g])
            if v > best_iou:
                best, best_iou = g, v
        if best is not None and best_iou >= iou_threshold:
            pairs.append((best, d, best_iou))
            free.discard(best)
        else:
            unmatched_det.append(d)
    return MatchResult(pairs, sorted(free), sorted(unmatched_det))


def attribute_errors(reading: StringReading, sample: StringSample, iou_threshold: float = DEFAULT_MATCH_IOU) -> Verdict:
    """Single-cause verdict for one string; detection problems take precedence."""
    if reading.text == sample.label:
        return Verdict.CORRECT
    m = match_detections(list(reading.detections), sample.annotations, iou_threshold)
    if m.unmatched_gt or m.unmatched_det:
        return Verdict.DETECTION
    return Verdict.CLASSIFICATION


def digit_hits(reading: StringReading, sample: StringSample, iou_threshold: float = DEFAULT_MATCH_IOU) -> int:
    """Ground-truth digits matched by a detection of the right class."""
    dets = list(reading.detections)
    m = match_detections(dets, sample.annotations, iou_threshold)
    return sum(dets[d].digit == sample.annotations[g].digit for g, d, _ in m.pairs)


@dataclass
class LengthRow:
    length: int
    samples: int
    accuracy: float
    classification: float
    detection: float


@dataclass
class EvalReport:
    rows: list
    average: LengthRow
    digit_recall: float
    overall_accuracy: float

    def to_tsv(self) -> str:
        lines = ["length\taccuracy\tclass_err\tdet_err\tsamples"]
        for r in self.rows + [self.average]:
            name = str(r.length) if r.length > 0 else "average"
            lines.append(f"{name}\t{r.accuracy:.2f}\t{r.classification:.2f}\t{r.detection:.2f}\t{r.samples}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        head = f"{'Length':>6}  {'Samples':>7}  {'Accuracy':>8}  {'Classification':>14}  {'Detection':>9}"
        rule = "-" * len(head)
        lines = [head, rule]
        for r in self.rows:
            lines.append(f"{r.length:>6}  {r.samples:>7}  {r.accuracy:>8.2f}  {r.classification:>14.2f}  {r.detection:>9.2f}")
        lines.append(rule)
        a = self.average
        lines.append(f"{'':>6}  {'Average':>7}  {a.accuracy:>8.2f}  {a.classification:>14.2f}  {a.detection:>9.2f}")
        lines.append(f"digit recall (IoU {DEFAULT_MATCH_IOU}): {100 * self.digit_recall:.2f}%")
        return "\n".join(lines) + "\n"


def summarize(verdicts: Sequence[Verdict], lengths: Sequence[int], hits: int = 0, digits: int = 0) -> EvalReport:
    if not verdicts:
        raise ValueError("cannot summarize an empty evaluation")
    rows = []
    for length in sorted(set(lengths)):
        v = [x for x, n in zip(verdicts, lengths) if n == length]
        total = len(v)
        acc = 100.0 * sum(x is Verdict.CORRECT for x in v) / total
        cls = 100.0 * sum(x is Verdict.CLASSIFICATION for x in v) / total
        det = 100.0 * sum(x is Verdict.DETECTION for x in v) / total
        rows.append(LengthRow(length, total, acc, cls, det))
    # unweighted mean over lengths
    avg = LengthRow(
        0,
        len(verdicts),
        float(np.mean([r.accuracy for r in rows])),
        float(np.mean([r.classification for r in rows])),
        float(np.mean([r.detection for r in rows])),
    )
    overall = 100.0 * sum(x is Verdict.CORRECT for x in verdicts) / len(verdicts)
    return EvalReport(rows, avg, hits / digits if digits else 0.0, overall)


def evaluate(
    model,
    dataset: Sequence[StringSample],
    conf_threshold: float = DEFAULT_CONF,
    nms_iou: float = DEFAULT_NMS_IOU,
    match_iou: float = DEFAULT_MATCH_IOU,
) -> EvalReport:
    samples = list(dataset)
    if not samples:
        raise ValueError("cannot evaluate on an empty dataset")
    readings = predict_strings(model, [s.image for s in samples], conf_threshold, nms_iou)
    return report_from_readings(readings, samples, match_iou)


def report_from_readings(readings, samples, match_iou: float = DEFAULT_MATCH_IOU) -> EvalReport:
    verdicts = [attribute_errors(r, s, match_iou) for r, s in zip(readings, samples)]
    hits = sum(digit_hits(r, s, match_iou) for r, s in zip(readings, samples))
    digits = sum(len(s.annotations) for s in samples)
    return summarize(verdicts, [len(s.label) for s in samples], hits, digits)
