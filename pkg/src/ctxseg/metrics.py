"""Dice Similarity Coefficient with NaN-mean aggregation.

Per class and slide the DSC is micro-averaged: pixel TP/FP/FN counts are
accumulated over the whole slide before the ratio. A (class, slide) cell
with no ground-truth and no predicted pixels is undefined and simply
drops out of every mean; a slide whose classes are all undefined drops
out of the outer mean as well.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np


def dsc_class_slide(pred, gt, c: int) -> float | None:
    """Micro DSC of class ``c`` over one slide, or None when 2TP+FP+FN == 0."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"dsc: prediction {pred.shape} vs ground truth {gt.shape}")
    p = pred == c
    g = gt == c
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    denom = 2 * tp + fp + fn
    if denom == 0:
        return None
    return 2.0 * tp / denom


def _nan_mean(values) -> float:
    vals = [v for v in values if v is not None and not math.isnan(v)]
    return sum(vals) / len(vals) if vals else math.nan


@dataclass
class DiceReport:
    table: dict  # (class, slide_id) -> float | None
    per_class: dict  # class -> float (NaN when undefined everywhere)
    per_slide: dict  # slide_id -> float
    total: float

    def write_csv(self, path):
        """Flat table: slide, class, dsc (empty when undefined) + summary rows."""
        slides = sorted({s for _, s in self.table})
        classes = sorted({c for c, _ in self.table})
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["slide", "class", "dsc"])
            for sid in slides:
                for c in classes:
                    v = self.table.get((c, sid))
                    w.writerow([sid, c, "" if v is None else f"{v:.6f}"])
            for sid in slides:
                v = self.per_slide[sid]
                w.writerow([sid, "mean", "" if math.isnan(v) else f"{v:.6f}"])
            for c in classes:
                v = self.per_class[c]
                w.writerow(["all", f"class_{c}", "" if math.isnan(v) else f"{v:.6f}"])
            w.writerow(["all", "total", f"{self.total:.6f}"])


def aggregate(table: dict) -> DiceReport:
    """NaN-mean over classes per slide, then NaN-mean over slides.

    ``table`` maps (class, slide_id) to a DSC or None/NaN for undefined.
    """
    if not table:
        raise ValueError("empty evaluation: no (class, slide) cells")
    slides = sorted({s for _, s in table})
    classes = sorted({c for c, _ in table})
    per_slide = {
        sid: _nan_mean(table.get((c, sid)) for c in classes) for sid in slides
    }
    per_class = {
        c: _nan_mean(table.get((c, sid)) for sid in slides) for c in classes
    }
    defined_slides = [v for v in per_slide.values() if not math.isnan(v)]
    if not defined_slides:
        raise ValueError("empty evaluation: every (class, slide) cell is undefined")
    total = sum(defined_slides) / len(defined_slides)
    return DiceReport(dict(table), per_class, per_slide, total)


def evaluate_predictions(preds: dict, gts: dict, C: int) -> DiceReport:
    """Build the full report from {slide_id: label map} predictions."""
    if set(preds) != set(gts):
        raise ValueError(f"slide sets differ: {sorted(preds)} vs {sorted(gts)}")
    table = {}
    for sid in sorted(preds):
        for c in range(C):
            table[(c, sid)] = dsc_class_slide(preds[sid], gts[sid], c)
    return aggregate(table)
