"""Overlap scores for binary instrument masks."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Sequence, Tuple

import numpy as np


@dataclass(frozen=True)
class SegScore:
    dsc: float
    iou: float


def score(pred: np.ndarray, truth: np.ndarray) -> SegScore:
    """Dice and IoU of two binary masks; two empty masks score 1."""
    pred = np.asarray(pred) > 0
    truth = np.asarray(truth) > 0
    if pred.shape != truth.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    inter = int(np.count_nonzero(pred & truth))
    total = int(np.count_nonzero(pred)) + int(np.count_nonzero(truth))
    if total == 0:
        return SegScore(1.0, 1.0)
    union = total - inter
    return SegScore(2.0 * inter / total, inter / union)


def mean_scores(pairs: Iterable[Tuple[np.ndarray, np.ndarray]]) -> Tuple[float, float]:
    """Unweighted per-image means ``(mDSC, mIoU)`` as fractions."""
    scores = [score(p, t) for p, t in pairs]
    if not scores:
        raise ValueError("mean_scores needs at least one pair")
    return (float(np.mean([s.dsc for s in scores])), float(np.mean([s.iou for s in scores])))


def write_report(path, ids: Sequence[str], scores: Sequence[SegScore]) -> Tuple[float, float]:
    """Per-image CSV rows in percent (1 decimal) plus a trailing ``mean`` row."""
    if len(ids) != len(scores):
        raise ValueError("ids and scores differ in length")
    if not scores:
        raise ValueError("empty report")
    mdsc = float(np.mean([s.dsc for s in scores]))
    miou = float(np.mean([s.iou for s in scores]))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "dsc", "iou"])
        for i, s in zip(ids, scores):
            w.writerow([i, f"{100 * s.dsc:.1f}", f"{100 * s.iou:.1f}"])
        w.writerow(["mean", f"{100 * mdsc:.1f}", f"{100 * miou:.1f}"])
    return mdsc, miou


def format_pair(mdsc: float, miou: float) -> str:
    """``79.9/73.1`` style summary from fractions."""
    return f"{100 * mdsc:.1f}/{100 * miou:.1f}"
