"""IRSTD evaluation metrics: mIoU, nIoU, target-level Pd / Fa and a pixel ROC sweep.

Conventions:
  * IoU of an empty prediction against an empty ground truth is 1.
  * Components are 8-connected.
  * Pd matches ground-truth and predicted components one-to-one by centroid
    distance; Fa is the pixel count of unmatched predicted components over
    the total pixel count of the corpus.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

_EIGHT = np.ones((3, 3), dtype=int)


def _plane(mask) -> np.ndarray:
    arr = np.asarray(mask) > 0
    return arr.reshape(arr.shape[-2:])


def components(mask) -> tuple[np.ndarray, int]:
    return ndimage.label(_plane(mask), structure=_EIGHT)


def _check_lists(preds: Sequence, gts: Sequence) -> None:
    if len(preds) != len(gts):
        raise ValueError(f"got {len(preds)} predictions for {len(gts)} ground truths")


def iou(pred, gt) -> float:
    p, g = _plane(pred), _plane(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def miou(preds: Sequence, gts: Sequence) -> float:
    _check_lists(preds, gts)
    if not preds:
        return 1.0
    return float(np.mean([iou(p, g) for p, g in zip(preds, gts)]))


def niou(preds: Sequence, gts: Sequence) -> float:
    """Mean IoU per ground-truth target against its best-overlapping predicted component."""
    _check_lists(preds, gts)
    scores: list[float] = []
    any_pred = False
    for pred, gt in zip(preds, gts):
        plab, _ = components(pred)
        glab, ng = components(gt)
        any_pred |= bool(plab.any())
        for k in range(1, ng + 1):
            g = glab == k
            hits = plab[g]
            hits = hits[hits > 0]
            if hits.size == 0:
                scores.append(0.0)
                continue
            best = np.bincount(hits).argmax()
            p = plab == best
            scores.append(np.count_nonzero(p & g) / np.count_nonzero(p | g))
    if not scores:
        return 0.0 if any_pred else 1.0
    return float(np.mean(scores))


def _centroids(lab: np.ndarray, n: int) -> list[tuple[float, float]]:
    if n == 0:
        return []
    return [tuple(c) for c in ndimage.center_of_mass(np.ones_like(lab), lab, range(1, n + 1))]


def pd_fa(preds: Sequence, gts: Sequence, match_radius: float = 3.0) -> tuple[float, float]:
    """Target-level detection probability and per-pixel false-alarm rate."""
    _check_lists(preds, gts)
    n_targets = matched = false_pixels = total_pixels = 0
    for pred, gt in zip(preds, gts):
        plab, npred = components(pred)
        glab, ngt = components(gt)
        total_pixels += plab.size
        pc, gc = _centroids(plab, npred), _centroids(glab, ngt)
        free = set(range(npred))
        n_targets += ngt
        for gy, gx in gc:
            best, best_d = None, math.inf
            for j in free:
                d = math.hypot(pc[j][0] - gy, pc[j][1] - gx)
                if d < best_d:
                    best, best_d = j, d
            if best is not None and best_d <= match_radius:
                free.discard(best)
                matched += 1
        if free:
            sizes = np.bincount(plab.ravel(), minlength=npred + 1)
            false_pixels += int(sum(sizes[j + 1] for j in free))
    pd = matched / n_targets if n_targets else 1.0
    fa = false_pixels / total_pixels if total_pixels else 0.0
    return float(pd), float(fa)


def roc_sweep(prob_maps: Sequence, gts: Sequence, n_thresholds: int) -> list[tuple[float, float, float]]:
    """Pixel-level (threshold, fpr, tpr) points, thresholds descending.

    The first point is an anchor above every probability (always (0, 0));
    the rest use ``prob >= t`` for ``n_thresholds`` values from 1 down to 0.
    """
    _check_lists(prob_maps, gts)
    probs = np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p in prob_maps]) if prob_maps else np.zeros(0)
    labels = np.concatenate([_plane(g).ravel() for g in gts]) if gts else np.zeros(0, bool)
    pos = np.count_nonzero(labels)
    neg = labels.size - pos
    points = [(math.inf, 0.0, 0.0)]
    for t in np.linspace(1.0, 0.0, n_thresholds):
        hit = probs >= t
        tp = np.count_nonzero(hit & labels)
        fp = np.count_nonzero(hit & ~labels)
        points.append((float(t), fp / neg if neg else 0.0, tp / pos if pos else 0.0))
    return points


@dataclass
class MetricsReport:
    miou: float
    niou: float
    pd: float
    fa: float
    roc: list = field(default_factory=list)

    @property
    def fa_e6(self) -> float:
        return self.fa * 1e6

    def to_text(self) -> str:
        lines = [f"miou: {self.miou:.6f}", f"niou: {self.niou:.6f}", f"pd: {self.pd:.6f}",
                 f"fa_e6: {self.fa_e6:.6f}", "roc_csv:", "threshold,fpr,tpr"]
        lines += [f"{t},{f:.6f},{r:.6f}" for t, f, r in self.roc]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        values: dict[str, float] = {}
        roc = []
        lines = text.splitlines()
        i = 0
        while i < len(lines):
            key, _, val = lines[i].partition(":")
            key = key.strip()
            if key == "roc_csv":
                for row in lines[i + 2:]:
                    if row.strip():
                        t, f, r = row.split(",")
                        roc.append((float(t), float(f), float(r)))
                break
            values[key] = float(val)
            i += 1
        return cls(values["miou"], values["niou"], values["pd"], values["fa_e6"] * 1e-6, roc)


def evaluate_masks(preds: Sequence, gts: Sequence, probs: Sequence | None = None,
                   n_thresholds: int = 21, match_radius: float = 3.0) -> MetricsReport:
    pd, fa = pd_fa(preds, gts, match_radius)
    roc = roc_sweep(probs if probs is not None else [np.asarray(p, float) for p in preds], gts, n_thresholds)
    return MetricsReport(miou(preds, gts), niou(preds, gts), pd, fa, roc)
