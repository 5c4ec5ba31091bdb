"""Segmentation evaluation: per-sample IoU, Precision@K, Overall/Mean IoU,
and mAP over IoU thresholds 0.50:0.05:0.95.

Each sample carries exactly one prediction and one ground truth, so the
AP denominator at every threshold is the sample count. AP uses monotone
(all-point) interpolation of the precision-recall curve.
"""
from __future__ import annotations

import json
import numpy as np
from dataclasses import dataclass, field

from .errors import ContractError, ShapeError

PRECISION_KS = (0.5, 0.6, 0.7, 0.8, 0.9)
MAP_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))


@dataclass
class EvalSample:
    sample_id: str
    pred_mask: np.ndarray
    gt_mask: np.ndarray
    confidence: float

    def __post_init__(self):
        self.pred_mask = np.asarray(self.pred_mask, dtype=bool)
        self.gt_mask = np.asarray(self.gt_mask, dtype=bool)
        if self.pred_mask.shape != self.gt_mask.shape:
            raise ShapeError("pred/gt mask shapes differ")
        if not np.isfinite(self.confidence):
            raise ContractError("confidence must be finite")


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union; both-empty is defined as 1."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes {pred.shape} vs {gt.shape}")
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def _ious(samples: list[EvalSample]) -> np.ndarray:
    return np.array([iou(s.pred_mask, s.gt_mask) for s in samples])


def precision_at_k(samples: list[EvalSample], k: float) -> float:
    """Fraction of samples whose IoU reaches k (inclusive)."""
    if not samples:
        raise ContractError("precision_at_k on empty sample list")
    vals = _ious(samples)
    return float(np.count_nonzero(vals >= k) / len(samples))


def overall_and_mean_iou(samples: list[EvalSample]) -> tuple[float, float]:
    """(pooled intersection/union, arithmetic mean of per-sample IoU)."""
    if not samples:
        raise ContractError("overall_and_mean_iou on empty sample list")
    inter = sum(int(np.count_nonzero(s.pred_mask & s.gt_mask)) for s in samples)
    union = sum(int(np.count_nonzero(s.pred_mask | s.gt_mask)) for s in samples)
    overall = 1.0 if union == 0 else inter / union
    return float(overall), float(_ious(samples).mean())


def _average_precision(tp: np.ndarray, n_gt: int) -> float:
    """AP from a confidence-sorted TP/FP sequence, all-point interpolation."""
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(~tp)
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)
    # monotone precision envelope from the right
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, env):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def map_50_95(samples: list[EvalSample]) -> float:
    if not samples:
        raise ContractError("map_50_95 on empty sample list")
    order = sorted(range(len(samples)),
                   key=lambda i: (-samples[i].confidence, samples[i].sample_id))
    vals = _ious(samples)[order]
    aps = []
    for t in MAP_THRESHOLDS:
        tp = vals >= t
        aps.append(_average_precision(tp, len(samples)))
    return float(np.mean(aps))


@dataclass
class MetricReport:
    precision_at: dict = field(default_factory=dict)
    overall_iou: float = 0.0
    mean_iou: float = 0.0
    map_50_95: float = 0.0
    n_samples: int = 0

    @staticmethod
    def from_samples(samples: list[EvalSample]) -> "MetricReport":
        overall, mean_v = overall_and_mean_iou(samples)
        return MetricReport(
            precision_at={k: precision_at_k(samples, k) for k in PRECISION_KS},
            overall_iou=overall,
            mean_iou=mean_v,
            map_50_95=map_50_95(samples),
            n_samples=len(samples),
        )

    def to_json(self) -> str:
        return json.dumps({
            "precision_at": {str(k): v for k, v in self.precision_at.items()},
            "overall_iou": self.overall_iou,
            "mean_iou": self.mean_iou,
            "map_50_95": self.map_50_95,
            "n_samples": self.n_samples,
        }, indent=2)

    def to_table(self) -> str:
        headers = [f"P@{k}" for k in PRECISION_KS] + ["Overall", "Mean", "mAP"]
        values = [self.precision_at[k] for k in PRECISION_KS] \
            + [self.overall_iou, self.mean_iou, self.map_50_95]
        cells = [f"{v:7.4f}" for v in values]
        head = " ".join(f"{h:>7}" for h in headers)
        return head + "\n" + " ".join(cells)
