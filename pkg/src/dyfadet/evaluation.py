"""tIoU, interpolated AP, mAP reports and feature-similarity diagnostics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from dyfadet.detection import Detection, Segment
from dyfadet.encoder import FeatureMap
from dyfadet.errors import DimensionError
from dyfadet.tensorcore import Tensor

DEFAULT_THRESHOLDS = (0.3, 0.4, 0.5, 0.6, 0.7)


def tiou(a: Segment | Sequence[float], b: Segment | Sequence[float]) -> float:
    a0, a1 = (a.start, a.end) if isinstance(a, Segment) else (a[0], a[1])
    b0, b1 = (b.start, b.end) if isinstance(b, Segment) else (b[0], b[1])
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    union = (a1 - a0) + (b1 - b0) - inter
    return inter / union if union > 0 else 0.0


def interpolated_ap(precision: np.ndarray, recall: np.ndarray) -> float:
    """All-point area under the precision envelope."""
    mprec = np.concatenate([[0.0], precision, [0.0]])
    mrec = np.concatenate([[0.0], recall, [1.0]])
    for i in range(len(mprec) - 2, -1, -1):
        mprec[i] = max(mprec[i], mprec[i + 1])
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0] + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mprec[idx]))


def match_detections(
    dets: Sequence[Detection], gts: Sequence[Segment], threshold: float
) -> np.ndarray:
    """Greedy score-ordered matching; returns a true-positive flag per score-sorted detection.

    Each detection takes the highest-tIoU ground truth of its video that is
    still free and reaches ``threshold``; ties go to the earlier ground truth.
    """
    by_video: dict[str, list[int]] = {}
    for j, g in enumerate(gts):
        by_video.setdefault(g.video_id, []).append(j)
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    used = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(dets), dtype=bool)
    for rank, i in enumerate(order):
        cands = by_video.get(dets[i].video_id, [])
        if not cands:
            continue
        ious = np.array([tiou(dets[i], gts[j]) for j in cands])
        for c in np.argsort(-ious, kind="stable"):
            if ious[c] < threshold:
                break
            j = cands[c]
            if used[j]:
                continue
            used[j] = True
            tp[rank] = True
            break
    return tp


def average_precision(
    dets: Sequence[Detection], gts: Sequence[Segment], threshold: float
) -> float:
    """AP of one class; NaN when there is no ground truth to find."""
    if not gts:
        return math.nan
    if not dets:
        return 0.0
    tp = match_detections(dets, gts, threshold)
    tp_c = np.cumsum(tp)
    fp_c = np.cumsum(~tp)
    recall = tp_c / len(gts)
    precision = tp_c / (tp_c + fp_c)
    return interpolated_ap(precision, recall)


@dataclass
class EvalReport:
    thresholds: list[float]
    mAP: dict[float, float]
    average_mAP: float
    per_class: dict[float, dict[int, float]] = field(default_factory=dict)
    num_gt: int = 0
    num_detections: int = 0

    def to_json(self) -> dict:
        return {
            "thresholds": [float(t) for t in self.thresholds],
            "mAP": {f"{t:.2f}": v for t, v in self.mAP.items()},
            "average_mAP": self.average_mAP,
            "per_class": {
                f"{t:.2f}": {str(c): ap for c, ap in table.items()}
                for t, table in self.per_class.items()
            },
            "num_gt": self.num_gt,
            "num_detections": self.num_detections,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def map_report(
    dets: Sequence[Detection],
    gts: Sequence[Segment],
    thresholds: Iterable[float] = DEFAULT_THRESHOLDS,
) -> EvalReport:
    """Per-class AP averaged into mAP at each threshold; classes without ground truth are skipped."""
    thresholds = [float(t) for t in thresholds]
    classes = sorted({g.label for g in gts})
    dets_by_class = {c: [d for d in dets if d.label == c] for c in classes}
    gts_by_class = {c: [g for g in gts if g.label == c] for c in classes}
    per_class: dict[float, dict[int, float]] = {}
    maps: dict[float, float] = {}
    for t in thresholds:
        table = {c: average_precision(dets_by_class[c], gts_by_class[c], t) for c in classes}
        per_class[t] = table
        maps[t] = float(np.mean(list(table.values()))) if table else 0.0
    avg = float(np.mean(list(maps.values()))) if maps else 0.0
    return EvalReport(thresholds, maps, avg, per_class, len(gts), len(dets))


def similarity_matrix(f: FeatureMap | Tensor | np.ndarray) -> np.ndarray:
    """Cosine similarity between feature columns (timestamps), ``T x T``.

    Zero columns are dissimilar to everything except themselves.
    """
    if isinstance(f, FeatureMap):
        f = f.data
    x = f.data if isinstance(f, Tensor) else np.asarray(f, dtype=float)
    if x.ndim != 2:
        raise DimensionError(f"expected a C x T map, got shape {x.shape}")
    norms = np.linalg.norm(x, axis=0)
    safe = np.where(norms > 0, norms, 1.0)
    unit = x / safe
    S = unit.T @ unit
    zero = norms == 0
    S[zero, :] = 0.0
    S[:, zero] = 0.0
    np.fill_diagonal(S, 1.0)
    return S


def mean_offdiagonal(S: np.ndarray) -> float:
    n = S.shape[0]
    if n < 2:
        return 0.0
    return float((S.sum() - np.trace(S)) / (n * (n - 1)))
