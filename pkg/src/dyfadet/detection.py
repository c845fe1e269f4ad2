"""Classification/regression outputs, target assignment, losses and post-processing.

Time inside this module is measured in input-grid units (feature frames):
grid point ``t`` of a level with stride ``s`` sits at frame ``t * s``, and
regression offsets are expressed in units of the level stride.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from dyfadet import tensorcore as tc
from dyfadet.encoder import FeatureMap
from dyfadet.errors import DimensionError
from dyfadet.tensorcore import Module, Tensor

CENTER_RADIUS = 1.5
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
LOG_FLOOR = 1e-8
DIOU_EPS = 1e-8


@dataclass
class Segment:
    start: float
    end: float
    label: int
    video_id: str = ""

    @property
    def length(self) -> float:
        return self.end - self.start


@dataclass
class Detection(Segment):
    score: float = 0.0

    def to_json(self) -> dict:
        return {
            "video_id": self.video_id,
            "t_start": float(self.start),
            "t_end": float(self.end),
            "label": int(self.label),
            "score": float(self.score),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Detection":
        return cls(
            start=float(obj["t_start"]),
            end=float(obj["t_end"]),
            label=int(obj["label"]),
            video_id=str(obj["video_id"]),
            score=float(obj["score"]),
        )


@dataclass
class PostprocessConfig:
    score_threshold: float = 0.001
    pre_nms_topk: int = 2000
    nms_sigma: float = 0.5
    min_score: float = 0.001
    max_detections: int = 200

    def to_dict(self) -> dict:
        return asdict(self)


# ----------------------------------------------------------------------------
# output modules


class ClsHead(Module):
    def __init__(self, width: int, num_classes: int, rng: np.random.Generator, prior: float = 0.01):
        self.weight = tc.init_kernel(rng, (num_classes, width, 3), width * 3)
        # background-heavy start keeps the summed focal loss small at step 0
        self.bias = tc.parameter(np.full(num_classes, -math.log((1 - prior) / prior)))


class RegHead(Module):
    def __init__(self, width: int, rng: np.random.Generator, bias_init: float = 1.0):
        self.weight = tc.init_kernel(rng, (2, width, 3), width * 3)
        self.bias = tc.parameter(np.full(2, bias_init))


def classify(f: FeatureMap | Tensor, params: ClsHead) -> Tensor:
    """Per-timestamp class probabilities, ``num_classes x T``."""
    x = f.data if isinstance(f, FeatureMap) else f
    return tc.sigmoid(tc.conv1d(x, params.weight, params.bias))


def regress(f: FeatureMap | Tensor, params: RegHead) -> Tensor:
    """Non-negative (start, end) distances in stride units, ``2 x T``."""
    x = f.data if isinstance(f, FeatureMap) else f
    return tc.relu(tc.conv1d(x, params.weight, params.bias))


def decode(
    t: int,
    offsets: Sequence[float],
    stride: int,
    duration: float | None = None,
) -> tuple[float, float] | None:
    """Grid point + stride-unit offsets -> (start, end) in frames, or None if degenerate."""
    d_s, d_e = float(offsets[0]), float(offsets[1])
    start = (t - d_s) * stride
    end = (t + d_e) * stride
    start = max(start, 0.0)
    if duration is not None:
        end = min(end, duration)
    if start >= end:
        return None
    return start, end


# ----------------------------------------------------------------------------
# target assignment


@dataclass
class LevelTargets:
    cls: np.ndarray  # num_classes x T, multi-hot
    reg: np.ndarray  # 2 x T, stride units; zero where negative
    center: np.ndarray  # T, bool


@dataclass
class TargetAssignment:
    levels: list[LevelTargets] = field(default_factory=list)

    @property
    def num_positive(self) -> int:
        return int(sum(lv.center.sum() for lv in self.levels))


def regression_ranges(strides: Sequence[int]) -> list[tuple[float, float]]:
    """Level with stride s owns max-offsets in [s, 2s) frames; ends open."""
    ranges = [(float(s), float(2 * s)) for s in strides]
    if ranges:
        ranges[0] = (0.0, ranges[0][1])
        ranges[-1] = (ranges[-1][0], math.inf)
    return ranges


def assign_targets(
    gts: Sequence[Segment],
    lengths: Sequence[int],
    strides: Sequence[int],
    num_classes: int,
    radius: float = CENTER_RADIUS,
    ranges: Sequence[tuple[float, float]] | None = None,
) -> TargetAssignment:
    """Label grid points near instance centres as positive.

    Point p (frame ``t * stride``) is positive for instance [s, e] iff
    ``s < p < e``, ``|p - (s + e) / 2| <= radius * stride`` and
    ``max(p - s, e - p)`` falls in the level's range. Regression targets
    come from the shortest matching instance; class targets are the union
    of the labels of all matching instances.
    """
    if len(lengths) != len(strides):
        raise DimensionError("one length per stride required")
    ranges = regression_ranges(strides) if ranges is None else list(ranges)
    levels = []
    for T, stride, (lo, hi) in zip(lengths, strides, ranges):
        cls = np.zeros((num_classes, T))
        reg = np.zeros((2, T))
        center = np.zeros(T, dtype=bool)
        if gts:
            p = np.arange(T, dtype=float)[:, None] * stride
            s = np.array([g.start for g in gts])[None, :]
            e = np.array([g.end for g in gts])[None, :]
            left, right = p - s, e - p
            max_off = np.maximum(left, right)
            ok = (
                (left > 0)
                & (right > 0)
                & (np.abs(p - (s + e) / 2) <= radius * stride)
                & (max_off >= lo)
                & (max_off < hi)
            )
            dur = np.where(ok, e - s, np.inf)
            best = np.argmin(dur, axis=1)
            hit = ok.any(axis=1)
            center[:] = hit
            rows = np.nonzero(hit)[0]
            reg[0, rows] = left[rows, best[rows]] / stride
            reg[1, rows] = right[rows, best[rows]] / stride
            labels = np.array([g.label for g in gts])
            for j in range(len(gts)):
                cls[labels[j], ok[:, j]] = 1.0
        levels.append(LevelTargets(cls, reg, center))
    return TargetAssignment(levels)


# ----------------------------------------------------------------------------
# losses


def focal_loss(probs: Tensor, targets, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> Tensor:
    """Elementwise sigmoid focal loss on probabilities; log arguments floored at 1e-8."""
    p = tc.as_tensor(probs)
    y = np.asarray(targets, dtype=tc.DTYPE)
    q = 1.0 - p
    pos = alpha * y * (q**gamma) * tc.log(p, floor=LOG_FLOOR)
    neg = (1.0 - alpha) * (1.0 - y) * (p**gamma) * tc.log(q, floor=LOG_FLOOR)
    return -(pos + neg)


def diou_loss(pred: Tensor, target) -> Tensor:
    """1 - IoU + (centre distance / enclosing length)^2 for offset pairs.

    ``pred`` and ``target`` are ``(..., 2)`` arrays of (d_start, d_end)
    measured from a shared anchor; the result has shape ``(...)``.
    """
    pred = tc.as_tensor(pred)
    target = tc.as_tensor(target)
    ps, pe = pred[..., 0], pred[..., 1]
    ts, te = target[..., 0], target[..., 1]
    inter = tc.minimum(ps, ts) + tc.minimum(pe, te)
    union = ps + pe + ts + te - inter
    # floors only bite on degenerate (zero-length) pairs
    iou = inter / tc.maximum(union, DIOU_EPS)
    enclosing = tc.maximum(ps, ts) + tc.maximum(pe, te)
    centre_gap = ((pe - ps) - (te - ts)) * 0.5
    return 1.0 - iou + (centre_gap * centre_gap) / tc.maximum(enclosing * enclosing, DIOU_EPS)


@dataclass
class LossOutput:
    total: Tensor
    cls: float
    reg: float
    num_pos: int


def _stack_targets(assignments: Sequence[TargetAssignment], attr: str) -> np.ndarray:
    per_video = [
        np.concatenate([getattr(lv, attr) for lv in a.levels], axis=-1) for a in assignments
    ]
    return np.stack(per_video)


def total_loss(
    cls_probs: Sequence[Tensor],
    reg_offsets: Sequence[Tensor],
    assignment: TargetAssignment | Sequence[TargetAssignment],
    reg_weight: float = 1.0,
) -> LossOutput:
    """Summed focal loss plus weighted DIoU over positives, divided by max(T_pos, 1).

    ``cls_probs[l]`` / ``reg_offsets[l]`` are ``(B, K, T_l)`` / ``(B, 2, T_l)``
    (or unbatched) with one assignment per batch item.
    """
    assignments = [assignment] if isinstance(assignment, TargetAssignment) else list(assignment)
    unbatched = cls_probs[0].ndim == 2
    if unbatched:
        cls_probs = [tc.reshape(c, (1,) + c.shape) for c in cls_probs]
        reg_offsets = [tc.reshape(r, (1,) + r.shape) for r in reg_offsets]
    if cls_probs[0].shape[0] != len(assignments):
        raise DimensionError("one target assignment per batch item required")
    probs = tc.concat(cls_probs, axis=-1)
    offsets = tc.concat(reg_offsets, axis=-1)
    cls_t = _stack_targets(assignments, "cls")
    reg_t = _stack_targets(assignments, "reg")
    center = _stack_targets(assignments, "center")
    if probs.shape != cls_t.shape:
        raise DimensionError(f"class outputs {probs.shape} vs targets {cls_t.shape}")

    num_pos = int(center.sum())
    norm = float(max(num_pos, 1))
    cls_sum = tc.tsum(focal_loss(probs, cls_t))
    total = cls_sum / norm
    reg_value = 0.0
    if num_pos:
        pred_pos = tc.transpose(offsets, (0, 2, 1))[center]
        tgt_pos = np.transpose(reg_t, (0, 2, 1))[center]
        reg_sum = tc.tsum(diou_loss(pred_pos, tgt_pos))
        reg_term = reg_weight * reg_sum / norm
        reg_value = float(reg_term.data)
        total = total + reg_term
    return LossOutput(total=total, cls=float(cls_sum.data) / norm, reg=reg_value, num_pos=num_pos)


# ----------------------------------------------------------------------------
# inference


def _segment_iou(start: float, end: float, starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    inter = np.clip(np.minimum(end, ends) - np.maximum(start, starts), 0.0, None)
    union = (end - start) + (ends - starts) - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def soft_nms(
    dets: Sequence[Detection],
    sigma: float = 0.5,
    min_score: float = 0.001,
    max_detections: int = 200,
) -> list[Detection]:
    """Gaussian Soft-NMS within each class: keep the best, decay the rest by exp(-iou^2/sigma)."""
    if not dets:
        return []
    starts = np.array([d.start for d in dets], dtype=float)
    ends = np.array([d.end for d in dets], dtype=float)
    labels = np.array([d.label for d in dets])
    scores = np.array([d.score for d in dets], dtype=float)
    alive = scores >= min_score
    kept: list[Detection] = []
    while alive.any() and len(kept) < max_detections:
        idx = int(np.argmax(np.where(alive, scores, -np.inf)))
        src = dets[idx]
        kept.append(Detection(src.start, src.end, src.label, src.video_id, float(scores[idx])))
        alive[idx] = False
        same = alive & (labels == labels[idx])
        if same.any():
            iou = _segment_iou(starts[idx], ends[idx], starts[same], ends[same])
            scores[same] *= np.exp(-(iou * iou) / sigma)
            alive &= scores >= min_score
    return kept


def postprocess(
    cls_probs: Sequence[np.ndarray],
    reg_offsets: Sequence[np.ndarray],
    strides: Sequence[int],
    config: PostprocessConfig | None = None,
    video_id: str = "",
    duration: float | None = None,
    frame_seconds: float = 1.0,
) -> list[Detection]:
    """Threshold -> decode -> top-k -> Soft-NMS for one video.

    ``cls_probs[l]`` is ``K x T_l`` and ``reg_offsets[l]`` is ``2 x T_l``;
    ``duration`` is in frames. Output times are in seconds.
    """
    config = config or PostprocessConfig()
    cand_scores, cand_start, cand_end, cand_label = [], [], [], []
    for probs, offs, stride in zip(cls_probs, reg_offsets, strides):
        probs = np.asarray(probs)
        offs = np.asarray(offs)
        label_idx, t_idx = np.nonzero(probs > config.score_threshold)
        if t_idx.size == 0:
            continue
        start = np.maximum((t_idx - offs[0, t_idx]) * stride, 0.0)
        end = (t_idx + offs[1, t_idx]) * stride
        if duration is not None:
            end = np.minimum(end, duration)
        keep = start < end
        cand_scores.append(probs[label_idx, t_idx][keep])
        cand_start.append(start[keep])
        cand_end.append(end[keep])
        cand_label.append(label_idx[keep])
    if not cand_scores:
        return []
    scores = np.concatenate(cand_scores)
    starts = np.concatenate(cand_start)
    ends = np.concatenate(cand_end)
    labels = np.concatenate(cand_label)
    order = np.argsort(-scores, kind="stable")[: config.pre_nms_topk]
    dets = [
        Detection(
            float(starts[i]) * frame_seconds,
            float(ends[i]) * frame_seconds,
            int(labels[i]),
            video_id,
            float(scores[i]),
        )
        for i in order
    ]
    kept = soft_nms(dets, config.nms_sigma, config.min_score, config.max_detections)
    kept.sort(key=lambda d: -d.score)
    return kept
