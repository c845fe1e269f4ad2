"""Straight-line reference implementations used only by the tests.

Nothing here imports the library's numerical code; each routine is written
from the defining formula with explicit loops.
"""

from __future__ import annotations

import math

import numpy as np


def conv_loops(x, weight, bias, offsets):
    """Dense conv: y[o, t] = sum_i sum_s W[o, i, s] * x[i, t + offsets[s]] + b[o]."""
    C_in, T = x.shape
    C_out = weight.shape[0]
    y = np.zeros((C_out, T))
    for o in range(C_out):
        for t in range(T):
            acc = 0.0 if bias is None else bias[o]
            for i in range(C_in):
                for s, off in enumerate(offsets):
                    if 0 <= t + off < T:
                        acc += weight[o, i, s] * x[i, t + off]
            y[o, t] = acc
    return y


def depthwise_loops(x, weight, bias, offsets):
    C, T = x.shape
    y = np.zeros((C, T))
    for c in range(C):
        for t in range(T):
            acc = 0.0 if bias is None else bias[c]
            for s, off in enumerate(offsets):
                if 0 <= t + off < T:
                    acc += weight[c, s] * x[c, t + off]
            y[c, t] = acc
    return y


def gather_single_tap(x, weight, bias, offsets, tap, depthwise):
    """Per-timestamp gather of the one selected tap, then scale by its kernel column."""
    C_in, T = x.shape
    C_out = weight.shape[0]
    y = np.zeros((C_out, T))
    for t in range(T):
        s = int(tap[t])
        src = t + offsets[s]
        col = x[:, src] if 0 <= src < T else np.zeros(C_in)
        if depthwise:
            y[:, t] = weight[:, s] * col
        else:
            y[:, t] = weight[:, :, s] @ col
        if bias is not None:
            y[:, t] += bias
    return y


def assign_brute(gts, lengths, strides, num_classes, radius, ranges):
    """Evaluate the positive-point rules one grid point and one instance at a time."""
    out = []
    for T, stride, (lo, hi) in zip(lengths, strides, ranges):
        cls = np.zeros((num_classes, T))
        reg = np.zeros((2, T))
        center = np.zeros(T, dtype=bool)
        for t in range(T):
            p = t * stride
            best = None
            for g in gts:
                left, right = p - g.start, g.end - p
                if not (left > 0 and right > 0):
                    continue
                if abs(p - 0.5 * (g.start + g.end)) > radius * stride:
                    continue
                m = max(left, right)
                if not (lo <= m < hi):
                    continue
                cls[g.label, t] = 1.0
                if best is None or g.end - g.start < best.end - best.start:
                    best = g
            if best is not None:
                center[t] = True
                reg[0, t] = (p - best.start) / stride
                reg[1, t] = (best.end - p) / stride
        out.append((cls, reg, center))
    return out


def focal_scalar(p, y, alpha=0.25, gamma=2.0):
    if y == 1:
        return -alpha * (1 - p) ** gamma * math.log(max(p, 1e-8))
    return -(1 - alpha) * p**gamma * math.log(max(1 - p, 1e-8))


def diou_intervals(a, b):
    """1 - IoU + (centre gap / enclosing length)^2 for intervals a, b."""
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    enc = max(a[1], b[1]) - min(a[0], b[0])
    gap = 0.5 * (a[0] + a[1]) - 0.5 * (b[0] + b[1])
    return 1.0 - inter / union + (gap / enc) ** 2


def tiou_pair(a, b):
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    return inter / ((a[1] - a[0]) + (b[1] - b[0]) - inter)


def ap_bruteforce(dets, gts, threshold):
    """AP by quadratic matching and a per-rank interpolated-precision sum.

    ``dets``: list of (video, start, end, score); ``gts``: list of (video, start, end).
    Detections are visited in descending score (stable for ties); each one
    scans every ground truth and keeps the free one with the highest tIoU
    (first index on ties). AP sums, over each true-positive rank, the largest
    precision observed at that rank or any later one, divided by #GT.
    """
    if not gts:
        return math.nan
    order = sorted(range(len(dets)), key=lambda i: -dets[i][3])
    taken = [False] * len(gts)
    hits = []
    for i in order:
        vid, s, e, _ = dets[i]
        best_j, best_iou = -1, -1.0
        for j, (gv, gs, ge) in enumerate(gts):
            if gv != vid or taken[j]:
                continue
            iou = tiou_pair((s, e), (gs, ge))
            if iou >= threshold and iou > best_iou:
                best_j, best_iou = j, iou
        if best_j >= 0:
            taken[best_j] = True
        hits.append(best_j >= 0)
    n = len(hits)
    precision = []
    tp = 0
    for r in range(n):
        tp += hits[r]
        precision.append(tp / (r + 1))
    ap = 0.0
    for r in range(n):
        if hits[r]:
            ap += max(precision[r:]) / len(gts)
    return ap


def cosine_loops(x):
    C, T = x.shape
    S = np.zeros((T, T))
    for i in range(T):
        for j in range(T):
            ni = math.sqrt(sum(x[c, i] ** 2 for c in range(C)))
            nj = math.sqrt(sum(x[c, j] ** 2 for c in range(C)))
            if i == j:
                S[i, j] = 1.0
            elif ni == 0 or nj == 0:
                S[i, j] = 0.0
            else:
                S[i, j] = sum(x[c, i] * x[c, j] for c in range(C)) / (ni * nj)
    return S


def soft_nms_reference(items, sigma, min_score, max_det):
    """items: list of (start, end, label, score). Straight transcription of Gaussian soft-NMS."""
    pool = [list(it) for it in items]
    kept = []
    while pool and len(kept) < max_det:
        i = max(range(len(pool)), key=lambda k: pool[k][3])
        top = pool.pop(i)
        if top[3] < min_score:
            break
        kept.append(tuple(top))
        for it in pool:
            if it[2] == top[2]:
                iou = tiou_pair((top[0], top[1]), (it[0], it[1]))
                it[3] *= math.exp(-(iou**2) / sigma)
        pool = [it for it in pool if it[3] >= min_score]
    return kept


def random_eval_instance(rng):
    """A small detection problem: up to 10 detections, 5 GT, 3 classes over 2 videos."""
    num_classes = int(rng.integers(1, 4))
    gts = []
    for _ in range(int(rng.integers(1, 6))):
        s = float(rng.integers(0, 20))
        gts.append((f"v{int(rng.integers(2))}", s, s + float(rng.integers(1, 8)), int(rng.integers(num_classes))))
    dets = []
    for _ in range(int(rng.integers(0, 11))):
        s = float(rng.integers(0, 20)) + rng.uniform(-0.5, 0.5)
        e = s + rng.uniform(0.5, 8.0)
        # coarse scores so equal-score ties actually occur
        dets.append((f"v{int(rng.integers(2))}", s, e, int(rng.integers(num_classes)), round(rng.uniform(), 1)))
    return gts, dets


def map_bruteforce(gts, dets, threshold):
    """Mean over classes that have ground truth of ``ap_bruteforce``."""
    classes = sorted({g[3] for g in gts})
    aps = []
    for c in classes:
        cg = [(v, s, e) for v, s, e, lab in gts if lab == c]
        cd = [(v, s, e, sc) for v, s, e, lab, sc in dets if lab == c]
        aps.append(ap_bruteforce(cd, cg, threshold))
    return sum(aps) / len(aps)
