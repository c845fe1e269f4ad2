"""Per-timestamp gate values and feature-similarity statistics for a trained model."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from dyfadet import tensorcore as tc
from dyfadet.evaluation import mean_offdiagonal, similarity_matrix
from dyfadet.model import Detector
from dyfadet.synth import Video


def _unbatch(a: np.ndarray) -> list:
    return np.asarray(a).tolist()


def video_diagnostics(model: Detector, video: Video, include_matrices: bool = True) -> dict:
    trace: dict = {}
    with tc.no_grad():
        out = model(video.features, trace)
    encoder = {
        layer: {branch: _unbatch(g) for branch, g in gates.items()}
        for layer, gates in trace.get("encoder", {}).items()
    }
    heads = {}
    for head in ("cls_head", "reg_head"):
        heads[head] = {
            f"round{d}/{path}/level{lv}": _unbatch(gates[0])
            for (d, path, lv), gates in sorted(trace.get(head, {}).items())
        }
    levels = {}
    for fm in out.pyramid:
        S = similarity_matrix(fm)
        entry = {"stride": fm.stride, "mean_offdiagonal": mean_offdiagonal(S)}
        if include_matrices:
            entry["similarity"] = S.tolist()
        levels[str(fm.level)] = entry
    return {"encoder_gates": encoder, "head_gates": heads, "levels": levels}


def deepest_similarity(model: Detector, videos: Sequence[Video]) -> float:
    """Mean off-diagonal cosine similarity of the coarsest pyramid level, averaged over videos."""
    values = []
    with tc.no_grad():
        for v in videos:
            pyramid = model.encoder(tc.as_tensor(v.features))
            values.append(mean_offdiagonal(similarity_matrix(pyramid[len(pyramid) - 1])))
    return float(np.mean(values))


def dump(model: Detector, videos: Sequence[Video], include_matrices: bool = True) -> dict:
    return {v.video_id: video_diagnostics(model, v, include_matrices) for v in videos}
