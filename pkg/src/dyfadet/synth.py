"""Synthetic feature sequences with exactly known action instances."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dyfadet.detection import Segment


@dataclass
class Video:
    video_id: str
    features: np.ndarray  # C x T, values exactly representable in float32
    segments: list[Segment]  # frames
    feature_stride_s: float = 1.0

    @property
    def length(self) -> int:
        return self.features.shape[1]

    @property
    def duration_s(self) -> float:
        return self.length * self.feature_stride_s

    def segments_seconds(self) -> list[Segment]:
        s = self.feature_stride_s
        return [Segment(g.start * s, g.end * s, g.label, self.video_id) for g in self.segments]


@dataclass
class SynthConfig:
    num_videos: int = 40
    num_train: int = 32
    length: int = 256
    num_classes: int = 3
    channels: int = 16
    noise_level: float = 0.5
    min_duration: int = 8
    max_duration: int = 96
    max_instances: int = 4
    gap: int = 4
    feature_stride_s: float = 1.0


def class_patterns(rng: np.random.Generator, num_classes: int, channels: int) -> np.ndarray:
    """Per class: a constant direction and a ramp direction, ``K x 2 x C``."""
    return rng.standard_normal((num_classes, 2, channels))


def _place(rng: np.random.Generator, cfg: SynthConfig) -> list[tuple[int, int]]:
    n = int(rng.integers(1, cfg.max_instances + 1))
    spans: list[tuple[int, int]] = []
    for _ in range(50 * n):
        if len(spans) == n:
            break
        dur = int(round(np.exp(rng.uniform(np.log(cfg.min_duration), np.log(cfg.max_duration)))))
        dur = min(dur, cfg.length - 2)
        start = int(rng.integers(0, cfg.length - dur + 1))
        end = start + dur
        if all(end + cfg.gap <= s or start >= e + cfg.gap for s, e in spans):
            spans.append((start, end))
    return sorted(spans)


def synth_dataset(
    seed: int = 7,
    num_videos: int = 40,
    length: int = 256,
    num_classes: int = 3,
    noise_level: float = 0.5,
    **overrides,
) -> list[Video]:
    """Gaussian-noise videos with class patterns superimposed over each instance.

    An instance of class c over frames [s, e) adds
    ``P[c, 0] + (2 * tau - 1) * P[c, 1]`` where tau runs 0 -> 1 across the
    span. Everything is drawn from ``default_rng(seed)``.
    """
    cfg = SynthConfig(
        num_videos=num_videos, length=length, num_classes=num_classes,
        noise_level=noise_level, **overrides,
    )
    rng = np.random.default_rng(seed)
    patterns = class_patterns(rng, cfg.num_classes, cfg.channels)
    videos = []
    for v in range(cfg.num_videos):
        feats = noise_level * rng.standard_normal((cfg.channels, cfg.length))
        segments = []
        for start, end in _place(rng, cfg):
            label = int(rng.integers(cfg.num_classes))
            tau = np.linspace(0.0, 1.0, end - start)
            pattern = patterns[label, 0][:, None] + (2 * tau - 1)[None, :] * patterns[label, 1][:, None]
            feats[:, start:end] += pattern
            segments.append(Segment(float(start), float(end), label, f"video_{v:03d}"))
        videos.append(
            Video(
                f"video_{v:03d}",
                feats.astype(np.float32).astype(np.float64),
                segments,
                cfg.feature_stride_s,
            )
        )
    return videos


def split(videos: list[Video], num_train: int = 32) -> tuple[list[Video], list[Video]]:
    return videos[:num_train], videos[num_train:]


def annotations_json(videos: list[Video]) -> dict:
    out = {}
    for v in videos:
        out[v.video_id] = {
            "duration_s": v.duration_s,
            "feature_stride_s": v.feature_stride_s,
            "annotations": [
                {"segment": [g.start, g.end], "label": g.label} for g in v.segments_seconds()
            ],
        }
    return out


def videos_from_files(features: dict[str, np.ndarray], annotations: dict | None) -> list[Video]:
    """Pair feature arrays with annotation entries (segments converted to frames)."""
    videos = []
    for vid in sorted(features):
        entry = (annotations or {}).get(vid)
        stride = float(entry["feature_stride_s"]) if entry else 1.0
        segs = []
        if entry:
            for ann in entry["annotations"]:
                s, e = ann["segment"]
                segs.append(Segment(s / stride, e / stride, int(ann["label"]), vid))
        videos.append(Video(vid, features[vid], segs, stride))
    return videos
