"""AdamW training with warmup + cosine schedule, gradient clipping and parameter EMA."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from dyfadet import tensorcore as tc
from dyfadet.config import ModelConfig, TrainConfig, config_to_dict, model_config_from_dict
from dyfadet.detection import (
    Detection,
    LossOutput,
    Segment,
    TargetAssignment,
    assign_targets,
    postprocess,
    total_loss,
)
from dyfadet.errors import TrainingError
from dyfadet.evaluation import EvalReport, map_report
from dyfadet.io import load_checkpoint, save_checkpoint
from dyfadet.model import Detector
from dyfadet.synth import Video

log = logging.getLogger(__name__)


def learning_rate(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup to ``base_lr`` at ``warmup_steps``, then cosine decay to 0 at ``total_steps``."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min((step - warmup_steps + 1) / span, 1.0)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


class AdamW:
    def __init__(
        self,
        params: Sequence[tc.Tensor],
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            # decay matrices/kernels only; biases, norms and scalars are exempt
            if self.weight_decay and p.data.ndim >= 2:
                p.data *= 1.0 - lr * self.weight_decay
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params: Sequence[tc.Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


class EMA:
    """Exponential moving average of parameters with a short-horizon warmup.

    The effective decay is ``min(decay, (1 + n) / (10 + n))`` after ``n``
    updates, so early averages are not dominated by the initialization.
    """

    def __init__(self, named: Sequence[tuple[str, tc.Tensor]], decay: float = 0.999):
        self.decay = decay
        self.updates = 0
        self.names = [n for n, _ in named]
        self.shadow = {n: p.data.copy() for n, p in named}

    def update(self, named: Sequence[tuple[str, tc.Tensor]]) -> None:
        d = min(self.decay, (1.0 + self.updates) / (10.0 + self.updates))
        self.updates += 1
        for name, p in named:
            s = self.shadow[name]
            s *= d
            s += (1.0 - d) * p.data

    def state(self) -> dict[str, np.ndarray]:
        return {n: a.copy() for n, a in self.shadow.items()}


@dataclass
class TrainResult:
    model: Detector
    ema: dict[str, np.ndarray]
    history: list[dict] = field(default_factory=list)
    seconds: float = 0.0

    def ema_model(self) -> Detector:
        model = Detector(self.model.config)
        model.load_state_dict(self.ema)
        return model


def crop(video: Video, max_len: int, rng: np.random.Generator) -> tuple[np.ndarray, list[Segment]]:
    """Random window of at most ``max_len`` frames with segments clipped into it."""
    T = video.length
    if T <= max_len:
        return video.features, list(video.segments)
    start = int(rng.integers(0, T - max_len + 1))
    end = start + max_len
    segs = []
    for g in video.segments:
        s, e = max(g.start, start), min(g.end, end)
        if e > s:
            segs.append(Segment(s - start, e - start, g.label, g.video_id))
    return video.features[:, start:end], segs


def targets_for(config: ModelConfig, T: int, segments: Sequence[Segment]) -> TargetAssignment:
    return assign_targets(
        segments,
        config.level_lengths(T),
        config.strides,
        config.num_classes,
        radius=config.center_radius,
    )


def batch_loss(model: Detector, items: Sequence[tuple[np.ndarray, list[Segment]]]):
    """Loss over a batch; equal-length items are stacked, others run one by one."""
    cfg = model.config
    assignments = [targets_for(cfg, f.shape[1], segs) for f, segs in items]
    lengths = {f.shape[1] for f, _ in items}
    if len(lengths) == 1:
        out = model(np.stack([f for f, _ in items]))
        return total_loss(out.cls_probs, out.reg_offsets, assignments, cfg.reg_weight)
    num_pos = sum(a.num_positive for a in assignments)
    norm = float(max(num_pos, 1))
    total = None
    cls_v = reg_v = 0.0
    for (f, _), a in zip(items, assignments):
        out = model(f[None])
        part = total_loss(out.cls_probs, out.reg_offsets, [a], cfg.reg_weight)
        scale = max(part.num_pos, 1) / norm
        term = part.total * scale
        total = term if total is None else total + term
        cls_v += part.cls * scale
        reg_v += part.reg * scale
    return LossOutput(total, cls_v, reg_v, num_pos)


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    videos: Sequence[Video],
    dump_dir: str | Path | None = None,
) -> TrainResult:
    model_config.validate()
    train_config.validate()
    rng = np.random.default_rng(train_config.seed)
    model = Detector(model_config, seed=train_config.seed)
    named = list(model.named_parameters())
    params = [p for _, p in named]
    opt = AdamW(params, train_config.betas, train_config.adam_eps, train_config.weight_decay)
    ema = EMA(named, train_config.ema_decay)
    n = len(videos)
    bs = train_config.batch_size
    steps_per_epoch = -(-n // bs)
    total_steps = train_config.epochs * steps_per_epoch
    warmup_steps = train_config.warmup_epochs * steps_per_epoch
    history: list[dict] = []
    step = 0
    t0 = time.perf_counter()
    for epoch in range(train_config.epochs):
        order = rng.permutation(n)
        losses = []
        for b in range(steps_per_epoch):
            idx = order[b * bs : (b + 1) * bs]
            items = [crop(videos[i], train_config.max_input_length, rng) for i in idx]
            out = batch_loss(model, items)
            value = float(out.total.data)
            if not math.isfinite(value):
                _dump_batch(dump_dir, epoch, step, [videos[i].video_id for i in idx], items)
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} step {step} "
                    f"(videos {[videos[i].video_id for i in idx]})"
                )
            model.zero_grad()
            tc.backward(out.total)
            gnorm = clip_grad_norm(params, train_config.grad_clip)
            lr = learning_rate(step, total_steps, warmup_steps, train_config.lr)
            opt.step(lr)
            ema.update(named)
            losses.append((value, out.cls, out.reg, gnorm))
            step += 1
        arr = np.array(losses)
        record = {
            "epoch": epoch,
            "loss": float(arr[:, 0].mean()),
            "cls": float(arr[:, 1].mean()),
            "reg": float(arr[:, 2].mean()),
            "grad_norm": float(arr[:, 3].mean()),
            "lr": lr,
        }
        history.append(record)
        if epoch % 10 == 0 or epoch == train_config.epochs - 1:
            log.info("epoch %d loss %.4f (cls %.4f reg %.4f) lr %.2e", epoch, record["loss"],
                     record["cls"], record["reg"], lr)
    return TrainResult(model, ema.state(), history, time.perf_counter() - t0)


def _dump_batch(dump_dir, epoch, step, ids, items) -> None:
    if dump_dir is None:
        return
    path = Path(dump_dir) / f"nan_batch_e{epoch}_s{step}.npz"
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"features_{vid}": f for vid, (f, _) in zip(ids, items)}
    arrays.update(
        {f"segments_{vid}": np.array([[g.start, g.end, g.label] for g in segs]).reshape(-1, 3)
         for vid, (_, segs) in zip(ids, items)}
    )
    np.savez(path, **arrays)
    log.error("dumped offending batch to %s", path)


# ----------------------------------------------------------------------------
# inference / evaluation


def detect(model: Detector, video: Video) -> list[Detection]:
    """Full-sequence forward pass and post-processing for one video."""
    with tc.no_grad():
        out = model(video.features)
    return postprocess(
        [c.data for c in out.cls_probs],
        [r.data for r in out.reg_offsets],
        out.strides,
        model.config.postprocess,
        video_id=video.video_id,
        duration=float(video.length),
        frame_seconds=video.feature_stride_s,
    )


def infer(model: Detector, videos: Sequence[Video]) -> list[Detection]:
    dets: list[Detection] = []
    for v in videos:
        dets.extend(detect(model, v))
    return dets


def evaluate(model: Detector, videos: Sequence[Video], thresholds=(0.5,)) -> EvalReport:
    gts = [g for v in videos for g in v.segments_seconds()]
    return map_report(infer(model, videos), gts, thresholds)


def save_result(path: str | Path, result: TrainResult, train_config: TrainConfig | None = None) -> None:
    save_checkpoint(
        path,
        config_to_dict(result.model.config, train_config),
        result.model.state_dict(),
        result.ema,
    )


def load_model(path: str | Path, use_ema: bool = True) -> Detector:
    config, params, ema = load_checkpoint(path)
    model = Detector(model_config_from_dict(config["model"]))
    model.load_state_dict(ema if use_ema and ema else params)
    return model
