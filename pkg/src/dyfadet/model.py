"""Full detector: encoder, separate classification/regression heads, output convs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dyfadet import tensorcore as tc
from dyfadet.config import ModelConfig
from dyfadet.detection import ClsHead, RegHead, classify, regress
from dyfadet.dyhead import DyHead
from dyfadet.encoder import Encoder, FeaturePyramid
from dyfadet.tensorcore import Module, Tensor


@dataclass
class ModelOutput:
    pyramid: FeaturePyramid
    cls_probs: list[Tensor]
    reg_offsets: list[Tensor]

    @property
    def strides(self) -> list[int]:
        return self.pyramid.strides


class Detector(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(
            config.in_channels,
            config.width,
            k=config.k,
            window_factor=config.window_factor,
            formation=config.formation,
            gate=config.gate,
            num_stem=config.num_stem,
            num_down=config.num_down,
            include_stem_level=config.include_stem_level,
            layer_type=config.encoder_type,
            rng=rng,
        )
        self.cls_trunk = DyHead(config.width, config.head_depth, config.head_k, config.gate, rng)
        self.reg_trunk = DyHead(config.width, config.head_depth, config.head_k, config.gate, rng)
        self.cls_out = ClsHead(config.width, config.num_classes, rng)
        self.reg_out = RegHead(config.width, rng)

    def __call__(self, features, trace: dict | None = None) -> ModelOutput:
        x = tc.as_tensor(features)
        enc_trace = None if trace is None else trace.setdefault("encoder", {})
        pyramid = self.encoder(x, enc_trace)
        cls_feats = self.cls_trunk(pyramid, None if trace is None else trace.setdefault("cls_head", {}))
        reg_feats = self.reg_trunk(pyramid, None if trace is None else trace.setdefault("reg_head", {}))
        cls_probs = [classify(f, self.cls_out) for f in cls_feats]
        reg_offsets = [regress(f, self.reg_out) for f in reg_feats]
        return ModelOutput(pyramid, cls_probs, reg_offsets)
