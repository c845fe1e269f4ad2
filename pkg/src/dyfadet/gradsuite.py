"""Finite-difference checks of every differentiable building block at toy sizes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from dyfadet import tensorcore as tc
from dyfadet.detection import (
    ClsHead,
    RegHead,
    Segment,
    assign_targets,
    classify,
    diou_loss,
    focal_loss,
    regress,
    total_loss,
)
from dyfadet.dfa import DFAParams, dfa_att, dfa_conv
from dyfadet.dyhead import DyHead, depth_step, fuse_level
from dyfadet.encoder import DynELayer, FeatureMap, dyne_layer

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def _random(rng, shape, scale=1.0) -> tc.Tensor:
    return tc.Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def _leaves(module: tc.Module) -> list[tc.Tensor]:
    return list(module.parameters())


def _positive_psi(params: DFAParams) -> None:
    # keep relu gates away from their kink so central differences are valid
    for p in (params.psi_dw_bias, params.psi_proj_bias):
        if p is not None:
            p.data[...] = 3.0


def check_dfa_conv(rng) -> float:
    worst = 0.0
    for formation in ("K", "C", "CK"):
        p = DFAParams(3, 2, k=3, formation=formation, rng=rng)
        _positive_psi(p)
        x = _random(rng, (3, 9), 0.3)
        w = rng.standard_normal((2, 9))
        worst = max(worst, tc.gradcheck(lambda: tc.tsum(dfa_conv(x, p) * w), [x] + _leaves(p)))
    p = DFAParams(3, k=3, window_factor=2, depthwise=True, rng=rng)
    _positive_psi(p)
    x = _random(rng, (3, 14), 0.3)
    w = rng.standard_normal((3, 14))
    worst = max(worst, tc.gradcheck(lambda: tc.tsum(dfa_conv(x, p) * w), [x] + _leaves(p)))
    return worst


def check_dfa_att(rng) -> float:
    p = DFAParams(3, k=3, depthwise=True, bias=False, rng=rng)
    _positive_psi(p)
    x = _random(rng, (3, 10), 0.3)
    w = rng.standard_normal((3, 10))
    return tc.gradcheck(lambda: tc.tsum(dfa_att(x, p) * w), [x] + _leaves(p))


def check_dyne_layer(rng) -> float:
    worst = 0.0
    for downsample in (False, True):
        layer = DynELayer(4, k=3, window_factor=2, downsample=downsample, rng=rng)
        _positive_psi(layer.instance)
        _positive_psi(layer.window)
        x = _random(rng, (4, 12))
        T_out = 6 if downsample else 12
        w = rng.standard_normal((4, T_out))
        # perturb the input off max-pool ties
        x.data += 0.01 * np.arange(12)
        worst = max(worst, tc.gradcheck(lambda: tc.tsum(dyne_layer(x, layer) * w), [x] + _leaves(layer)))
    return worst


def _head(rng, depth=2) -> DyHead:
    head = DyHead(3, depth=depth, k=3, rng=rng)
    for rnd in head.rounds:
        for p in (rnd.down, rnd.up, rnd.depth):
            _positive_psi(p)
    return head


def check_fuse_level(rng) -> float:
    head = _head(rng, 1)
    lower = FeatureMap(_random(rng, (3, 16)), 2, 0)
    mid = FeatureMap(_random(rng, (3, 8)), 4, 1)
    upper = FeatureMap(_random(rng, (3, 4)), 8, 2)
    lower.data.data += 0.01 * np.arange(16)
    w = rng.standard_normal((3, 8))
    leaves = [lower.data, mid.data, upper.data] + _leaves(head)
    return tc.gradcheck(lambda: tc.tsum(fuse_level(lower, mid, upper, 0, head).data * w), leaves)


def check_depth_step(rng) -> float:
    head = _head(rng, 2)
    f = FeatureMap(_random(rng, (3, 9)), 2, 0)
    w = rng.standard_normal((3, 9))

    def two_steps():
        g = depth_step(depth_step(f, 0, head), 1, head)
        return tc.tsum(g.data * w)

    return tc.gradcheck(two_steps, [f.data] + _leaves(head.rounds[0].depth) + _leaves(head.rounds[1].depth))


def check_classify(rng) -> float:
    head = ClsHead(3, 2, rng)
    x = _random(rng, (3, 7))
    w = rng.standard_normal((2, 7))
    return tc.gradcheck(lambda: tc.tsum(classify(x, head) * w), [x] + _leaves(head))


def check_regress(rng) -> float:
    head = RegHead(3, rng, bias_init=5.0)  # positive branch of the relu
    x = _random(rng, (3, 7), 0.3)
    w = rng.standard_normal((2, 7))
    return tc.gradcheck(lambda: tc.tsum(regress(x, head) * w), [x] + _leaves(head))


def check_focal_loss(rng) -> float:
    logits = _random(rng, (3, 6))
    y = (rng.random((3, 6)) < 0.4).astype(float)
    return tc.gradcheck(lambda: tc.tsum(focal_loss(tc.sigmoid(logits), y)), [logits])


def check_diou_loss(rng) -> float:
    pred = tc.Tensor(rng.uniform(0.5, 3.0, (6, 2)), requires_grad=True)
    target = rng.uniform(0.5, 3.0, (6, 2))
    # nudge away from min/max ties
    pred.data += 0.05 * (np.abs(pred.data - target) < 0.05)
    return tc.gradcheck(lambda: tc.tsum(diou_loss(pred, target)), [pred])


def check_total_loss(rng) -> float:
    strides = [1, 2]
    lengths = [16, 8]
    gts = [Segment(2.0, 7.0, 0), Segment(8.0, 15.0, 1)]
    a = assign_targets(gts, lengths, strides, 2)
    cls_logits = [_random(rng, (2, T)) for T in lengths]
    reg_raw = [tc.Tensor(rng.uniform(0.5, 4.0, (2, T)), requires_grad=True) for T in lengths]

    def loss():
        return total_loss([tc.sigmoid(c) for c in cls_logits], reg_raw, a).total

    return tc.gradcheck(loss, cls_logits + reg_raw)


CHECKS: dict[str, Callable] = {
    "dfa_conv": check_dfa_conv,
    "dfa_att": check_dfa_att,
    "dyne_layer": check_dyne_layer,
    "fuse_level": check_fuse_level,
    "depth_step": check_depth_step,
    "classify": check_classify,
    "regress": check_regress,
    "focal_loss": check_focal_loss,
    "diou_loss": check_diou_loss,
    "total_loss": check_total_loss,
}


def run_suite(seed: int = 0) -> list[CheckResult]:
    results = []
    for name, fn in CHECKS.items():
        rng = np.random.default_rng([seed, len(results)])
        results.append(CheckResult(name, float(fn(rng))))
    return results
