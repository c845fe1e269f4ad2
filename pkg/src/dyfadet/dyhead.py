"""Multi-scale dynamic head: adjacent-level fusion through attention DFA paths.

Each of the D rounds reads only the previous round's features at every
level, so levels inside a round are independent. Parameters are shared
across levels, never across rounds.
"""

from __future__ import annotations

import numpy as np

from dyfadet import tensorcore as tc
from dyfadet.dfa import DFAParams, dfa_att
from dyfadet.encoder import FeatureMap, FeaturePyramid, LayerNorm
from dyfadet.errors import ConfigurationError, DimensionError
from dyfadet.tensorcore import Module

PATHS = ("down", "up", "depth")


def _att_params(width: int, k: int, gate: str, rng: np.random.Generator) -> DFAParams:
    return DFAParams(width, k=k, formation="K", gate=gate, depthwise=True, bias=False, rng=rng)


class DyHeadRound(Module):
    def __init__(self, width: int, k: int, gate: str, rng: np.random.Generator):
        self.down = _att_params(width, k, gate, rng)
        self.up = _att_params(width, k, gate, rng)
        self.depth = _att_params(width, k, gate, rng)
        self.down_norm = LayerNorm(width)
        self.up_norm = LayerNorm(width)
        self.gamma = tc.parameter(np.array(1.0))
        self.alpha = tc.parameter(np.array(1.0))


class DyHead(Module):
    def __init__(
        self,
        width: int,
        depth: int = 3,
        k: int = 3,
        gate: str = "relu",
        rng: np.random.Generator | None = None,
    ):
        if depth < 1:
            raise ConfigurationError("head depth must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.rounds = [DyHeadRound(width, k, gate, rng) for _ in range(depth)]

    @property
    def depth(self) -> int:
        return len(self.rounds)

    def __call__(self, pyramid: FeaturePyramid, trace: dict | None = None) -> FeaturePyramid:
        return dyhead_forward(pyramid, self, trace)


def _collect(trace: dict | None, key: tuple) -> list | None:
    if trace is None:
        return None
    return trace.setdefault(key, [])


def fuse_level(
    f_lower: FeatureMap | None,
    f: FeatureMap,
    f_upper: FeatureMap | None,
    d: int,
    params: DyHead,
    trace: dict | None = None,
) -> FeatureMap:
    """gamma_d * (DS(att(LN(lower))) + US(att(LN(upper)))) + alpha_d * f."""
    rnd = params.rounds[d]
    neighbours = None
    if f_lower is not None:
        if f_lower.stride * 2 != f.stride:
            raise DimensionError(f"lower neighbour stride {f_lower.stride} vs {f.stride}")
        h = dfa_att(rnd.down_norm(f_lower.data), rnd.down, _collect(trace, (d, "down", f.level)))
        h = tc.max_pool_ds2(h)
        if h.shape[-1] != f.length:
            raise DimensionError(f"downsampled lower level has length {h.shape[-1]}, need {f.length}")
        neighbours = h
    if f_upper is not None:
        if f_upper.stride != f.stride * 2:
            raise DimensionError(f"upper neighbour stride {f_upper.stride} vs {f.stride}")
        h = dfa_att(rnd.up_norm(f_upper.data), rnd.up, _collect(trace, (d, "up", f.level)))
        h = tc.linear_upsample_x2(h, f.length)
        neighbours = h if neighbours is None else neighbours + h
    out = rnd.alpha * f.data
    if neighbours is not None:
        out = rnd.gamma * neighbours + out
    return FeatureMap(out, f.stride, f.level)


def depth_step(f_tilde: FeatureMap, d: int, params: DyHead, trace: dict | None = None) -> FeatureMap:
    y = dfa_att(f_tilde.data, params.rounds[d].depth, _collect(trace, (d, "depth", f_tilde.level)))
    return FeatureMap(y, f_tilde.stride, f_tilde.level)


def dyhead_forward(
    pyramid: FeaturePyramid, params: DyHead, trace: dict | None = None
) -> FeaturePyramid:
    """D synchronous rounds of fuse-then-depth-step over every level.

    ``trace``, when given, maps ``(round, path, level)`` to lists of gate arrays.
    """
    levels = list(pyramid.levels)
    n = len(levels)
    for d in range(params.depth):
        new_levels = []
        for i, f in enumerate(levels):
            lower = levels[i - 1] if i > 0 else None
            upper = levels[i + 1] if i + 1 < n else None
            fused = fuse_level(lower, f, upper, d, params, trace)
            new_levels.append(depth_step(fused, d, params, trace))
        levels = new_levels
    return FeaturePyramid(levels)
