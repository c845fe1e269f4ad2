"""Feature embedding, DynE layers and pyramid construction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dyfadet import tensorcore as tc
from dyfadet.dfa import DFAParams, dfa_conv, window_offsets
from dyfadet.errors import ConfigurationError
from dyfadet.tensorcore import Module, Tensor


@dataclass
class FeatureMap:
    data: Tensor
    stride: int
    level: int = 0

    @property
    def length(self) -> int:
        return self.data.shape[-1]


@dataclass
class FeaturePyramid:
    levels: list[FeatureMap] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.levels)

    def __iter__(self):
        return iter(self.levels)

    def __getitem__(self, i: int) -> FeatureMap:
        return self.levels[i]

    @property
    def strides(self) -> list[int]:
        return [lv.stride for lv in self.levels]

    @property
    def lengths(self) -> list[int]:
        return [lv.length for lv in self.levels]


class LayerNorm(Module):
    def __init__(self, channels: int):
        self.gain = tc.parameter(np.ones(channels))
        self.offset = tc.parameter(np.zeros(channels))

    def __call__(self, x: Tensor) -> Tensor:
        return tc.layer_norm(x, self.gain, self.offset)


class ConvBlock(Module):
    """Dense conv (kernel 3) + LN + ReLU."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        self.weight = tc.init_kernel(rng, (out_channels, in_channels, 3), in_channels * 3)
        self.bias = tc.parameter(np.zeros(out_channels))
        self.norm = LayerNorm(out_channels)

    def __call__(self, x: Tensor) -> Tensor:
        return tc.relu(self.norm(tc.conv1d(x, self.weight, self.bias)))


class Embedding(Module):
    def __init__(self, in_channels: int, width: int, rng: np.random.Generator):
        self.blocks = [ConvBlock(in_channels, width, rng), ConvBlock(width, width, rng)]

    def __call__(self, raw: Tensor) -> Tensor:
        return embed(raw, self)


def embed(raw: Tensor, params: Embedding) -> Tensor:
    """Project raw features to the model width with two conv-LN-ReLU blocks."""
    x = raw
    for block in params.blocks:
        x = block(x)
    return x


class DynELayer(Module):
    """Instance-dynamic branch + windowed DFA branch + residual.

    The instance branch gates the (optionally downsampled) input with a
    single-row mask computed from the channel-averaged, normalized signal,
    then scales each channel (kernel size 1). The window branch is a
    depthwise DFA with dilated taps over the normalized signal.
    """

    def __init__(
        self,
        width: int,
        k: int = 3,
        window_factor: int = 5,
        formation: str = "K",
        gate: str = "relu",
        downsample: bool = True,
        rng: np.random.Generator | None = None,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.downsample = downsample
        self.norm = LayerNorm(width)
        self.instance = DFAParams(
            width, k=1, formation="K", gate=gate, depthwise=True, psi_in_channels=1, rng=rng
        )
        self.window = DFAParams(
            width, k=k, formation=formation, gate=gate, window_factor=window_factor,
            depthwise=True, rng=rng,
        )

    def __call__(self, f: Tensor, trace: dict | None = None) -> Tensor:
        return dyne_layer(f, self, trace)


def dyne_layer(f: Tensor, params: DynELayer, trace: dict | None = None) -> Tensor:
    x = tc.max_pool_ds2(f) if params.downsample else f
    h = params.norm(x)
    squeezed = tc.mean(h, axis=-2, keepdims=True)
    ins_trace = [] if trace is not None else None
    win_trace = [] if trace is not None else None
    f_ins = dfa_conv(x, params.instance, mask_source=squeezed, trace=ins_trace)
    f_k = dfa_conv(h, params.window, trace=win_trace)
    if trace is not None:
        trace["instance"] = ins_trace[0]
        trace["window"] = win_trace[0]
    return f_k + f_ins + x


class StaticLayer(Module):
    """The DynE layer with every mask fixed to one.

    Same branches, taps, widths and residual as :class:`DynELayer`, so a
    comparison against it isolates the input-dependent masks.
    """

    def __init__(
        self,
        width: int,
        k: int = 3,
        window_factor: int = 5,
        downsample: bool = True,
        rng: np.random.Generator | None = None,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.downsample = downsample
        self.norm = LayerNorm(width)
        self.offsets = window_offsets(k, window_factor)
        self.instance_kernel = tc.init_kernel(rng, (width, 1), 1)
        self.instance_bias = tc.parameter(np.zeros(width))
        self.window_kernel = tc.init_kernel(rng, (width, k), k)
        self.window_bias = tc.parameter(np.zeros(width))

    def __call__(self, f: Tensor, trace: dict | None = None) -> Tensor:
        x = tc.max_pool_ds2(f) if self.downsample else f
        f_ins = tc.depthwise_conv1d(x, self.instance_kernel, self.instance_bias)
        f_k = tc.depthwise_conv1d(self.norm(x), self.window_kernel, self.window_bias, offsets=self.offsets)
        return f_k + f_ins + x


class ConvLayer(Module):
    """Dense static layer: x + ReLU(conv3(LN(x)))."""

    def __init__(self, width: int, downsample: bool = True, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.downsample = downsample
        self.norm = LayerNorm(width)
        self.weight = tc.init_kernel(rng, (width, width, 3), width * 3)
        self.bias = tc.parameter(np.zeros(width))

    def __call__(self, f: Tensor, trace: dict | None = None) -> Tensor:
        x = tc.max_pool_ds2(f) if self.downsample else f
        return x + tc.relu(tc.conv1d(self.norm(x), self.weight, self.bias))


class Encoder(Module):
    """Embedding, stem layers (no downsampling) and downsampling layers.

    ``layer_type`` is ``"dyne"``, ``"conv"`` (DynE with masks fixed to one)
    or ``"dense_conv"`` (dense k=3 convolutions).
    """

    def __init__(
        self,
        in_channels: int,
        width: int,
        k: int = 3,
        window_factor: int = 5,
        formation: str = "K",
        gate: str = "relu",
        num_stem: int = 2,
        num_down: int = 5,
        include_stem_level: bool = False,
        layer_type: str = "dyne",
        rng: np.random.Generator | None = None,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        if num_down < 1:
            raise ConfigurationError("num_down must be >= 1")
        if layer_type not in ("dyne", "conv", "dense_conv"):
            raise ConfigurationError(f"unknown encoder layer type {layer_type!r}")
        self.num_down = num_down
        self.include_stem_level = include_stem_level
        self.layer_type = layer_type
        self.embedding = Embedding(in_channels, width, rng)

        def make(downsample: bool) -> Module:
            if layer_type == "conv":
                return StaticLayer(width, k, window_factor, downsample, rng)
            if layer_type == "dense_conv":
                return ConvLayer(width, downsample=downsample, rng=rng)
            return DynELayer(width, k, window_factor, formation, gate, downsample, rng)

        self.stem = [make(False) for _ in range(num_stem)]
        self.down = [make(True) for _ in range(num_down)]
        n_levels = num_down + (1 if include_stem_level else 0)
        self.out_norms = [LayerNorm(width) for _ in range(n_levels)]

    def __call__(self, raw: Tensor, trace: dict | None = None) -> FeaturePyramid:
        return build_pyramid(raw, self, trace)


def build_pyramid(raw: Tensor, encoder: Encoder, trace: dict | None = None) -> FeaturePyramid:
    """Run the encoder; each pyramid level is the LN of one downsampling layer's output."""
    T = raw.shape[-1]
    if T < 2**encoder.num_down:
        raise ConfigurationError(
            f"input length {T} too short for {encoder.num_down} downsampling layers"
        )
    x = encoder.embedding(raw)
    for i, layer in enumerate(encoder.stem):
        x = layer(x, None if trace is None else trace.setdefault(f"stem{i}", {}))
    outputs: list[tuple[Tensor, int]] = []
    if encoder.include_stem_level:
        outputs.append((x, 1))
    stride = 1
    for i, layer in enumerate(encoder.down):
        x = layer(x, None if trace is None else trace.setdefault(f"down{i}", {}))
        stride *= 2
        outputs.append((x, stride))
    levels = [
        FeatureMap(norm(feat), stride=s, level=i)
        for i, ((feat, s), norm) in enumerate(zip(outputs, encoder.out_norms))
    ]
    return FeaturePyramid(levels)
