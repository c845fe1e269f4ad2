"""Dynamic feature aggregation: masked shifted copies fed to a pointwise conv.

A temporal convolution with kernel size ``k`` is a shift into ``k`` stacked
copies followed by a 1x1 convolution. Re-weighting the stacked copies with
an input-dependent, non-negative mask turns it into a convolution whose
weights and receptive field change per timestamp.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from dyfadet import tensorcore as tc
from dyfadet.errors import ConfigurationError, DimensionError
from dyfadet.tensorcore import Module, Tensor

FORMATIONS = ("K", "C", "CK")
ATT_EPS = 1e-8


def mask_channels(formation: str, k: int, in_channels: int) -> int:
    if formation == "K":
        return k
    if formation == "C":
        return in_channels
    if formation == "CK":
        return k * in_channels
    raise ConfigurationError(f"unknown formation {formation!r}; expected one of {FORMATIONS}")


def window_offsets(k: int, window_factor: int = 1) -> list[int]:
    """Tap offsets; with ``window_factor > 1`` the k taps spread over w*(k+1) steps."""
    base = tc.tap_offsets(k)
    if window_factor < 1:
        raise ConfigurationError(f"window factor must be >= 1, got {window_factor}")
    if window_factor == 1 or k == 1:
        return base
    half = window_factor * (k + 1) / 2
    return [int(v) for v in np.round(np.linspace(-half, half, k))]


class DFAParams(Module):
    """Kernel, mask generator and structural choices of one DFA operator.

    The mask generator is a depthwise conv (``psi_kernel`` taps) over the
    mask source, followed by a pointwise projection when the number of mask
    rows differs from the source channel count. ``psi_in_channels`` lets the
    mask come from a different signal than the one being aggregated.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int | None = None,
        k: int = 3,
        formation: str = "K",
        gate: str = "relu",
        window_factor: int = 1,
        depthwise: bool = False,
        psi_in_channels: int | None = None,
        psi_kernel: int = 3,
        bias: bool = True,
        psi_bias_init: float = 1.0,
        rng: np.random.Generator | None = None,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        out_channels = in_channels if out_channels is None else out_channels
        if depthwise and out_channels != in_channels:
            raise ConfigurationError("depthwise DFA needs out_channels == in_channels")
        if gate not in tc.ACTIVATIONS:
            raise ConfigurationError(f"unknown gate {gate!r}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.k = k
        self.formation = formation
        self.gate = gate
        self.window_factor = window_factor
        self.depthwise = depthwise
        self.offsets = window_offsets(k, window_factor)
        self.psi_in_channels = in_channels if psi_in_channels is None else psi_in_channels
        self.mask_rows = mask_channels(formation, k, in_channels)

        if depthwise:
            self.kernel = tc.init_kernel(rng, (in_channels, k), k)
        else:
            self.kernel = tc.init_kernel(rng, (out_channels, in_channels, k), in_channels * k)
        self.bias = tc.parameter(np.zeros(out_channels)) if bias else None

        cp = self.psi_in_channels
        self.psi_dw_weight = tc.init_kernel(rng, (cp, psi_kernel), psi_kernel)
        if self.mask_rows == cp:
            self.psi_dw_bias = tc.parameter(np.full(cp, psi_bias_init))
            self.psi_proj_weight = None
            self.psi_proj_bias = None
        else:
            self.psi_dw_bias = tc.parameter(np.zeros(cp))
            self.psi_proj_weight = tc.init_kernel(rng, (self.mask_rows, cp), cp)
            self.psi_proj_bias = tc.parameter(np.full(self.mask_rows, psi_bias_init))

    def __call__(self, f: Tensor) -> Tensor:
        return dfa_conv(f, self)


def shift(f: Tensor, k: int, offsets: Sequence[int] | None = None) -> Tensor:
    """Stack of k shifted copies; block s reads time t - k//2 + s, zero padded."""
    if offsets is None:
        offsets = tc.tap_offsets(k)
    elif len(offsets) != k:
        raise DimensionError(f"{len(offsets)} offsets for kernel size {k}")
    return tc.shift_stack(f, offsets)


def psi(source: Tensor, params: DFAParams) -> Tensor:
    """Raw mask scores before the gate."""
    if source.shape[-2] != params.psi_in_channels:
        raise DimensionError(
            f"mask source has {source.shape[-2]} channels, generator expects {params.psi_in_channels}"
        )
    h = tc.depthwise_conv1d(source, params.psi_dw_weight, params.psi_dw_bias)
    if params.psi_proj_weight is not None:
        h = tc.pointwise_conv(h, params.psi_proj_weight, params.psi_proj_bias)
    return h


def make_mask(f: Tensor, params: DFAParams) -> Tensor:
    return tc.ACTIVATIONS[params.gate](psi(f, params))


def upsample_mask(M: Tensor, in_channels: int, k: int, formation: str = "K") -> Tensor:
    """Expand a mask to the ``k * C_in`` rows of the shifted stack."""
    rows = mask_channels(formation, k, in_channels)
    if M.shape[-2] != rows:
        raise DimensionError(f"{formation}-formation mask needs {rows} rows, got {M.shape[-2]}")
    if formation == "CK":
        return M
    lead, T = M.shape[:-2], M.shape[-1]
    if formation == "K":
        M4 = tc.reshape(M, lead + (k, 1, T))
    else:
        M4 = tc.reshape(M, lead + (1, in_channels, T))
    full = tc.broadcast_to(M4, lead + (k, in_channels, T))
    return tc.reshape(full, lead + (k * in_channels, T))


def aggregate(masked: Tensor, params: DFAParams) -> Tensor:
    """Sum_s K_s applied to block s of a (masked) shifted stack."""
    k, C = params.k, params.in_channels
    if params.depthwise:
        lead, T = masked.shape[:-2], masked.shape[-1]
        blocks = tc.reshape(masked, lead + (k, C, T))
        taps = tc.reshape(tc.transpose(params.kernel, (1, 0)), (k, C, 1))
        y = tc.tsum(blocks * taps, axis=-3)
        if params.bias is not None:
            y = y + tc.reshape(params.bias, (C, 1))
        return y
    flat = tc.reshape(tc.transpose(params.kernel, (0, 2, 1)), (params.out_channels, k * C))
    return tc.pointwise_conv(masked, flat, params.bias)


def _masked_aggregate(f: Tensor, M: Tensor, params: DFAParams, fused: bool) -> Tensor:
    if fused and params.depthwise and params.formation == "K":
        return tc.masked_depthwise_conv1d(f, M, params.kernel, params.bias, params.offsets)
    stack = shift(f, params.k, params.offsets)
    masked = stack * upsample_mask(M, params.in_channels, params.k, params.formation)
    return aggregate(masked, params)


def dfa_conv(
    f: Tensor,
    params: DFAParams,
    mask_source: Tensor | None = None,
    trace: list | None = None,
    fused: bool = True,
    mask: Tensor | None = None,
) -> Tensor:
    """Convolution with per-timestamp weights and receptive field.

    The mask is computed from ``mask_source`` (default ``f``). When
    ``trace`` is a list, the gated mask array is appended to it. ``fused``
    picks the single-node kernel for depthwise K-formation sets; the
    unfused path is the literal shift / mask / aggregate composition.
    A precomputed ``mask`` (C_m x T, already gated) bypasses the generator.
    """
    if f.shape[-2] != params.in_channels:
        raise DimensionError(f"input has {f.shape[-2]} channels, DFA expects {params.in_channels}")
    if mask is not None:
        M = tc.as_tensor(mask)
    else:
        M = make_mask(f if mask_source is None else mask_source, params)
    if trace is not None:
        trace.append(M.data)
    return _masked_aggregate(f, M, params, fused)


def attention_weights(f: Tensor, params: DFAParams) -> tuple[Tensor, Tensor]:
    """Gate values and their per-timestamp normalization over the k taps."""
    G = make_mask(f, params)
    A = G / (tc.tsum(G, axis=-2, keepdims=True) + ATT_EPS)
    return G, A


def dfa_att(f: Tensor, params: DFAParams, trace: list | None = None, fused: bool = True) -> Tensor:
    """Depthwise DFA whose k tap weights are gated, sum-normalized attention.

    Timestamps where every gate is zero produce zero output when the
    parameter set carries no bias.
    """
    if not params.depthwise or params.formation != "K":
        raise ConfigurationError("dfa_att needs a depthwise K-formation parameter set")
    G, A = attention_weights(f, params)
    if trace is not None:
        trace.append(G.data)
    return _masked_aggregate(f, A, params, fused)


def plain_conv(f: Tensor, params: DFAParams) -> Tensor:
    """The static convolution a DFA reduces to under an all-ones mask."""
    if params.depthwise:
        return tc.depthwise_conv1d(f, params.kernel, params.bias, offsets=params.offsets)
    if params.offsets != tc.tap_offsets(params.k):
        raise ConfigurationError("dense reference conv supports contiguous taps only")
    return tc.conv1d(f, params.kernel, params.bias)
