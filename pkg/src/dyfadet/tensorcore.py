"""Dense numerics with reverse-mode differentiation.

Arrays are numpy ``float64`` with layout ``(..., channels, time)``; leading
axes, when present, are a batch of videos. Every op returns a new
:class:`Tensor` and, when any input requires a gradient, records a closure
that maps the output gradient to input gradients.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from dyfadet.errors import ConfigurationError, ContractError, DimensionError

DTYPE = np.float64
NORM_EPS = 1e-5

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference, EMA evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    # let numpy arrays on the left defer to Tensor's reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ----------------------------------------------------------------------------
# backward pass


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Intermediate gradients live in a local table keyed by node identity, so
    calling this twice on the same graph accumulates leaf gradients exactly
    twice and never double-counts interior nodes.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def finite_difference_grad(f: Callable[[], float], x: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central-difference estimate of d f / d x, perturbing ``x.data`` in place."""
    out = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(f())
        flat[i] = orig - step
        lo = float(f())
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max elementwise |a-b| / max(|a|, |b|, 1e-8)."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


def gradcheck(
    fn: Callable[[], Tensor],
    inputs: Iterable[Tensor],
    step: float = 1e-5,
) -> float:
    """Compare analytic and central-difference gradients of scalar ``fn()``.

    Returns the worst relative error over all elements of ``inputs``.
    """
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
    backward(fn())
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = finite_difference_grad(lambda: fn().data, t, step)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


# ----------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        gb = g / b.data
        return _unbroadcast(gb, a.shape), _unbroadcast(-gb * out, b.shape)

    return _result(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data**exponent
    return _result(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log; inputs below ``floor`` are clamped (zero gradient there)."""
    x = np.maximum(a.data, floor) if floor > 0 else a.data
    out = np.log(x)

    def bw(g):
        gx = g / x
        if floor > 0:
            gx = np.where(a.data >= floor, gx, 0.0)
        return (gx,)

    return _result(out, (a,), bw)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return _result(out, (a,), lambda g: (g * (a.data > 0),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def restricted_tanh(a: Tensor) -> Tensor:
    """max(0, tanh(x)); zero for every negative input."""
    t = np.tanh(a.data)
    out = np.maximum(t, 0.0)
    return _result(out, (a,), lambda g: (g * (1.0 - t * t) * (a.data > 0),))


def identity(a: Tensor) -> Tensor:
    return a


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    return _result(
        np.where(pick_a, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
    )


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data
    return _result(
        np.where(pick_a, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
    )


def softmax(a: Tensor, axis: int = -2) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), bw)


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu,
    "restricted_tanh": restricted_tanh,
    "sigmoid": sigmoid,
    "identity": identity,
}


# ----------------------------------------------------------------------------
# shape and reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _result(out, (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    out = np.broadcast_to(a.data, shape)
    return _result(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, index) -> Tensor:
    def bw(g):
        out = np.zeros_like(a.data)
        if isinstance(index, np.ndarray) and index.dtype == bool:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _result(a.data[index], (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _result(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    return _result(
        np.stack([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.moveaxis(g, axis, 0)),
    )


# ----------------------------------------------------------------------------
# convolution family


def pointwise_conv(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """out[c, t] = sum_i weight[c, i] * x[i, t] + bias[c]."""
    if weight.ndim != 2 or weight.shape[1] != x.shape[-2]:
        raise DimensionError(f"weight {weight.shape} does not match input channels {x.shape[-2]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"bias {bias.shape} does not match {weight.shape[0]} outputs")
    out = np.matmul(weight.data, x.data)
    if bias is not None:
        out = out + bias.data[:, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = np.matmul(weight.data.T, g)
        gw = np.matmul(g, np.swapaxes(x.data, -1, -2))
        while gw.ndim > 2:
            gw = gw.sum(axis=0)
        if bias is None:
            return gx, gw
        gb = g.sum(axis=-1)
        while gb.ndim > 1:
            gb = gb.sum(axis=0)
        return gx, gw, gb

    return _result(out, parents, bw)


def tap_offsets(k: int) -> list[int]:
    if k < 1 or k % 2 == 0:
        raise ConfigurationError(f"kernel size must be a positive odd integer, got {k}")
    return [s - k // 2 for s in range(k)]


def _pad_time(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    out = np.zeros(x.shape[:-1] + (x.shape[-1] + 2 * pad,), dtype=x.dtype)
    out[..., pad:-pad] = x
    return out


def shift_stack(x: Tensor, offsets: Sequence[int]) -> Tensor:
    """Stack of time-shifted copies, shape ``(..., len(offsets) * C, T)``.

    Block ``s`` holds ``x[:, t + offsets[s]]`` with zeros outside ``[0, T)``.
    """
    offsets = [int(o) for o in offsets]
    T = x.shape[-1]
    C = x.shape[-2]
    pad = max(abs(o) for o in offsets)
    xp = _pad_time(x.data, pad)
    out = np.concatenate([xp[..., pad + o : pad + o + T] for o in offsets], axis=-2)

    def bw(g):
        gp = np.zeros_like(xp)
        for s, o in enumerate(offsets):
            gp[..., pad + o : pad + o + T] += g[..., s * C : (s + 1) * C, :]
        return (gp[..., pad : pad + T],)

    return _result(out, (x,), bw)


def depthwise_conv1d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    offsets: Sequence[int] | None = None,
) -> Tensor:
    """Per-channel temporal convolution with zero padding; output length T.

    ``weight`` is ``C x k``; tap ``s`` reads ``x[c, t + offsets[s]]`` where the
    default offsets are ``s - k // 2``.
    """
    C, k = weight.shape
    if x.shape[-2] != C:
        raise DimensionError(f"depthwise weight {weight.shape} vs input channels {x.shape[-2]}")
    offsets = tap_offsets(k) if offsets is None else [int(o) for o in offsets]
    T = x.shape[-1]
    pad = max(abs(o) for o in offsets)
    xp = _pad_time(x.data, pad)
    w = weight.data
    out = np.zeros(x.shape, dtype=DTYPE)
    for s, o in enumerate(offsets):
        out += w[:, s : s + 1] * xp[..., pad + o : pad + o + T]
    if bias is not None:
        out += bias.data[:, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gp = np.zeros_like(xp)
        gw = np.empty_like(w)
        for s, o in enumerate(offsets):
            sl = xp[..., pad + o : pad + o + T]
            gp[..., pad + o : pad + o + T] += w[:, s : s + 1] * g
            prod = (g * sl).sum(axis=-1)
            gw[:, s] = prod.reshape(-1, C).sum(axis=0)
        grads = [gp[..., pad : pad + T], gw]
        if bias is not None:
            grads.append(g.sum(axis=-1).reshape(-1, C).sum(axis=0))
        return tuple(grads)

    return _result(out, parents, bw)


def masked_depthwise_conv1d(
    x: Tensor,
    mask: Tensor,
    weight: Tensor,
    bias: Tensor | None,
    offsets: Sequence[int],
) -> Tensor:
    """``y[c, t] = sum_s weight[c, s] * mask[s, t] * x[c, t + offsets[s]] + bias[c]``.

    ``mask`` is ``(..., k, T)`` and is shared by all channels. Equivalent to
    shift_stack, a broadcast multiply and a per-tap sum, in one node.
    """
    C, k = weight.shape
    offsets = [int(o) for o in offsets]
    if x.shape[-2] != C or mask.shape[-2] != k or len(offsets) != k:
        raise DimensionError(
            f"masked depthwise: input {x.shape}, mask {mask.shape}, weight {weight.shape}"
        )
    T = x.shape[-1]
    pad = max(abs(o) for o in offsets)
    xp = _pad_time(x.data, pad)
    w, m = weight.data, mask.data
    shifted = [xp[..., pad + o : pad + o + T] for o in offsets]
    out = np.zeros(np.broadcast_shapes(x.shape, mask.shape[:-2] + (1, T)), dtype=DTYPE)
    for s in range(k):
        out += w[:, s : s + 1] * (m[..., s : s + 1, :] * shifted[s])
    if bias is not None:
        out += bias.data[:, None]
    parents = (x, mask, weight) if bias is None else (x, mask, weight, bias)

    def bw(g):
        gp = np.zeros_like(xp)
        gm = np.empty_like(m)
        gw = np.empty_like(w)
        for s, o in enumerate(offsets):
            ms = m[..., s : s + 1, :]
            gp[..., pad + o : pad + o + T] += w[:, s : s + 1] * ms * g
            gs = g * shifted[s]
            gm[..., s, :] = np.einsum("...ct,c->...t", gs, w[:, s])
            gw[:, s] = (gs * ms).sum(axis=-1).reshape(-1, C).sum(axis=0)
        grads = [gp[..., pad : pad + T], gm, gw]
        if bias is not None:
            grads.append(g.sum(axis=-1).reshape(-1, C).sum(axis=0))
        return tuple(grads)

    return _result(out, parents, bw)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Dense temporal convolution, ``weight`` is ``C_out x C_in x k``, zero padding k//2."""
    C_out, C_in, k = weight.shape
    if x.shape[-2] != C_in:
        raise DimensionError(f"conv weight {weight.shape} vs input channels {x.shape[-2]}")
    offsets = tap_offsets(k)
    T = x.shape[-1]
    pad = k // 2
    xp = _pad_time(x.data, pad)
    w = weight.data
    out = np.zeros(x.shape[:-2] + (C_out, T), dtype=DTYPE)
    for s, o in enumerate(offsets):
        out += np.matmul(w[:, :, s], xp[..., pad + o : pad + o + T])
    if bias is not None:
        out += bias.data[:, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gp = np.zeros_like(xp)
        gw = np.empty_like(w)
        for s, o in enumerate(offsets):
            sl = xp[..., pad + o : pad + o + T]
            gp[..., pad + o : pad + o + T] += np.matmul(w[:, :, s].T, g)
            gws = np.matmul(g, np.swapaxes(sl, -1, -2))
            gw[:, :, s] = gws.reshape(-1, C_out, C_in).sum(axis=0)
        grads = [gp[..., pad : pad + T], gw]
        if bias is not None:
            grads.append(g.sum(axis=-1).reshape(-1, C_out).sum(axis=0))
        return tuple(grads)

    return _result(out, parents, bw)


# ----------------------------------------------------------------------------
# resampling


def max_pool_ds2(x: Tensor) -> Tensor:
    """Pairwise max along time; an odd trailing element passes through."""
    T = x.shape[-1]
    if T < 1:
        raise DimensionError("max_pool_ds2 needs T >= 1")
    xd = x.data
    if T % 2:
        xd = np.concatenate([xd, xd[..., -1:]], axis=-1)
    pairs = xd.reshape(xd.shape[:-1] + (xd.shape[-1] // 2, 2))
    pick_second = pairs[..., 1] > pairs[..., 0]
    out = np.where(pick_second, pairs[..., 1], pairs[..., 0])

    def bw(g):
        gpairs = np.zeros(pairs.shape, dtype=DTYPE)
        gpairs[..., 0] = np.where(pick_second, 0.0, g)
        gpairs[..., 1] = np.where(pick_second, g, 0.0)
        gx = gpairs.reshape(xd.shape)
        return (gx[..., :T],)

    return _result(out, (x,), bw)


def _upsample_index(T: int, target_T: int) -> tuple[np.ndarray, np.ndarray]:
    if T == 1 or target_T == 1:
        return np.zeros(target_T, dtype=int), np.zeros(target_T)
    pos = np.arange(target_T) * (T - 1) / (target_T - 1)
    lo = np.minimum(np.floor(pos).astype(int), T - 2)
    return lo, pos - lo


def upsample_matrix(T: int, target_T: int) -> np.ndarray:
    """Interpolation matrix ``U`` (T x target_T) with aligned endpoints."""
    U = np.zeros((T, target_T), dtype=DTYPE)
    lo, frac = _upsample_index(T, target_T)
    cols = np.arange(target_T)
    U[lo, cols] += 1.0 - frac
    if T > 1:
        U[lo + 1, cols] += frac
    return U


def linear_upsample_x2(x: Tensor, target_T: int) -> Tensor:
    """Linear interpolation to ``target_T`` in {2T-1, 2T}, endpoints aligned.

    Evaluated as ``x[lo] + frac * (x[lo+1] - x[lo])`` so constant signals
    come back bit-exact.
    """
    T = x.shape[-1]
    if target_T not in (2 * T - 1, 2 * T):
        raise DimensionError(f"target length {target_T} not in {{{2 * T - 1}, {2 * T}}}")
    lo, frac = _upsample_index(T, target_T)
    hi = np.minimum(lo + 1, T - 1)
    a = x.data[..., lo]
    out = a + frac * (x.data[..., hi] - a)
    U = upsample_matrix(T, target_T)
    return _result(out, (x,), lambda g: (np.matmul(g, U.T),))


# ----------------------------------------------------------------------------
# normalization


def layer_norm(x: Tensor, gain: Tensor, offset: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Normalize each timestamp over channels, then per-channel affine."""
    mu = x.data.mean(axis=-2, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data[:, None] + offset.data[:, None]

    def bw(g):
        gh = g * gain.data[:, None]
        gx = inv * (
            gh - gh.mean(axis=-2, keepdims=True) - xhat * (gh * xhat).mean(axis=-2, keepdims=True)
        )
        ggain = (g * xhat).sum(axis=-1).reshape(-1, gain.shape[0]).sum(axis=0)
        goff = g.sum(axis=-1).reshape(-1, offset.shape[0]).sum(axis=0)
        return gx, ggain, goff

    return _result(out, (x, gain, offset), bw)


def group_norm(x: Tensor, groups: int, gain: Tensor, offset: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Normalize over (channels in group) x time, then per-channel affine."""
    C, T = x.shape[-2], x.shape[-1]
    if groups < 1 or C % groups:
        raise ConfigurationError(f"{C} channels not divisible into {groups} groups")
    lead = x.shape[:-2]
    xg = x.data.reshape(lead + (groups, (C // groups) * T))
    mu = xg.mean(axis=-1, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(x.shape)
    out = xhat * gain.data[:, None] + offset.data[:, None]

    def bw(g):
        gh = (g * gain.data[:, None]).reshape(xg.shape)
        xh = xhat.reshape(xg.shape)
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xh * (gh * xh).mean(axis=-1, keepdims=True))
        ggain = (g * xhat).sum(axis=-1).reshape(-1, C).sum(axis=0)
        goff = g.sum(axis=-1).reshape(-1, C).sum(axis=0)
        return gx.reshape(x.shape), ggain, goff

    return _result(out, (x, gain, offset), bw)


# ----------------------------------------------------------------------------
# parameter containers


class Module:
    """Attribute-walking parameter container.

    Parameters are :class:`Tensor` attributes with ``requires_grad``; child
    modules may sit in attributes or in lists. Names are dotted paths in
    attribute insertion order, which keeps checkpoints stable.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{path}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise ContractError(f"state is missing parameters: {sorted(missing)[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=DTYPE)
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: expected {p.shape}, got {arr.shape}")
            p.data = arr.copy()


def init_kernel(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    return parameter(rng.standard_normal(shape) / math.sqrt(fan_in))
