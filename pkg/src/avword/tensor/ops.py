"""Differentiable network operations on :class:`Tensor`.

Convolution and pooling use the N x C x T x H x W layout. Convolution is an
im2col correlation whose column matrix is assembled one kernel offset at a
time, so both the forward gather and the backward scatter are plain strided
slices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import NonFiniteError, Tensor, as_tensor, check_finite, make_result

_AXES = ("t", "h", "w")


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise ValueError(f"expected 3 extents (t, h, w), got {v}")
    return v


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    in_channels: int
    kernel: tuple[int, int, int]
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: tuple[int, int, int] = (0, 0, 0)
    bias_enabled: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kernel", _triple(self.kernel))
        object.__setattr__(self, "stride", _triple(self.stride))
        object.__setattr__(self, "padding", _triple(self.padding))
        if self.out_channels < 1 or self.in_channels < 1:
            raise ValueError("channel counts must be >= 1")
        for name, k, s, p in zip(_AXES, self.kernel, self.stride, self.padding):
            if k < 1 or s < 1:
                raise ValueError(f"kernel and stride extents must be >= 1 (axis {name})")
            if not 0 <= p < k:
                raise ValueError(f"padding must satisfy 0 <= p < kernel on axis {name}")

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return (self.out_channels, self.in_channels) + self.kernel

    def output_extents(self, extents: Sequence[int]) -> tuple[int, int, int]:
        return pooled_extents(extents, self.kernel, self.stride, self.padding)


def pooled_extents(extents, kernel, stride, padding) -> tuple[int, int, int]:
    out = []
    for name, n, k, s, p in zip(_AXES, extents, kernel, stride, padding):
        span = n + 2 * p - k
        if span < 0:
            raise ValueError(f"kernel extent {k} exceeds padded input extent {n + 2 * p} on axis {name}")
        out.append(span // s + 1)
    return tuple(out)


def _offsets(kernel):
    kt, kh, kw = kernel
    for a in range(kt):
        for b in range(kh):
            for c in range(kw):
                yield a, b, c


def _window(a, b, c, out_ext, stride):
    to, ho, wo = out_ext
    st, sh, sw = stride
    return (
        slice(None),
        slice(None),
        slice(a, a + st * (to - 1) + 1, st),
        slice(b, b + sh * (ho - 1) + 1, sh),
        slice(c, c + sw * (wo - 1) + 1, sw),
    )


def _pad5(x: np.ndarray, padding, value=0.0) -> np.ndarray:
    if not any(padding):
        return x
    pt, ph, pw = padding
    return np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)), constant_values=value)


def conv3d(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Strided, zero-padded 3D cross-correlation."""
    if x.ndim != 5:
        raise ValueError(f"conv3d expects N x C x T x H x W input, got shape {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ValueError(f"channel axis mismatch: input has {x.shape[1]}, spec expects {spec.in_channels}")
    if weight.shape != spec.weight_shape:
        raise ValueError(f"weight shape {weight.shape} != expected {spec.weight_shape}")
    if spec.bias_enabled and (bias is None or bias.shape != (spec.out_channels,)):
        raise ValueError(f"bias must have shape ({spec.out_channels},)")
    check_finite(x.data, "conv3d input")

    n, c = x.shape[:2]
    out_ext = spec.output_extents(x.shape[2:])
    k = int(np.prod(spec.kernel))
    xp = _pad5(x.data, spec.padding)
    m = n * int(np.prod(out_ext))

    cols = np.empty((c, k, n) + out_ext, dtype=x.dtype)
    for idx, (a, b, d) in enumerate(_offsets(spec.kernel)):
        cols[:, idx] = xp[_window(a, b, d, out_ext, spec.stride)].transpose(1, 0, 2, 3, 4)
    cols = cols.reshape(c * k, m)
    w2 = weight.data.reshape(spec.out_channels, c * k)
    out = w2 @ cols
    if spec.bias_enabled:
        out += bias.data[:, None]
    out = out.reshape((spec.out_channels, n) + out_ext).transpose(1, 0, 2, 3, 4)
    out = np.ascontiguousarray(out)
    parents = (x, weight) + ((bias,) if spec.bias_enabled else ())

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3, 4).reshape(spec.out_channels, m)
        gw = (g2 @ cols.T).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape((c, k, n) + out_ext)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for idx, (a, b, d) in enumerate(_offsets(spec.kernel)):
                gxp[_window(a, b, d, out_ext, spec.stride)] += gcols[:, idx].transpose(1, 0, 2, 3, 4)
            pt, ph, pw = spec.padding
            gx = gxp[:, :, pt : pt + x.shape[2], ph : ph + x.shape[3], pw : pw + x.shape[4]]
        grads = [gx, gw]
        if spec.bias_enabled:
            grads.append(g2.sum(axis=1))
        return grads

    return make_result(out, parents, backward)


def maxpool3d(x: Tensor, kernel, stride, padding=(0, 0, 0)) -> Tensor:
    """Max pooling; gradient goes to the first maximal cell in scan order."""
    kernel, stride, padding = _triple(kernel), _triple(stride), _triple(padding)
    if x.ndim != 5:
        raise ValueError(f"maxpool3d expects N x C x T x H x W input, got shape {x.shape}")
    out_ext = pooled_extents(x.shape[2:], kernel, stride, padding)
    xp = _pad5(x.data, padding, value=-np.inf)
    best = None
    arg = None
    for idx, (a, b, d) in enumerate(_offsets(kernel)):
        view = xp[_window(a, b, d, out_ext, stride)]
        if best is None:
            best = view.copy()
            arg = np.zeros(best.shape, dtype=np.int32)
        else:
            better = view > best
            best[better] = view[better]
            arg[better] = idx
    if not np.all(np.isfinite(best)):
        raise NonFiniteError("max-pool window covers only padding")

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for idx, (a, b, d) in enumerate(_offsets(kernel)):
            gxp[_window(a, b, d, out_ext, stride)] += g * (arg == idx)
        pt, ph, pw = padding
        return (gxp[:, :, pt : pt + x.shape[2], ph : ph + x.shape[3], pw : pw + x.shape[4]],)

    return make_result(best, (x,), backward)


@dataclass
class BatchNormState:
    """Learned affine plus running statistics for one normalization site."""

    feature_count: int
    gamma: Tensor = None
    beta: Tensor = None
    running_mean: np.ndarray = None
    running_var: np.ndarray = None
    momentum: float = 0.1
    epsilon: float = 1e-5
    mode: str = "train"
    dtype: np.dtype = field(default=np.float32, repr=False)

    def __post_init__(self):
        f = self.feature_count
        if self.gamma is None:
            self.gamma = Tensor(np.ones(f, dtype=self.dtype), requires_grad=True)
        if self.beta is None:
            self.beta = Tensor(np.zeros(f, dtype=self.dtype), requires_grad=True)
        if self.running_mean is None:
            self.running_mean = np.zeros(f, dtype=np.float64)
        if self.running_var is None:
            self.running_var = np.ones(f, dtype=np.float64)
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


def batchnorm(x: Tensor, state: BatchNormState, feature_axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Per-feature normalization over every axis except ``feature_axis``.

    ``mask`` (shape of ``x`` without the feature axis) excludes padded
    positions from the batch statistics; their outputs are still computed.
    """
    ax = feature_axis % x.ndim
    if x.shape[ax] != state.feature_count:
        raise ValueError(f"feature axis {ax} has extent {x.shape[ax]}, expected {state.feature_count}")
    bshape = [1] * x.ndim
    bshape[ax] = state.feature_count
    red = tuple(i for i in range(x.ndim) if i != ax)
    gamma = state.gamma.data.reshape(bshape)
    beta = state.beta.data.reshape(bshape)

    if state.mode == "eval":
        mean = state.running_mean.astype(x.dtype).reshape(bshape)
        inv = (1.0 / np.sqrt(state.running_var + state.epsilon)).astype(x.dtype).reshape(bshape)
        xhat = (x.data - mean) * inv
        out = xhat * gamma + beta

        def backward_eval(g):
            return (g * gamma * inv, (g * xhat).sum(axis=red), g.sum(axis=red))

        return make_result(out, (x, state.gamma, state.beta), backward_eval)

    if mask is None:
        w = None
        count = x.data.size // state.feature_count
    else:
        w = np.expand_dims(mask.astype(x.dtype), ax)
        count = int(mask.sum())
    if count < 2:
        raise ValueError("batch normalization in train mode needs at least 2 positions per feature")
    xs = x.data if w is None else x.data * w
    mean = xs.sum(axis=red, keepdims=True) / count
    centred = x.data - mean
    sq = centred * centred if w is None else centred * centred * w
    var = sq.sum(axis=red, keepdims=True) / count
    inv = 1.0 / np.sqrt(var + state.epsilon)
    xhat = centred * inv
    out = xhat * gamma + beta

    m = state.momentum
    unbiased = var.reshape(-1).astype(np.float64) * count / (count - 1)
    state.running_mean = (1 - m) * state.running_mean + m * mean.reshape(-1).astype(np.float64)
    state.running_var = (1 - m) * state.running_var + m * unbiased

    def backward(g):
        # padded outputs still depend on the statistics of the valid positions,
        # so their gradient flows back into the valid inputs
        gbeta = g.sum(axis=red)
        ggamma = (g * xhat).sum(axis=red)
        gxhat = g * gamma
        mean_g = gxhat.sum(axis=red, keepdims=True) / count
        mean_gx = (gxhat * xhat).sum(axis=red, keepdims=True) / count
        through_stats = mean_g + xhat * mean_gx
        if w is not None:
            through_stats = through_stats * w
        return (inv * (gxhat - through_stats), ggamma, gbeta)

    return make_result(out, (x, state.gamma, state.beta), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map on the trailing axis: ``x @ weight.T + bias``."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"trailing extent {x.shape[-1]} != weight input extent {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"bias shape {bias.shape} != ({weight.shape[0]},)")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (weight.shape[0],))

    def backward(g):
        g2 = g.reshape(-1, weight.shape[0])
        grads = [(g2 @ weight.data).reshape(x.shape), g2.T @ x2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits: Tensor, labels) -> tuple[Tensor, np.ndarray]:
    """Mean negative log posterior of ``labels``; also returns the posteriors."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"expected N x K logits and N labels, got {logits.shape} and {labels.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    check_finite(logits.data, "logits")
    logp = log_softmax(logits.data)
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    post = np.exp(logp)

    def backward(g):
        d = post.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (g / n),)

    return make_result(np.asarray(loss, dtype=logits.dtype), (logits,), backward), post


def dropout_shared_mask(
    seq: Tensor, p: float, rng: np.random.Generator | None, mode: str = "train"
) -> Tensor:
    """Dropout with one feature mask per sequence, reused at every time step.

    ``seq`` is T x D (one sequence) or N x T x D (one mask per batch row).
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must satisfy 0 <= p < 1, got {p}")
    if mode == "eval" or p == 0.0:
        return seq
    if rng is None:
        raise ValueError("train-mode dropout needs a random generator")
    if seq.ndim == 2:
        mask_shape = (1, seq.shape[1])
    elif seq.ndim == 3:
        mask_shape = (seq.shape[0], 1, seq.shape[2])
    else:
        raise ValueError(f"expected T x D or N x T x D, got {seq.shape}")
    keep = (rng.random(mask_shape) >= p).astype(seq.dtype) / (1.0 - p)
    return seq * Tensor(keep)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, mode: str = "train") -> Tensor:
    """Elementwise inverted dropout."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must satisfy 0 <= p < 1, got {p}")
    if mode == "eval" or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return x * Tensor(keep)
