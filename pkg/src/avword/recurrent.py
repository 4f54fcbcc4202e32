"""LSTM cells, directional runners and pyramidal frame-rate reduction.

Batched sequences are N x T x D tensors plus an integer ``lengths`` array.
Valid frames always occupy the leading ``lengths[n]`` rows; the backward
direction reverses each sequence inside its own length, so padding never
leaks into valid outputs and recurrences need no masking.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import BatchNorm, Module
from .tensor import (
    Tensor,
    concat,
    dropout_shared_mask,
    gather_rows,
    linear,
    sigmoid,
    tanh,
)
from .tensor.core import _sigmoid, make_result

GATES = ("input", "forget", "cell", "output")


class LstmCell(Module):
    """LSTM without peepholes. Gate blocks are stacked as (i, f, g, o)."""

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator, dtype=np.float32):
        self.input_size = input_size
        self.hidden_size = hidden_size
        bound = 1.0 / np.sqrt(hidden_size)
        h4 = 4 * hidden_size
        self.W = Tensor(rng.uniform(-bound, bound, (h4, input_size)).astype(dtype), requires_grad=True)
        self.U = Tensor(rng.uniform(-bound, bound, (h4, hidden_size)).astype(dtype), requires_grad=True)
        b = np.zeros(h4, dtype=dtype)
        b[hidden_size : 2 * hidden_size] = 1.0
        self.b = Tensor(b, requires_grad=True)


@dataclass
class LstmState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, hidden_size: int, batch: int | None = None, dtype=np.float32) -> "LstmState":
        shape = (hidden_size,) if batch is None else (batch, hidden_size)
        return cls(Tensor(np.zeros(shape, dtype=dtype)), Tensor(np.zeros(shape, dtype=dtype)))


def lstm_step(cell: LstmCell, state: LstmState, x: Tensor) -> LstmState:
    """One time step built from primitive differentiable ops."""
    if x.shape[-1] != cell.input_size:
        raise ValueError(f"input has {x.shape[-1]} features, cell expects {cell.input_size}")
    if state.h.shape[-1] != cell.hidden_size or state.c.shape[-1] != cell.hidden_size:
        raise ValueError("state size does not match the cell hidden size")
    hs = cell.hidden_size
    z = linear(x, cell.W, cell.b) + linear(state.h, cell.U)
    i = sigmoid(z[..., 0:hs])
    f = sigmoid(z[..., hs : 2 * hs])
    g = tanh(z[..., 2 * hs : 3 * hs])
    o = sigmoid(z[..., 3 * hs : 4 * hs])
    c = f * state.c + i * g
    h = o * tanh(c)
    return LstmState(h, c)


def lstm_recurrence(xproj: Tensor, U: Tensor) -> Tensor:
    """Run the gate recurrence over N x T x 4H input projections from zero state.

    Returns the N x T x H hidden sequence. Backpropagation through time is
    hand-written; it is checked against finite differences and against
    :func:`lstm_step` unrolled.
    """
    n, t_len, h4 = xproj.shape
    hs = h4 // 4
    dt = xproj.dtype
    xp = xproj.data
    Ud = U.data
    gates = np.empty((t_len, n, h4), dtype=dt)
    cells = np.empty((t_len + 1, n, hs), dtype=dt)
    hidden = np.empty((t_len + 1, n, hs), dtype=dt)
    cells[0] = 0.0
    hidden[0] = 0.0
    for t in range(t_len):
        z = xp[:, t] + hidden[t] @ Ud.T
        act = gates[t]
        act[:, : 2 * hs] = _sigmoid(z[:, : 2 * hs])
        act[:, 2 * hs : 3 * hs] = np.tanh(z[:, 2 * hs : 3 * hs])
        act[:, 3 * hs :] = _sigmoid(z[:, 3 * hs :])
        cells[t + 1] = act[:, hs : 2 * hs] * cells[t] + act[:, :hs] * act[:, 2 * hs : 3 * hs]
        hidden[t + 1] = act[:, 3 * hs :] * np.tanh(cells[t + 1])
    out = np.ascontiguousarray(hidden[1:].transpose(1, 0, 2))

    def backward(gout):
        gx = np.empty_like(xp)
        gU = np.zeros_like(Ud)
        dh_next = np.zeros((n, hs), dtype=dt)
        dc_next = np.zeros((n, hs), dtype=dt)
        dz = np.empty((n, h4), dtype=dt)
        for t in range(t_len - 1, -1, -1):
            act = gates[t]
            i, f, g, o = act[:, :hs], act[:, hs : 2 * hs], act[:, 2 * hs : 3 * hs], act[:, 3 * hs :]
            tc = np.tanh(cells[t + 1])
            dh = gout[:, t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dz[:, :hs] = dc * g * i * (1.0 - i)
            dz[:, hs : 2 * hs] = dc * cells[t] * f * (1.0 - f)
            dz[:, 2 * hs : 3 * hs] = dc * i * (1.0 - g * g)
            dz[:, 3 * hs :] = dh * tc * o * (1.0 - o)
            gx[:, t] = dz
            gU += dz.T @ hidden[t]
            dh_next = dz @ Ud
            dc_next = dc * f
        return (gx, gU)

    return make_result(out, (xproj, U), backward)


def lstm_sequence(cell: LstmCell, x: Tensor) -> Tensor:
    """Apply ``cell`` to every step of an N x T x D batch from zero state."""
    if x.shape[-1] != cell.input_size:
        raise ValueError(f"input has {x.shape[-1]} features, cell expects {cell.input_size}")
    return lstm_recurrence(linear(x, cell.W, cell.b), cell.U)


# -- sequence plumbing -----------------------------------------------------

def valid_mask(lengths: np.ndarray, t_len: int) -> np.ndarray:
    return np.arange(t_len)[None, :] < np.asarray(lengths)[:, None]


def reverse_within_length(x: Tensor, lengths: np.ndarray) -> Tensor:
    """Reverse each row's first ``lengths[n]`` frames; padding stays in place."""
    n, t_len = x.shape[:2]
    t = np.arange(t_len)[None, :]
    lengths = np.asarray(lengths)[:, None]
    index = np.where(t < lengths, lengths - 1 - t, t)
    return gather_rows(x, index)


def pyramidal_pair_concat(seq: Tensor) -> Tensor:
    """Row t of the output is ``[row 2t | row 2t+1]``; an odd final row is dropped."""
    batched = seq.ndim == 3
    t_len = seq.shape[-2]
    if t_len < 2:
        raise ValueError(f"pyramidal reduction needs at least 2 frames, got {t_len}")
    half = t_len // 2
    width = seq.shape[-1]
    if batched:
        return seq[:, : 2 * half].reshape(seq.shape[0], half, 2 * width)
    return seq[: 2 * half].reshape(half, 2 * width)


def subsample_even(seq: Tensor) -> Tensor:
    """Keep frames 0, 2, 4, ...; same output length rule as the pair concat."""
    t_len = seq.shape[-2]
    if t_len < 2:
        raise ValueError(f"subsampling needs at least 2 frames, got {t_len}")
    half = t_len // 2
    if seq.ndim == 3:
        return seq[:, 0 : 2 * half : 2]
    return seq[0 : 2 * half : 2]


def bidirectional_concat(fwd: Tensor, bwd: Tensor) -> Tensor:
    """Join forward and (already re-reversed) backward outputs on the feature axis."""
    if fwd.shape != bwd.shape:
        raise ValueError(f"direction outputs differ in shape: {fwd.shape} vs {bwd.shape}")
    return concat([fwd, bwd], axis=-1)


# -- directional stacks ----------------------------------------------------

class DirectionalStack(Module):
    """One direction of a concat-at-end bidirectional network.

    ``pyramidal_flags[l]`` marks layers whose output is halved in frame rate
    before feeding layer ``l + 1`` (pair concat, or even-frame subsampling
    when ``reduce_mode == "even"``).
    """

    def __init__(
        self,
        direction: str,
        input_size: int,
        hidden_sizes: list[int],
        rng: np.random.Generator,
        pyramidal_flags: list[bool] | None = None,
        input_dropout_p: list[float] | float = 0.0,
        input_bn: bool = False,
        reduce_mode: str = "concat",
        dtype=np.float32,
    ):
        if direction not in ("forward", "backward"):
            raise ValueError(f"direction must be forward or backward, got {direction!r}")
        if reduce_mode not in ("concat", "even"):
            raise ValueError(f"unknown reduce mode {reduce_mode!r}")
        count = len(hidden_sizes)
        self.direction = direction
        self.pyramidal_flags = list(pyramidal_flags or [False] * count)
        if len(self.pyramidal_flags) != count:
            raise ValueError("one pyramidal flag per layer required")
        if isinstance(input_dropout_p, (int, float)):
            input_dropout_p = [float(input_dropout_p)] * count
        self.input_dropout_p = list(input_dropout_p)
        self.reduce_mode = reduce_mode
        self.input_bn = input_bn
        self.input_size = input_size
        self.hidden_sizes = list(hidden_sizes)
        width = input_size
        for idx, hs in enumerate(hidden_sizes, start=1):
            if input_bn:
                setattr(self, f"bn{idx}", BatchNorm(width, feature_axis=-1, dtype=dtype))
            setattr(self, f"lstm{idx}", LstmCell(width, hs, rng, dtype=dtype))
            width = hs
            if self.pyramidal_flags[idx - 1] and reduce_mode == "concat":
                width = 2 * hs
        self.output_size = width

    @property
    def layers(self) -> list[LstmCell]:
        return [getattr(self, f"lstm{i}") for i in range(1, len(self.hidden_sizes) + 1)]

    @property
    def reduction(self) -> int:
        return 2 ** sum(self.pyramidal_flags)


def run_direction(
    stack: DirectionalStack,
    seq: Tensor,
    rng: np.random.Generator | None = None,
    mode: str = "eval",
    lengths: np.ndarray | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Run one directional stack over T x D or N x T x D input.

    Returns the output in input time order and the per-row output lengths.
    """
    single = seq.ndim == 2
    x = seq.reshape(1, *seq.shape) if single else seq
    n, t_len = x.shape[:2]
    lengths = np.full(n, t_len, dtype=np.int64) if lengths is None else np.asarray(lengths, dtype=np.int64)
    if lengths.min() < 1:
        raise ValueError("empty sequence in batch")
    final = lengths // stack.reduction
    if final.min() < 1:
        raise ValueError(
            f"sequence of length {int(lengths.min())} is too short for {sum(stack.pyramidal_flags)} pyramidal layers"
        )
    for idx, cell in enumerate(stack.layers, start=1):
        if stack.input_bn:
            x = getattr(stack, f"bn{idx}")(x, mask=valid_mask(lengths, x.shape[1]))
        x = dropout_shared_mask(x, stack.input_dropout_p[idx - 1], rng, mode)
        if stack.direction == "backward":
            x = reverse_within_length(lstm_sequence(cell, reverse_within_length(x, lengths)), lengths)
        else:
            x = lstm_sequence(cell, x)
        if stack.pyramidal_flags[idx - 1]:
            x = pyramidal_pair_concat(x) if stack.reduce_mode == "concat" else subsample_even(x)
            lengths = lengths // 2
    if single:
        x = x.reshape(x.shape[1], x.shape[2])
    return x, lengths
