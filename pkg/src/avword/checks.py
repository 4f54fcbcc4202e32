"""Self-checks runnable without a dataset: gradient oracle suite and shape chains."""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from .backend import BiLstmBackend, BiLstmBackendConfig, bilstm_backend_logits, tconv_shape_chain
from .recurrent import LstmCell, LstmState, lstm_step
from .tensor import (
    BatchNormState,
    ConvSpec,
    Tensor,
    batchnorm,
    conv3d,
    finite_diff_check,
    linear,
    maxpool3d,
    no_grad,
    softmax_cross_entropy,
)
from .visual import ResNetConfig, VisualFrontend, shape_chain_report, visual_forward

GRAD_TOLERANCE = 1e-4

VISUAL_CHAIN = [(1, 112, 112), (64, 28, 28), (128, 14, 14), (256, 7, 7), (512, 4, 4), (8192,), (256,)]
BACKEND_CHAIN = [(29, 256), (7, 512), (1, 1024), (256,), (500,)]


def _separated(rng: np.random.Generator, shape, gap: float = 0.05) -> Tensor:
    """Distinct values at least ``gap`` apart, so max-pool winners are stable under the probe step."""
    n = int(np.prod(shape))
    values = (rng.permutation(n) - n / 2) * gap + rng.uniform(0, gap / 10, n)
    return Tensor(values.reshape(shape))


def _case_conv3d(rng):
    spec = ConvSpec(2, 2, (2, 3, 3), (1, 2, 1), (1, 1, 0))
    x = Tensor(rng.standard_normal((1, 2, 3, 5, 4)))
    w = Tensor(rng.standard_normal(spec.weight_shape))
    b = Tensor(rng.standard_normal(2))
    return (lambda x, w, b: conv3d(x, spec, w, b)), [x, w, b]


def _case_maxpool3d(rng):
    x = _separated(rng, (1, 2, 3, 5, 5))
    return (lambda x: maxpool3d(x, (1, 3, 3), (1, 2, 2), (0, 1, 1))), [x]


def _case_batchnorm(rng):
    state = BatchNormState(3, dtype=np.float64)
    state.gamma.data[:] = rng.uniform(0.5, 1.5, 3)
    state.beta.data[:] = rng.standard_normal(3)
    x = Tensor(rng.standard_normal((4, 5, 3)))
    mask = np.ones((4, 5), dtype=bool)
    mask[1, 3:] = False
    return (lambda x, g, b: batchnorm(x, state, -1, mask)), [x, state.gamma, state.beta]


def _case_linear(rng):
    x, w, b = (Tensor(rng.standard_normal(s)) for s in [(3, 4), (5, 4), (5,)])
    return (lambda x, w, b: linear(x, w, b)), [x, w, b]


def _case_softmax_ce(rng):
    logits = Tensor(rng.standard_normal((4, 6)) * 2)
    labels = rng.integers(0, 6, 4)
    return (lambda z: softmax_cross_entropy(z, labels)[0]), [logits]


def _case_lstm_step(rng):
    cell = LstmCell(3, 4, rng, dtype=np.float64)
    x, h0, c0 = (Tensor(rng.standard_normal(s)) for s in [(2, 3), (2, 4), (2, 4)])

    def op(x, h0, c0, *_):
        s = lstm_step(cell, LstmState(h0, c0), x)
        return s.h * 1.0 + s.c * 0.5

    return op, [x, h0, c0, cell.W, cell.U, cell.b]


def _case_bilstm_backend(rng):
    cfg = BiLstmBackendConfig(layers=2, hidden_size=3, dropout=False)
    be = BiLstmBackend(cfg, 3, 4, rng, dtype=np.float64)
    be.train()
    x = Tensor(rng.standard_normal((3, 5, 3)))
    lengths = np.array([5, 4, 5])
    labels = rng.integers(0, 4, 3)

    def op(x, *_):
        return softmax_cross_entropy(bilstm_backend_logits(be, x, x, lengths, mode="train"), labels)[0]

    return op, [x] + be.parameters()


GRAD_CASES: dict[str, Callable] = {
    "conv3d": _case_conv3d,
    "maxpool3d": _case_maxpool3d,
    "batchnorm": _case_batchnorm,
    "linear": _case_linear,
    "softmax_ce": _case_softmax_ce,
    "lstm_step": _case_lstm_step,
    "bilstm_backend": _case_bilstm_backend,
}


def gradient_suite(seeds: int = 20, cases=None) -> dict[str, list[float]]:
    """Max relative gradient error per case and seed (float64 throughout)."""
    out = {}
    for name in cases or GRAD_CASES:
        errors = []
        for seed in range(seeds):
            op, inputs = GRAD_CASES[name](np.random.default_rng([seed, 17]))
            errors.append(finite_diff_check(op, inputs, seed=seed))
        out[name] = errors
    return out


def shape_chains() -> dict[str, list[tuple[int, ...]]]:
    """Protocol-size chains: frontend per frame (T=29 kept) and temporal-conv backend."""
    return {
        "visual": shape_chain_report(ResNetConfig(), 112),
        "backend": tconv_shape_chain(29, 256, 256, 500),
    }


def full_size_forward(seed: int = 0) -> tuple[tuple[int, ...], float]:
    """One 29-frame 112x112 clip through the protocol-size frontend; returns (shape, seconds)."""
    rng = np.random.default_rng(seed)
    front = VisualFrontend(ResNetConfig(input_spatial=112), rng)
    front.eval()
    frames = Tensor(rng.uniform(0, 1, (1, 1, 29, 112, 112)).astype(np.float32))
    t0 = time.perf_counter()
    with no_grad():
        out = visual_forward(front, frames)
    return out.shape, time.perf_counter() - t0
