"""Central-difference gradient oracle."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import Tensor


class NondeterministicOpError(RuntimeError):
    pass


def _scalarize(out: Tensor, projection: np.ndarray | None) -> Tensor:
    if out.data.size == 1:
        return out.reshape(())
    return (out * Tensor(projection)).sum()


def finite_diff_check(
    op: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``op`` maps the input tensors to an output tensor. Non-scalar outputs are
    contracted with a fixed random projection so every output element carries
    weight. The relative error of each element is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("gradient checks require float64 inputs")
    first = op(*inputs)
    second = op(*inputs)
    if not np.array_equal(first.data, second.data):
        raise NondeterministicOpError("op output differs between identical calls")
    projection = None
    if first.data.size != 1:
        projection = np.random.default_rng(seed).standard_normal(first.shape)

    for t in inputs:
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
    loss = _scalarize(op(*inputs), projection)
    loss.backward()
    analytic = [t.grad.copy() for t in inputs]

    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        num = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            plus = _scalarize(op(*inputs), projection).item()
            flat[i] = orig - step
            minus = _scalarize(op(*inputs), projection).item()
            flat[i] = orig
            num[i] = (plus - minus) / (2.0 * step)
        a = a.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), 1e-8)
        if flat.size:
            worst = max(worst, float(np.max(np.abs(a - num) / denom)))
    return worst
