"""Minimal parameter containers shared by the network builders."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import BatchNormState, ConvSpec, Tensor, batchnorm, conv3d, linear


class Module:
    """Named-parameter tree with a train/eval switch.

    Child modules, parameters and buffers are discovered from instance
    attributes in assignment order, which fixes checkpoint naming.
    """

    mode = "train"

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, "BatchNorm"]]:
        for key, value in vars(self).items():
            if isinstance(value, BatchNorm):
                yield f"{prefix}{key}", value
            elif isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{key}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self) -> "Module":
        for m in self.modules():
            m.mode = "train"
            if isinstance(m, BatchNorm):
                m.state.mode = "train"
        return self

    def eval(self) -> "Module":
        for m in self.modules():
            m.mode = "eval"
            if isinstance(m, BatchNorm):
                m.state.mode = "eval"
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, bn in self.named_buffers():
            out[f"{name}.running_mean"] = bn.state.running_mean.copy()
            out[f"{name}.running_var"] = bn.state.running_var.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | {f"{b}.running_{s}" for b in buffers for s in ("mean", "var")}
        missing = expected - set(state)
        unexpected = set(state) - expected
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(unexpected)[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype).copy()
            p.zero_grad()
        for name, bn in buffers.items():
            bn.state.running_mean = np.asarray(state[f"{name}.running_mean"], dtype=np.float64).copy()
            bn.state.running_var = np.asarray(state[f"{name}.running_var"], dtype=np.float64).copy()

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.zero_grad()
        return self


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True, dtype=np.float32):
        self.weight = uniform_fan_in(rng, (out_features, in_features), in_features, dtype)
        if bias:
            self.bias = uniform_fan_in(rng, (out_features,), in_features, dtype)
        else:
            self.bias = None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class Conv3d(Module):
    def __init__(self, spec: ConvSpec, rng: np.random.Generator, dtype=np.float32):
        self.spec = spec
        fan_in = spec.in_channels * int(np.prod(spec.kernel))
        self.weight = uniform_fan_in(rng, spec.weight_shape, fan_in, dtype)
        self.bias = uniform_fan_in(rng, (spec.out_channels,), fan_in, dtype) if spec.bias_enabled else None

    def __call__(self, x: Tensor) -> Tensor:
        return conv3d(x, self.spec, self.weight, self.bias)


class BatchNorm(Module):
    def __init__(self, features: int, feature_axis: int = -1, dtype=np.float32):
        self.state = BatchNormState(features, dtype=dtype)
        self.gamma = self.state.gamma
        self.beta = self.state.beta
        self.feature_axis = feature_axis

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        # gamma/beta may have been swapped by load_state_dict or astype
        self.state.gamma = self.gamma
        self.state.beta = self.beta
        return batchnorm(x, self.state, self.feature_axis, mask)
