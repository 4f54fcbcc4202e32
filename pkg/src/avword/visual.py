"""ResNet frontend with a spatiotemporal stem and a fully connected head."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .nn import BatchNorm, Conv3d, Linear, Module
from .tensor import ConvSpec, Tensor, maxpool3d, relu
from .tensor.ops import pooled_extents

STAGE_BLOCKS = {18: (2, 2, 2, 2), 34: (3, 4, 6, 3)}
MIN_SPATIAL = 32


@dataclass
class ResNetConfig:
    depth: int = 18
    input_spatial: int = 32
    stem_temporal_kernel: int = 5
    stem_mode: str = "3d"
    feature_dim: int = 256
    block_plan: tuple[int, int, int, int] = (64, 128, 256, 512)
    head: str = "fc"

    def __post_init__(self):
        self.block_plan = tuple(int(c) for c in self.block_plan)
        self.stem_mode = self.stem_mode.lower()
        if self.depth not in STAGE_BLOCKS:
            raise ValueError(f"depth must be 18 or 34, got {self.depth}")
        if self.stem_mode not in ("3d", "2d"):
            raise ValueError(f"stem_mode must be '3d' or '2d', got {self.stem_mode!r}")
        if self.head not in ("fc", "avgpool"):
            raise ValueError(f"head must be 'fc' or 'avgpool', got {self.head!r}")
        if len(self.block_plan) != 4:
            raise ValueError("block_plan lists the channel count of each of the 4 stages")
        if self.stem_temporal_kernel < 1 or self.stem_temporal_kernel % 2 == 0:
            raise ValueError("stem temporal kernel must be odd so time is preserved")
        check_spatial(self.input_spatial)

    @property
    def stage_blocks(self) -> tuple[int, ...]:
        return STAGE_BLOCKS[self.depth]

    @property
    def temporal_kernel(self) -> int:
        return 1 if self.stem_mode == "2d" else self.stem_temporal_kernel

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_plan"] = list(self.block_plan)
        return d


def check_spatial(spatial: int) -> None:
    if spatial % 4 != 0 or spatial < MIN_SPATIAL:
        raise ValueError(
            f"input spatial size {spatial} is not legal: it must be a multiple of 4 and at least "
            f"{MIN_SPATIAL} (minimum legal size {MIN_SPATIAL})"
        )


def _stem_specs(cfg: ResNetConfig) -> tuple[ConvSpec, tuple, tuple, tuple]:
    kt = cfg.temporal_kernel
    conv = ConvSpec(cfg.block_plan[0], 1, (kt, 7, 7), (1, 2, 2), (kt // 2, 3, 3), bias_enabled=False)
    return conv, (1, 3, 3), (1, 2, 2), (0, 1, 1)


def shape_chain_report(cfg: ResNetConfig, spatial: int | None = None) -> list[tuple[int, ...]]:
    """Per-frame tensor shapes (channels x height x width) through the frontend.

    Entries: input, stage 1..4 outputs, flattened head input, feature output.
    Computed from the layer geometry alone.
    """
    spatial = cfg.input_spatial if spatial is None else spatial
    check_spatial(spatial)
    conv, pk, ps, pp = _stem_specs(cfg)
    _, h, w = conv.output_extents((1, spatial, spatial))
    _, h, w = pooled_extents((1, h, w), pk, ps, pp)
    chain: list[tuple[int, ...]] = [(1, spatial, spatial)]
    for stage, channels in enumerate(cfg.block_plan):
        if stage > 0:
            _, h, w = pooled_extents((1, h, w), (1, 3, 3), (1, 2, 2), (0, 1, 1))
        chain.append((channels, h, w))
    last = cfg.block_plan[-1]
    chain.append((last * h * w,) if cfg.head == "fc" else (last,))
    chain.append((cfg.feature_dim,))
    return chain


class BasicBlock(Module):
    """Two 3x3 convolutions (temporal extent 1) with an additive shortcut."""

    def __init__(self, in_ch: int, out_ch: int, stride: int, rng, dtype=np.float32):
        self.conv1 = Conv3d(ConvSpec(out_ch, in_ch, (1, 3, 3), (1, stride, stride), (0, 1, 1), False), rng, dtype)
        self.bn1 = BatchNorm(out_ch, feature_axis=1, dtype=dtype)
        self.conv2 = Conv3d(ConvSpec(out_ch, out_ch, (1, 3, 3), (1, 1, 1), (0, 1, 1), False), rng, dtype)
        self.bn2 = BatchNorm(out_ch, feature_axis=1, dtype=dtype)
        if stride != 1 or in_ch != out_ch:
            self.proj = Conv3d(ConvSpec(out_ch, in_ch, (1, 1, 1), (1, stride, stride), (0, 0, 0), False), rng, dtype)
            self.proj_bn = BatchNorm(out_ch, feature_axis=1, dtype=dtype)
        else:
            self.proj = None

    def __call__(self, x: Tensor) -> Tensor:
        y = relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        shortcut = x if self.proj is None else self.proj_bn(self.proj(x))
        return relu(y + shortcut)


class Stem(Module):
    def __init__(self, cfg: ResNetConfig, rng, dtype=np.float32):
        spec, self.pool_kernel, self.pool_stride, self.pool_padding = _stem_specs(cfg)
        self.conv = Conv3d(spec, rng, dtype)
        self.bn = BatchNorm(spec.out_channels, feature_axis=1, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        y = relu(self.bn(self.conv(x)))
        return maxpool3d(y, self.pool_kernel, self.pool_stride, self.pool_padding)


class Stage(Module):
    def __init__(self, in_ch: int, out_ch: int, blocks: int, stride: int, rng, dtype=np.float32):
        self.count = blocks
        for i in range(1, blocks + 1):
            setattr(self, f"block{i}", BasicBlock(in_ch if i == 1 else out_ch, out_ch, stride if i == 1 else 1, rng, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        for i in range(1, self.count + 1):
            x = getattr(self, f"block{i}")(x)
        return x


class VisualFrontend(Module):
    """Maps N x 1 x T x H x W frames to N x T x feature_dim features."""

    def __init__(self, cfg: ResNetConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = cfg
        self.stem = Stem(cfg, rng, dtype)
        in_ch = cfg.block_plan[0]
        for idx, (out_ch, blocks) in enumerate(zip(cfg.block_plan, cfg.stage_blocks), start=1):
            setattr(self, f"stage{idx}", Stage(in_ch, out_ch, blocks, 1 if idx == 1 else 2, rng, dtype))
            in_ch = out_ch
        chain = shape_chain_report(cfg)
        self.fc = Linear(chain[-2][0], cfg.feature_dim, rng, dtype=dtype)

    @property
    def stages(self) -> list[Stage]:
        return [self.stage1, self.stage2, self.stage3, self.stage4]

    def __call__(self, frames: Tensor) -> Tensor:
        return visual_forward(self, frames)


def build_resnet(cfg: ResNetConfig, rng: np.random.Generator, dtype=np.float32) -> VisualFrontend:
    return VisualFrontend(cfg, rng, dtype)


def visual_forward(net: VisualFrontend, frames: Tensor, mode: str | None = None) -> Tensor:
    if mode is not None:
        net.train() if mode == "train" else net.eval()
    if frames.ndim != 5 or frames.shape[1] != 1:
        raise ValueError(f"expected N x 1 x T x H x W grayscale frames, got shape {frames.shape}")
    n, _, t_len, h, w = frames.shape
    if h != net.config.input_spatial or w != net.config.input_spatial:
        raise ValueError(f"frames are {h}x{w}, network built for {net.config.input_spatial}")
    x = net.stem(frames)
    for stage in net.stages:
        x = stage(x)
    c, _, fh, fw = x.shape[1:]
    x = x.transpose(0, 2, 1, 3, 4)
    if net.config.head == "fc":
        x = x.reshape(n, t_len, c * fh * fw)
    else:
        x = x.reshape(n, t_len, c, fh * fw).mean(axis=3)
    return net.fc(x)


def normalize_video(frames: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance over every pixel of each video.

    T x H x W and T x 1 x H x W arrays are one video; 5-D arrays carry a
    leading batch axis. Returns float32.
    """
    x = np.asarray(frames, dtype=np.float64)
    axes = tuple(range(1, x.ndim)) if x.ndim == 5 else None
    mean = x.mean(axis=axes, keepdims=True)
    std = x.std(axis=axes, keepdims=True)
    return ((x - mean) / np.maximum(std, 1e-8)).astype(np.float32)
