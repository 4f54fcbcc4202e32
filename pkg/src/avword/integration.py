"""End-to-end word networks, modality-dropout masks and late fusion."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .audio import AUDIO_PER_VIDEO_FRAME, N_BINS, AudioFrontend, AudioFrontendConfig, audio_frontend_forward
from .backend import (
    BiLstmBackend,
    BiLstmBackendConfig,
    BoundaryMode,
    TConvBackend,
    TConvBackendConfig,
    bilstm_backend_logits,
    boundary_augment_batch,
    indicator_matrix,
    tconv_backend_logits,
)
from .nn import Module
from .tensor import Tensor, concat, softmax
from .visual import ResNetConfig, VisualFrontend, visual_forward

log = logging.getLogger(__name__)

KINDS = ("visual", "audio", "audiovisual")
POSTERIOR_FLOOR = 1e-12


@dataclass
class MultimodalDropConfig:
    p_drop_audio: float = 0.25
    p_drop_video: float = 0.25
    p_drop_boundaries: float = 0.25
    coupled: bool = True

    def __post_init__(self):
        for name in ("p_drop_audio", "p_drop_video", "p_drop_boundaries"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if self.coupled and self.p_drop_audio + self.p_drop_video > 1.0:
            raise ValueError("coupled dropping needs p_drop_audio + p_drop_video <= 1")


@dataclass
class FusionConfig:
    gamma: float = 0.40

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")


@dataclass
class ModelSpec:
    kind: str = "visual"
    boundary_mode: str = "indicator"
    vocab_size: int = 500
    visual: ResNetConfig | None = None
    audio: AudioFrontendConfig | None = None
    backend_kind: str = "bilstm"
    backend: BiLstmBackendConfig = field(default_factory=BiLstmBackendConfig)
    tconv: TConvBackendConfig = field(default_factory=TConvBackendConfig)
    multimodal_drop: MultimodalDropConfig | None = None

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        BoundaryMode(self.boundary_mode)
        if self.vocab_size < 2:
            raise ValueError("vocabulary needs at least two words")
        if self.kind in ("visual", "audiovisual") and self.visual is None:
            raise ValueError(f"{self.kind} model requires a visual frontend config")
        if self.kind in ("audio", "audiovisual") and self.audio is None:
            raise ValueError(f"{self.kind} model requires an audio frontend config")
        if self.kind == "audiovisual" and self.audio.reduction != AUDIO_PER_VIDEO_FRAME:
            raise ValueError(
                f"frame-rate mismatch: audio frontend reduces 100 fps by {self.audio.reduction}, "
                f"video runs at 100/{AUDIO_PER_VIDEO_FRAME} fps"
            )
        if self.backend_kind not in ("bilstm", "tconv"):
            raise ValueError(f"backend_kind must be 'bilstm' or 'tconv', got {self.backend_kind!r}")
        if self.backend_kind == "tconv":
            if self.kind != "visual":
                raise ValueError("the temporal-convolution backend is only wired for visual-only models")
            if self.boundary_mode not in ("indicator", "unused"):
                raise ValueError("the temporal-convolution backend needs fixed-length input (indicator or unused)")
        if self.multimodal_drop is not None and self.kind != "audiovisual":
            raise ValueError("multimodal dropping only applies to audiovisual models")

    @property
    def indicator(self) -> bool:
        return self.boundary_mode == BoundaryMode.INDICATOR.value

    def backend_input_size(self) -> int:
        width = 0
        if self.kind in ("visual", "audiovisual"):
            width += self.visual.feature_dim
        if self.kind in ("audio", "audiovisual"):
            width += self.audio.output_size()
        if self.indicator and self.kind != "audio":
            width += 1
        return width

    def audio_input_size(self) -> int:
        return N_BINS + (1 if self.indicator and self.kind == "audio" else 0)


class WordNet(Module):
    """Frontend(s) plus backend; parameter names start with visual., audio. or backend."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator, dtype=np.float32):
        spec.validate()
        self.spec = spec
        if spec.kind in ("visual", "audiovisual"):
            self.visual = VisualFrontend(spec.visual, rng, dtype)
        if spec.kind in ("audio", "audiovisual"):
            self.audio = AudioFrontend(spec.audio, spec.audio_input_size(), rng, dtype)
        if spec.backend_kind == "tconv":
            self.backend = TConvBackend(spec.tconv, spec.backend_input_size(), spec.vocab_size, rng, dtype)
        else:
            self.backend = BiLstmBackend(spec.backend, spec.backend_input_size(), spec.vocab_size, rng, dtype)


def assemble_model(spec: ModelSpec, rng: np.random.Generator, dtype=np.float32) -> WordNet:
    return WordNet(spec, rng, dtype)


@dataclass
class Batch:
    """One minibatch. ``starts``/``ends`` are video-frame boundaries.

    ``visual_features`` (N x T x F) may replace ``frames`` to run the backend on
    stored frontend outputs.
    """

    labels: np.ndarray
    starts: np.ndarray
    ends: np.ndarray
    frames: np.ndarray | None = None
    spectra: np.ndarray | None = None
    visual_features: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.labels)


def multimodal_mask_sample(cfg: MultimodalDropConfig, rng: np.random.Generator, mode: str = "train") -> tuple[bool, bool, bool]:
    """Draw (use_audio, use_video, use_boundaries) for one training sample."""
    if mode != "train":
        raise RuntimeError("modality masks are only sampled in train mode")
    if cfg.coupled:
        u = rng.random()
        use_audio = not u < cfg.p_drop_audio
        use_video = not cfg.p_drop_audio <= u < cfg.p_drop_audio + cfg.p_drop_video
    else:
        use_audio = bool(rng.random() >= cfg.p_drop_audio)
        use_video = bool(rng.random() >= cfg.p_drop_video)
    use_boundaries = bool(rng.random() >= cfg.p_drop_boundaries)
    return use_audio, use_video, use_boundaries


def multimodal_masks(cfg: MultimodalDropConfig, rng: np.random.Generator, n: int, mode: str = "train") -> np.ndarray:
    """n x 3 float array of (audio, video, boundary) keep flags."""
    return np.array([multimodal_mask_sample(cfg, rng, mode) for _ in range(n)], dtype=np.float64).reshape(n, 3)


def _scale_rows(x: Tensor, keep: np.ndarray) -> Tensor:
    if np.all(keep == 1.0):
        return x
    return x * Tensor(keep.astype(x.dtype)[:, None, None])


def visual_features(net: WordNet, batch: Batch) -> Tensor:
    if batch.visual_features is not None:
        return Tensor(np.asarray(batch.visual_features, dtype=_dtype(net)))
    if batch.frames is None:
        raise ValueError("batch has neither frames nor stored visual features")
    return visual_forward(net.visual, Tensor(np.asarray(batch.frames, dtype=_dtype(net))))


def _dtype(net: WordNet):
    return net.backend.fc.weight.dtype if hasattr(net.backend, "fc") else net.backend.fc2.weight.dtype


def model_logits(
    net: WordNet,
    batch: Batch,
    rng: np.random.Generator | None = None,
    mode: str = "eval",
) -> Tensor:
    """N x V logits for a batch; ``mode`` also switches BN statistics."""
    spec = net.spec
    net.train() if mode == "train" else net.eval()
    mode_enum = BoundaryMode(spec.boundary_mode)
    n = len(batch)
    keep = np.ones((n, 3))
    if spec.multimodal_drop is not None and mode == "train":
        keep = multimodal_masks(spec.multimodal_drop, rng, n, mode)

    if spec.kind == "audio":
        spectra = Tensor(np.asarray(batch.spectra, dtype=_dtype(net)))
        t_a = spectra.shape[1]
        starts = np.asarray(batch.starts) * AUDIO_PER_VIDEO_FRAME
        ends = np.minimum(np.asarray(batch.ends) * AUDIO_PER_VIDEO_FRAME, t_a)
        x, lengths = boundary_augment_batch(spectra, starts, ends, mode_enum)
        fwd, bwd, lengths = audio_frontend_forward(net.audio, x, None, rng, mode, lengths)
        return bilstm_backend_logits(net.backend, fwd, bwd, lengths, rng, mode)

    vis = _scale_rows(visual_features(net, batch), keep[:, 1])
    t_v = vis.shape[1]
    fwd_parts, bwd_parts = [vis], [vis]
    if spec.kind == "audiovisual":
        spectra = Tensor(np.asarray(batch.spectra, dtype=_dtype(net)))
        a_fwd, a_bwd, a_len = audio_frontend_forward(net.audio, spectra, None, rng, mode)
        if a_fwd.shape[1] != t_v:
            raise ValueError(f"frame-rate mismatch: audio frontend gives {a_fwd.shape[1]} frames, video has {t_v}")
        fwd_parts.append(_scale_rows(a_fwd, keep[:, 0]))
        bwd_parts.append(_scale_rows(a_bwd, keep[:, 0]))
    if mode_enum is BoundaryMode.INDICATOR:
        b = indicator_matrix(batch.starts, batch.ends, t_v) * keep[:, 2:3]
        col = Tensor(b.astype(vis.dtype)[:, :, None])
        fwd_parts.append(col)
        bwd_parts.append(col)
    fwd_in = concat(fwd_parts, axis=-1) if len(fwd_parts) > 1 else vis
    bwd_in = concat(bwd_parts, axis=-1) if len(bwd_parts) > 1 else vis
    if spec.backend_kind == "tconv":
        return tconv_backend_logits(net.backend, fwd_in, mode)
    lengths = None
    if mode_enum in (BoundaryMode.REMOVE_INSIDE, BoundaryMode.REMOVE_OUTSIDE):
        fwd_in, lengths = boundary_augment_batch(fwd_in, batch.starts, batch.ends, mode_enum)
        bwd_in, _ = boundary_augment_batch(bwd_in, batch.starts, batch.ends, mode_enum)
    return bilstm_backend_logits(net.backend, fwd_in, bwd_in, lengths, rng, mode)


def predict_posteriors(net: WordNet, batch: Batch) -> np.ndarray:
    return softmax(model_logits(net, batch, None, "eval").data.astype(np.float64))


def fused_log_scores(p_v: np.ndarray, p_a: np.ndarray, gamma: float) -> np.ndarray:
    """gamma log p_v + (1 - gamma) log p_a with floored inputs; inputs need not be normalized."""
    p_v = np.asarray(p_v, dtype=np.float64)
    p_a = np.asarray(p_a, dtype=np.float64)
    if p_v.shape != p_a.shape:
        raise ValueError(f"posterior shapes differ: {p_v.shape} vs {p_a.shape}")
    for name, p in (("visual", p_v), ("audio", p_a)):
        if np.any(p < POSTERIOR_FLOOR):
            log.warning("%s posterior has cells below %g; flooring before the log", name, POSTERIOR_FLOOR)
    return gamma * np.log(np.maximum(p_v, POSTERIOR_FLOOR)) + (1.0 - gamma) * np.log(np.maximum(p_a, POSTERIOR_FLOOR))


def late_fuse(p_v: np.ndarray, p_a: np.ndarray, cfg: FusionConfig | float = FusionConfig()) -> np.ndarray:
    """Weighted geometric mean p_v^gamma * p_a^(1-gamma), renormalized over the last axis."""
    gamma = cfg.gamma if isinstance(cfg, FusionConfig) else float(cfg)
    FusionConfig(gamma)
    for name, p in (("visual", p_v), ("audio", p_a)):
        p = np.asarray(p)
        if np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6) or np.any(p < 0):
            raise ValueError(f"{name} posteriors must be non-negative and sum to 1")
    score = fused_log_scores(p_v, p_a, gamma)
    score -= score.max(axis=-1, keepdims=True)
    out = np.exp(score)
    return out / out.sum(axis=-1, keepdims=True)


def decide(posteriors: np.ndarray) -> np.ndarray:
    """Argmax over the last axis; ties go to the lowest index."""
    return np.argmax(posteriors, axis=-1)
