"""Word-boundary conditioning and the two word-classification backends."""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass

import numpy as np

from .nn import BatchNorm, Conv3d, Linear, Module
from .recurrent import DirectionalStack, bidirectional_concat, run_direction, valid_mask
from .tensor import ConvSpec, Tensor, concat, dropout, gather_rows, maxpool3d, relu, softmax


class BoundaryMode(str, enum.Enum):
    INDICATOR = "indicator"
    REMOVE_OUTSIDE = "remove_outside"
    REMOVE_INSIDE = "remove_inside"
    UNUSED = "unused"


@dataclass(frozen=True)
class BoundarySpec:
    """Half-open interval [start_frame, end_frame) of the target word."""

    start_frame: int
    end_frame: int

    def validate(self, length: int) -> None:
        if not 0 <= self.start_frame < self.end_frame <= length:
            raise ValueError(f"boundary [{self.start_frame}, {self.end_frame}) invalid for {length} frames")

    def indicator(self, length: int) -> np.ndarray:
        self.validate(length)
        b = np.zeros(length)
        b[self.start_frame : self.end_frame] = 1.0
        return b


@dataclass
class Vocabulary:
    words: list[str]

    def __post_init__(self):
        if len(set(self.words)) != len(self.words):
            raise ValueError("vocabulary words must be unique")
        self._index = {w: i for i, w in enumerate(self.words)}

    @property
    def size(self) -> int:
        return len(self.words)

    def index(self, word: str) -> int:
        return self._index[word]

    def __getitem__(self, i: int) -> str:
        return self.words[i]


def indicator_matrix(starts, ends, length: int) -> np.ndarray:
    """N x length 0/1 array with ones inside each row's [start, end)."""
    t = np.arange(length)[None, :]
    starts = np.asarray(starts)[:, None]
    ends = np.asarray(ends)[:, None]
    if np.any(starts < 0) or np.any(ends > length) or np.any(starts >= ends):
        raise ValueError("boundaries must satisfy 0 <= start < end <= T")
    return ((t >= starts) & (t < ends)).astype(np.float64)


def boundary_augment_batch(
    features: Tensor,
    starts,
    ends,
    mode: BoundaryMode | str,
    lengths: np.ndarray | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Apply a boundary mode to N x T x D features; returns (features, lengths).

    Removal modes pack surviving rows to the front of each sequence and pad the
    tail with zeros.
    """
    mode = BoundaryMode(mode)
    n, t_len, _ = features.shape
    lengths = np.full(n, t_len, dtype=np.int64) if lengths is None else np.asarray(lengths, dtype=np.int64)
    if mode is BoundaryMode.UNUSED:
        return features, lengths
    inside = indicator_matrix(starts, ends, t_len).astype(bool)
    if mode is BoundaryMode.INDICATOR:
        col = Tensor(inside.astype(features.dtype)[:, :, None])
        return concat([features, col], axis=-1), lengths
    keep = inside if mode is BoundaryMode.REMOVE_OUTSIDE else ~inside
    keep &= valid_mask(lengths, t_len)
    new_len = keep.sum(axis=1)
    if new_len.min() == 0:
        raise ValueError(f"{mode.value} leaves an empty sequence")
    width = int(new_len.max())
    index = np.zeros((n, width), dtype=np.int64)
    valid = np.zeros((n, width), dtype=bool)
    for row in range(n):
        rows = np.flatnonzero(keep[row])
        index[row, : len(rows)] = rows
        valid[row, : len(rows)] = True
    return gather_rows(features, index, valid), new_len.astype(np.int64)


def boundary_augment(features: Tensor, spec: BoundarySpec, mode: BoundaryMode | str) -> Tensor:
    """Single-sequence (T x D) form of :func:`boundary_augment_batch`."""
    t_len = features.shape[0]
    spec.validate(t_len)
    if BoundaryMode(mode) is BoundaryMode.UNUSED:
        return features
    out, lengths = boundary_augment_batch(
        features.reshape(1, *features.shape), [spec.start_frame], [spec.end_frame], mode
    )
    return out.reshape(out.shape[1], out.shape[2])[: int(lengths[0])]


# -- Backend II: concat-at-end BiLSTM ----------------------------------------

@dataclass
class BiLstmBackendConfig:
    layers: int = 2
    hidden_size: int = 256
    aggregate: str = "average"
    bn: bool = True
    dropout: bool = True
    lstm_dropout_p: float = 0.30
    head_dropout_p: float = 0.15
    input_bn: bool = False

    def __post_init__(self):
        if self.layers not in (1, 2):
            raise ValueError("backend supports 1 or 2 LSTM layers per direction")
        if self.aggregate not in ("average", "last"):
            raise ValueError(f"aggregate must be 'average' or 'last', got {self.aggregate!r}")

    def to_dict(self) -> dict:
        return asdict(self)


class BiLstmBackend(Module):
    def __init__(self, cfg: BiLstmBackendConfig, input_size: int, vocab_size: int, rng, dtype=np.float32):
        self.config = cfg
        self.input_size = input_size
        p = cfg.lstm_dropout_p if cfg.dropout else 0.0
        hidden = [cfg.hidden_size] * cfg.layers
        self.fwd = DirectionalStack("forward", input_size, hidden, rng, input_dropout_p=p, input_bn=cfg.input_bn, dtype=dtype)
        self.bwd = DirectionalStack("backward", input_size, hidden, rng, input_dropout_p=p, input_bn=cfg.input_bn, dtype=dtype)
        if cfg.bn:
            self.bn = BatchNorm(2 * cfg.hidden_size, feature_axis=-1, dtype=dtype)
        self.fc = Linear(2 * cfg.hidden_size, vocab_size, rng, dtype=dtype)


def bilstm_backend_logits(
    backend: BiLstmBackend,
    fwd_in: Tensor,
    bwd_in: Tensor,
    lengths: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    mode: str = "eval",
) -> Tensor:
    """Per-direction N x T x D inputs -> N x V logits."""
    if fwd_in.shape[1] == 0:
        raise ValueError("empty sequence")
    cfg = backend.config
    f, out_len = run_direction(backend.fwd, fwd_in, rng, mode, lengths)
    b, _ = run_direction(backend.bwd, bwd_in, rng, mode, lengths)
    h = bidirectional_concat(f, b)
    n, t_len = h.shape[:2]
    if cfg.aggregate == "average":
        weights = valid_mask(out_len, t_len) / out_len[:, None]
        pooled = (h * Tensor(weights.astype(h.dtype)[:, :, None])).sum(axis=1)
    else:
        pooled = gather_rows(h, (out_len - 1)[:, None]).reshape(n, h.shape[2])
    if cfg.bn:
        backend.bn.state.mode = "train" if mode == "train" else "eval"
        pooled = backend.bn(pooled)
    if cfg.dropout:
        pooled = dropout(pooled, cfg.head_dropout_p, rng, mode)
    return backend.fc(pooled)


def bilstm_backend_forward(backend, fwd_in, bwd_in, lengths=None, rng=None, mode="eval") -> np.ndarray:
    """Posterior form: softmax of :func:`bilstm_backend_logits`."""
    return softmax(bilstm_backend_logits(backend, fwd_in, bwd_in, lengths, rng, mode).data)


# -- Backend I: temporal convolutions ----------------------------------------

@dataclass
class TConvBackendConfig:
    bottleneck: int = 256

    def to_dict(self) -> dict:
        return asdict(self)


def tconv_shape_chain(t_len: int, channels: int, bottleneck: int = 256, vocab_size: int = 500) -> list[tuple[int, ...]]:
    """(time x channels) after each block, then the bottleneck and output widths."""
    conv = (t_len + 2 - 3) // 2 + 1
    pooled = (conv - 3) // 2 + 1
    conv2 = (pooled + 2 - 3) // 2 + 1
    if pooled < 1 or conv2 < 1:
        raise ValueError(f"sequence of {t_len} frames is too short for two 4x reductions")
    return [(t_len, channels), (pooled, 2 * channels), (1, 4 * channels), (bottleneck,), (vocab_size,)]


class TConvBackend(Module):
    """conv(k3,s2) -> BN -> ReLU -> maxpool(k3,s2), twice (second pool global), then a linear bottleneck."""

    def __init__(self, cfg: TConvBackendConfig, channels: int, vocab_size: int, rng, dtype=np.float32):
        self.config = cfg
        self.channels = channels
        self.conv1 = Conv3d(ConvSpec(2 * channels, channels, (3, 1, 1), (2, 1, 1), (1, 0, 0)), rng, dtype)
        self.bn1 = BatchNorm(2 * channels, feature_axis=1, dtype=dtype)
        self.conv2 = Conv3d(ConvSpec(4 * channels, 2 * channels, (3, 1, 1), (2, 1, 1), (1, 0, 0)), rng, dtype)
        self.bn2 = BatchNorm(4 * channels, feature_axis=1, dtype=dtype)
        self.fc1 = Linear(4 * channels, cfg.bottleneck, rng, dtype=dtype)
        self.fc2 = Linear(cfg.bottleneck, vocab_size, rng, dtype=dtype)


def tconv_backend_logits(backend: TConvBackend, features: Tensor, mode: str = "eval", trace: list | None = None) -> Tensor:
    if features.ndim == 2:
        features = features.reshape(1, *features.shape)
    n, t_len, c = features.shape
    tconv_shape_chain(t_len, c)
    for bn in (backend.bn1, backend.bn2):
        bn.state.mode = "train" if mode == "train" else "eval"
    x = features.transpose(0, 2, 1).reshape(n, c, t_len, 1, 1)
    x = maxpool3d(relu(backend.bn1(backend.conv1(x))), (3, 1, 1), (2, 1, 1))
    if trace is not None:
        trace.append((x.shape[2], x.shape[1]))
    x = relu(backend.bn2(backend.conv2(x)))
    x = maxpool3d(x, (x.shape[2], 1, 1), (1, 1, 1))
    if trace is not None:
        trace.append((x.shape[2], x.shape[1]))
    x = backend.fc1(x.reshape(n, x.shape[1]))
    return backend.fc2(x)


def tconv_backend_forward(backend: TConvBackend, features: Tensor, mode: str = "eval") -> np.ndarray:
    return softmax(tconv_backend_logits(backend, features, mode).data)
