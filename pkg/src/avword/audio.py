"""Log-spectral features and the pyramidal BiLSTM audio frontend."""

from __future__ import annotations

import os
import wave
from dataclasses import asdict, dataclass

import numpy as np

from .nn import Module
from .recurrent import DirectionalStack, run_direction
from .tensor import Tensor, concat

SAMPLE_RATE = 16000
WINDOW = 320  # 20 ms
HOP = 160  # 10 ms
N_BINS = WINDOW // 2 + 1
LOG_FLOOR = 1e-6
AUDIO_PER_VIDEO_FRAME = 4


class WavFormatError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class SpectralSeq:
    frames: np.ndarray
    frame_rate: int = SAMPLE_RATE // HOP
    normalized: bool = False


def read_wav(path: str | os.PathLike) -> Waveform:
    """Load 16-bit little-endian mono PCM at 16 kHz; anything else is rejected."""
    try:
        with wave.open(os.fspath(path), "rb") as fh:
            channels, width, rate = fh.getnchannels(), fh.getsampwidth(), fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        raise WavFormatError(f"{path}: not a RIFF/PCM WAV file ({exc})") from exc
    if channels != 1:
        raise WavFormatError(f"{path}: expected mono audio, found {channels} channels")
    if width != 2:
        raise WavFormatError(f"{path}: expected 16-bit samples, found {8 * width}-bit")
    if rate != SAMPLE_RATE:
        raise WavFormatError(f"{path}: expected {SAMPLE_RATE} Hz, found {rate} Hz")
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32768.0, rate)


def quantize(samples: np.ndarray) -> np.ndarray:
    """Snap samples in [-1, 1] onto the 16-bit PCM grid used by :func:`write_wav`."""
    return np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767) / 32768.0


def write_wav(path: str | os.PathLike, wave_: Waveform) -> None:
    if wave_.sample_rate != SAMPLE_RATE:
        raise WavFormatError(f"only {SAMPLE_RATE} Hz audio can be written")
    pcm = np.clip(np.round(np.asarray(wave_.samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(os.fspath(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(SAMPLE_RATE)
        fh.writeframes(pcm.tobytes())


def stft_log_spectra(wave_: Waveform | np.ndarray) -> SpectralSeq:
    """Hamming-windowed 20 ms frames every 10 ms -> log(|DFT| + 1e-6), 161 bins."""
    if isinstance(wave_, Waveform):
        if wave_.sample_rate != SAMPLE_RATE:
            raise ValueError(f"features are defined for {SAMPLE_RATE} Hz audio, got {wave_.sample_rate}")
        samples = wave_.samples
    else:
        samples = wave_
    samples = np.asarray(samples, dtype=np.float64)
    if len(samples) < WINDOW:
        raise ValueError(f"waveform of {len(samples)} samples is shorter than one {WINDOW}-sample window")
    count = -(-len(samples) // HOP)
    padded = np.zeros((count - 1) * HOP + WINDOW)
    padded[: len(samples)] = samples
    frames = np.lib.stride_tricks.sliding_window_view(padded, WINDOW)[::HOP][:count]
    mag = np.abs(np.fft.rfft(frames * np.hamming(WINDOW), axis=1))
    return SpectralSeq(np.log(mag + LOG_FLOOR))


def utterance_scalar_normalize(seq: SpectralSeq) -> SpectralSeq:
    """Subtract one global mean and divide by one global deviation over all bins."""
    if seq.normalized:
        raise ValueError("spectral sequence is already normalized")
    x = np.asarray(seq.frames, dtype=np.float64)
    std = x.std()
    if std == 0.0:
        raise ValueError("degenerate audio: spectral features have zero variance")
    return SpectralSeq((x - x.mean()) / (std + 1e-8), seq.frame_rate, True)


def features_from_samples(samples: np.ndarray) -> np.ndarray:
    """Normalized T_A x 161 float32 features for one waveform."""
    return utterance_scalar_normalize(stft_log_spectra(samples)).frames.astype(np.float32)


def upsample_boundaries(start: int, end: int) -> tuple[int, int]:
    """Video-frame interval to audio-frame interval (4 audio frames per video frame)."""
    return start * AUDIO_PER_VIDEO_FRAME, end * AUDIO_PER_VIDEO_FRAME


@dataclass
class AudioFrontendConfig:
    hidden_size: int = 128
    reduce_mode: str = "concat"
    pyramidal: bool = True
    dropout_p: float = 0.30
    input_bn: bool = True

    def __post_init__(self):
        if self.reduce_mode not in ("concat", "even"):
            raise ValueError(f"reduce_mode must be 'concat' or 'even', got {self.reduce_mode!r}")

    @property
    def reduction(self) -> int:
        return 4 if self.pyramidal else 1

    def output_size(self) -> int:
        if self.pyramidal and self.reduce_mode == "concat":
            return 2 * self.hidden_size
        return self.hidden_size

    def to_dict(self) -> dict:
        return asdict(self)


class AudioFrontend(Module):
    """Two LSTM layers per direction, each followed by a 2x frame-rate reduction."""

    def __init__(self, cfg: AudioFrontendConfig, input_size: int, rng: np.random.Generator, dtype=np.float32):
        self.config = cfg
        self.input_size = input_size
        flags = [cfg.pyramidal, cfg.pyramidal]
        hidden = [cfg.hidden_size, cfg.hidden_size]
        kw = dict(pyramidal_flags=flags, input_dropout_p=cfg.dropout_p, input_bn=cfg.input_bn, reduce_mode=cfg.reduce_mode, dtype=dtype)
        self.fwd = DirectionalStack("forward", input_size, hidden, rng, **kw)
        self.bwd = DirectionalStack("backward", input_size, hidden, rng, **kw)
        self.output_size = self.fwd.output_size


def audio_frontend_forward(
    frontend: AudioFrontend,
    spectra: Tensor,
    boundaries: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    mode: str = "eval",
    lengths: np.ndarray | None = None,
) -> tuple[Tensor, Tensor, np.ndarray]:
    """Run both directions over N x T_A x 161 spectra.

    ``boundaries`` is an N x T_A 0/1 indicator at audio rate; when given it is
    appended as an extra input column. Returns (forward, backward, lengths).
    """
    if spectra.ndim == 2:
        spectra = spectra.reshape(1, *spectra.shape)
    if spectra.shape[1] < 4:
        raise ValueError(f"audio frontend needs at least 4 frames, got {spectra.shape[1]}")
    x = spectra
    if boundaries is not None:
        b = np.asarray(boundaries, dtype=spectra.dtype).reshape(spectra.shape[0], spectra.shape[1], 1)
        x = concat([x, Tensor(b)], axis=-1)
    if x.shape[-1] != frontend.input_size:
        raise ValueError(f"frontend expects {frontend.input_size} input features, got {x.shape[-1]}")
    fwd, out_len = run_direction(frontend.fwd, x, rng, mode, lengths)
    bwd, _ = run_direction(frontend.bwd, x, rng, mode, lengths)
    return fwd, bwd, out_len
