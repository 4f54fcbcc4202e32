"""Synthetic noise bank, SNR-exact mixing and the fixed noisy test sets."""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..audio import SAMPLE_RATE, Waveform, read_wav, write_wav

CATEGORIES = ("domestic", "nature", "office", "public", "street", "transportation")
TRAIN_CATEGORIES = CATEGORIES[:4]
TEST_SNRS = (-10, -5, 0, 5, 10, 15, 20)
TRAIN_SNR_RANGE = (-12.0, 22.0)
CLEAN = math.inf

# spectral tilt exponent, band centre (Hz), band gain, amplitude-modulation rate (Hz), depth
_COLOURS = {
    "domestic": (1.0, 500.0, 2.0, 0.5, 0.3),
    "nature": (0.3, 3000.0, 3.0, 2.0, 0.6),
    "office": (1.5, 1200.0, 1.5, 0.2, 0.2),
    "street": (2.0, 150.0, 4.0, 0.1, 0.5),
    "transportation": (2.5, 80.0, 6.0, 1.0, 0.2),
}


def signal_power(x: np.ndarray) -> float:
    return float(np.mean(np.square(np.asarray(x, dtype=np.float64))))


def measured_snr_db(signal: np.ndarray, noise: np.ndarray) -> float:
    return 10.0 * math.log10(signal_power(signal) / signal_power(noise))


def noise_gain(p_signal: float, p_noise: float, snr_db: float) -> float:
    return math.sqrt(p_signal / (p_noise * 10.0 ** (snr_db / 10.0)))


def mix_at_snr(signal: Waveform, noise: Waveform | None, snr_db: float) -> Waveform:
    """Add ``noise`` scaled so the mixture has exactly ``snr_db``; +inf returns the signal unchanged."""
    if snr_db == CLEAN:
        return signal
    if noise is None:
        raise ValueError("finite SNR requested without a noise waveform")
    if signal.sample_rate != noise.sample_rate:
        raise ValueError(f"sample rates differ: {signal.sample_rate} vs {noise.sample_rate}")
    s = np.asarray(signal.samples, dtype=np.float64)
    n = np.asarray(noise.samples, dtype=np.float64)
    if s.shape != n.shape:
        raise ValueError(f"signal and noise lengths differ: {s.shape} vs {n.shape}")
    p_s, p_n = signal_power(s), signal_power(n)
    if p_s == 0.0:
        raise ValueError("signal has zero power; SNR is undefined")
    if p_n == 0.0:
        raise ValueError("noise has zero power; cannot reach a finite SNR")
    return Waveform(s + noise_gain(p_s, p_n, snr_db) * n, signal.sample_rate)


def _coloured(rng: np.random.Generator, length: int, tilt, centre, gain, am_rate, am_depth) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(length))
    f = np.fft.rfftfreq(length, 1.0 / SAMPLE_RATE)
    shape = 1.0 / np.maximum(f, 20.0) ** (tilt / 2.0)
    shape *= 1.0 + gain * np.exp(-0.5 * (np.log(np.maximum(f, 1.0) / centre) / 0.3) ** 2)
    x = np.fft.irfft(spec * shape, n=length)
    t = np.arange(length) / SAMPLE_RATE
    x *= 1.0 + am_depth * np.sin(2 * np.pi * am_rate * t + rng.uniform(0, 2 * np.pi))
    return x


def tone_sequence_voice(rng: np.random.Generator, length: int, syllable: int = 2400) -> np.ndarray:
    """A babble-like voice: consecutive harmonic syllables with random pitch."""
    out = np.zeros(length)
    t = np.arange(syllable) / SAMPLE_RATE
    env = np.hanning(syllable)
    for start in range(0, length, syllable):
        f0 = rng.uniform(100.0, 320.0)
        harmonics = np.arange(1, int(3800 // f0) + 1)
        amps = 1.0 / harmonics
        tone = (amps[:, None] * np.sin(2 * np.pi * f0 * harmonics[:, None] * t + rng.uniform(0, 2 * np.pi, (len(harmonics), 1)))).sum(0)
        seg = min(syllable, length - start)
        out[start : start + seg] = (env * tone)[:seg]
    return out


def _source(category: str, rng: np.random.Generator, length: int) -> np.ndarray:
    if category == "public":
        x = sum(tone_sequence_voice(rng, length) for _ in range(6))
    else:
        x = _coloured(rng, length, *_COLOURS[category])
    return x / np.sqrt(signal_power(x))


@dataclass
class NoiseBank:
    """category -> list of source waveforms (float64 sample arrays)."""

    sources: dict[str, list[np.ndarray]]

    @classmethod
    def synthetic(cls, seed: int = 0, files_per_category: int = 3, seconds: float = 4.0) -> "NoiseBank":
        length = int(seconds * SAMPLE_RATE)
        root = np.random.SeedSequence([seed, 7])
        sources = {}
        for cat, ss in zip(CATEGORIES, root.spawn(len(CATEGORIES))):
            sources[cat] = [_source(cat, np.random.default_rng(child), length) for child in ss.spawn(files_per_category)]
        return cls(sources)

    @classmethod
    def from_directory(cls, root: str | os.PathLike) -> "NoiseBank":
        """Load ``root/<category>/*.wav``; the same layout :meth:`save` writes."""
        sources = {}
        for cat_dir in sorted(Path(root).iterdir()):
            if cat_dir.is_dir():
                files = sorted(cat_dir.glob("*.wav"))
                if files:
                    sources[cat_dir.name] = [read_wav(f).samples for f in files]
        return cls(sources)

    def save(self, root: str | os.PathLike) -> None:
        for cat, files in self.sources.items():
            d = Path(root) / cat
            d.mkdir(parents=True, exist_ok=True)
            peak = max(np.max(np.abs(x)) for x in files)
            for i, x in enumerate(files):
                write_wav(d / f"{i:02d}.wav", Waveform(0.9 * x / peak))

    def subset(self, categories) -> "NoiseBank":
        missing = [c for c in categories if c not in self.sources]
        if missing:
            raise KeyError(f"noise bank lacks categories {missing}")
        return NoiseBank({c: self.sources[c] for c in categories})

    @property
    def categories(self) -> list[str]:
        return list(self.sources)

    def segment(self, category: str, file: int, offset: int, length: int) -> np.ndarray:
        src = self.sources[category][file]
        if offset < 0 or offset + length > len(src):
            raise ValueError(f"segment [{offset}, {offset + length}) outside {category}/{file} of {len(src)} samples")
        return src[offset : offset + length]


@dataclass
class NoiseSpec:
    """A recipe for additive noise. Each source is (category, file index, sample offset)."""

    sources: list[tuple[str, int, int]] = field(default_factory=list)
    snr_db: float = CLEAN

    @property
    def mixture_count(self) -> int:
        return len(self.sources)

    @property
    def categories(self) -> list[str]:
        return [s[0] for s in self.sources]

    def realize(self, bank: NoiseBank, length: int) -> Waveform | None:
        if not self.sources:
            return None
        total = sum(bank.segment(c, f, o, length) for c, f, o in self.sources)
        return Waveform(np.asarray(total, dtype=np.float64))

    def apply(self, bank: NoiseBank, signal: Waveform) -> Waveform:
        if not self.sources:
            return signal
        return mix_at_snr(signal, self.realize(bank, len(signal.samples)), self.snr_db)

    def to_json(self) -> dict:
        return {"sources": [list(s) for s in self.sources], "snr_db": None if self.snr_db == CLEAN else self.snr_db}

    @classmethod
    def from_json(cls, d: dict) -> "NoiseSpec":
        snr = CLEAN if d["snr_db"] is None else float(d["snr_db"])
        return cls([(str(c), int(f), int(o)) for c, f, o in d["sources"]], snr)


def _draw_source(bank: NoiseBank, categories, rng: np.random.Generator, length: int) -> tuple[str, int, int]:
    cat = categories[rng.integers(len(categories))]
    file = int(rng.integers(len(bank.sources[cat])))
    span = len(bank.sources[cat][file]) - length
    if span < 0:
        raise ValueError(f"noise source {cat}/{file} is shorter than {length} samples")
    return cat, file, int(rng.integers(span + 1))


def sample_train_noise(bank: NoiseBank, rng: np.random.Generator, length: int) -> tuple[NoiseSpec, Waveform | None]:
    """N_n uniform on {0..3} sources from the training categories, SNR uniform on [-12, 22] dB."""
    categories = [c for c in TRAIN_CATEGORIES if bank.sources.get(c)]
    if not categories:
        raise ValueError("noise bank holds none of the training categories")
    count = int(rng.integers(4))
    snr = float(rng.uniform(*TRAIN_SNR_RANGE))
    if count == 0:
        return NoiseSpec([], CLEAN), None
    spec = NoiseSpec([_draw_source(bank, categories, rng, length) for _ in range(count)], snr)
    return spec, spec.realize(bank, length)


def build_test_noise_sets(bank: NoiseBank, test_ids: list[str], length: int, seed: int = 0) -> dict[str, dict]:
    """Eight manifests keyed "clean", "-10", ..., "20".

    Each noisy manifest pairs every test sample with one source of every
    category (no mixtures) at that SNR.
    """
    missing = [c for c in CATEGORIES if not bank.sources.get(c)]
    if missing:
        raise ValueError(f"test noise sets need all six categories; missing {missing}")
    ids = sorted(test_ids)
    out = {"clean": {"snr_db": None, "entries": [{"id": i, "noise": NoiseSpec().to_json()} for i in ids]}}
    for snr in TEST_SNRS:
        rng = np.random.default_rng([seed, 11, snr + 100])
        entries = []
        for sample_id in ids:
            for cat in CATEGORIES:
                spec = NoiseSpec([_draw_source(bank, [cat], rng, length)], float(snr))
                entries.append({"id": sample_id, "category": cat, "noise": spec.to_json()})
        out[str(snr)] = {"snr_db": snr, "entries": entries}
    return out


def manifest_bytes(manifest: dict) -> bytes:
    return json.dumps(manifest, sort_keys=True, indent=1).encode()


def manifest_hash(manifest: dict) -> str:
    return hashlib.sha256(manifest_bytes(manifest)).hexdigest()
