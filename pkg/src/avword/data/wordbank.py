"""Deterministic synthetic audiovisual wordbank.

Every word owns a visual motif (a blob moving through three keyframes of a
3x3 grid) and an audio motif (three harmonic syllables). A clip is 29 video
frames and 1.16 s of audio: the target word fills a boundary interval and
context words fill the rest. Half the vocabulary is context-predictable: a
dedicated cue token always precedes it. Homophone pairs share one audio motif.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..audio import SAMPLE_RATE, Waveform, quantize
from ..backend import BoundarySpec
from .io import Sample, store_sample

FRAMES = 29
FPS = 25
SAMPLES_PER_FRAME = SAMPLE_RATE // FPS
CLIP_SAMPLES = FRAMES * SAMPLES_PER_FRAME
SPLITS = ("train", "val", "test")
PITCHES = tuple(float(f) for f in np.geomspace(140.0, 560.0, 9))


@dataclass
class WordbankConfig:
    vocab_size: int = 20
    train_per_word: int = 5
    val_per_word: int = 2
    test_per_word: int = 10
    frame_size: int = 32
    predictable_fraction: float = 0.5
    homophone_pairs: int = 2
    target_frames: tuple[int, int] = (8, 12)
    pixel_noise: float = 12.0
    jitter_px: float = 1.5
    context_source: str = "vocabulary"  # vocabulary | filler
    filler_count: int = 10
    seed: int = 0

    def __post_init__(self):
        self.target_frames = tuple(int(v) for v in self.target_frames)
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2")
        if self.context_source not in ("vocabulary", "filler"):
            raise ValueError(f"context_source must be 'vocabulary' or 'filler', got {self.context_source!r}")
        if self.frame_size < 16:
            raise ValueError("frame_size must be at least 16 pixels")
        lo, hi = self.target_frames
        if not 1 <= lo <= hi <= FRAMES - 6:
            raise ValueError(f"target_frames must satisfy 1 <= lo <= hi <= {FRAMES - 6}")
        n_free = self.vocab_size - self.predictable_count
        if 2 * self.homophone_pairs > n_free:
            raise ValueError("homophone pairs are drawn from context-free words; not enough of them")

    @property
    def predictable_count(self) -> int:
        return int(round(self.predictable_fraction * self.vocab_size))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["target_frames"] = list(self.target_frames)
        return d


@dataclass
class Lexicon:
    """Motifs and context structure shared by every sample of one wordbank."""

    words: list[str]
    visual: dict[str, tuple[int, int, int]]
    audio: dict[str, tuple[int, int, int]]
    cue_of: dict[str, str]
    homophones: list[tuple[str, str]]
    fillers: list[str] = field(default_factory=list)

    @property
    def predictable(self) -> list[str]:
        return list(self.cue_of)

    @property
    def context_free(self) -> list[str]:
        return [w for w in self.words if w not in self.cue_of]


def word_names(n: int) -> list[str]:
    return [f"word{i:02d}" for i in range(n)]


def build_lexicon(cfg: WordbankConfig) -> Lexicon:
    rng = np.random.default_rng([cfg.seed, 1])
    words = word_names(cfg.vocab_size)
    n_pred = cfg.predictable_count
    n_fill = cfg.filler_count if cfg.context_source == "filler" else 0
    n_tokens = cfg.vocab_size + n_pred + n_fill
    triples = list(itertools.permutations(range(9), 3))
    if n_tokens > len(triples):
        raise ValueError("vocabulary too large for the motif space")
    vis = [triples[i] for i in rng.permutation(len(triples))[:n_tokens]]
    aud = [triples[i] for i in rng.permutation(len(triples))[:n_tokens]]
    fillers = [f"fill{i:02d}" for i in range(n_fill)]
    tokens = words + [f"cue{i:02d}" for i in range(n_pred)] + fillers
    visual = dict(zip(tokens, vis))
    audio = dict(zip(tokens, aud))
    shuffled = [words[i] for i in rng.permutation(cfg.vocab_size)]
    predictable = sorted(shuffled[:n_pred])
    cue_of = {w: f"cue{i:02d}" for i, w in enumerate(predictable)}
    free = sorted(shuffled[n_pred:])
    picks = [free[i] for i in rng.permutation(len(free))[: 2 * cfg.homophone_pairs]]
    homophones = [tuple(sorted(picks[2 * i : 2 * i + 2])) for i in range(cfg.homophone_pairs)]
    for a, b in homophones:
        audio[b] = audio[a]
    return Lexicon(words, visual, audio, cue_of, homophones, fillers)


def _grid_xy(cell: int, size: int) -> tuple[float, float]:
    step = size / 4.0
    return step * (1 + cell % 3), step * (1 + cell // 3)


def render_visual_motif(motif, n_frames: int, size: int, rng: np.random.Generator | None = None, jitter: float = 0.0) -> np.ndarray:
    """n_frames x size x size blob intensities in [0, 1]."""
    keys = np.array([_grid_xy(c, size) for c in motif])
    if rng is not None and jitter > 0:
        keys = keys + rng.uniform(-jitter, jitter, keys.shape)
    pos = np.linspace(0.0, 2.0, n_frames) if n_frames > 1 else np.zeros(1)
    seg = np.minimum(pos.astype(int), 1)
    frac = (pos - seg)[:, None]
    xy = keys[seg] * (1 - frac) + keys[seg + 1] * frac
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    sigma = size / 12.0
    d2 = (xx[None] - xy[:, 0, None, None]) ** 2 + (yy[None] - xy[:, 1, None, None]) ** 2
    return np.exp(-0.5 * d2 / sigma**2)


def render_audio_motif(motif, n_samples: int) -> np.ndarray:
    """Three equal-length harmonic syllables; a pure function of (motif, length)."""
    out = np.zeros(n_samples)
    bounds = np.linspace(0, n_samples, 4).astype(int)
    for k, cell in enumerate(motif):
        length = bounds[k + 1] - bounds[k]
        t = np.arange(length) / SAMPLE_RATE
        f0 = PITCHES[cell]
        harmonics = np.arange(1, int(4000 // f0) + 1)
        amps = 1.0 / harmonics
        tone = (amps[:, None] * np.sin(2 * np.pi * f0 * harmonics[:, None] * t)).sum(axis=0)
        out[bounds[k] : bounds[k + 1]] = np.hanning(length) * tone
    return 0.25 * out / np.max(np.abs(out))


def _split_region(n: int) -> list[int]:
    if n == 0:
        return []
    count = -(-n // 10)
    base, extra = divmod(n, count)
    return [base + (1 if i < extra else 0) for i in range(count)]


def layout(cfg: WordbankConfig, lex: Lexicon, word: str, rng: np.random.Generator) -> tuple[BoundarySpec, list[tuple[str, int]]]:
    """Boundary plus the (token, frame count) sequence filling the clip."""
    lo, hi = cfg.target_frames
    length = int(rng.integers(lo, hi + 1))
    start = int(rng.integers(6, FRAMES - length + 1))
    end = start + length
    left = _split_region(start)
    right = _split_region(FRAMES - end)
    others = lex.fillers or [w for w in lex.words if w != word]
    tokens = [others[rng.integers(len(others))] for _ in left]
    if word in lex.cue_of:
        tokens[-1] = lex.cue_of[word]
    seq = list(zip(tokens, left)) + [(word, length)]
    seq += [(others[rng.integers(len(others))], n) for n in right]
    return BoundarySpec(start, end), seq


def render_sample(cfg: WordbankConfig, lex: Lexicon, word: str, split: str, sample_id: str, rng: np.random.Generator) -> Sample:
    boundary, seq = layout(cfg, lex, word, rng)
    size = cfg.frame_size
    intensity = np.concatenate([render_visual_motif(lex.visual[tok], n, size, rng, cfg.jitter_px) for tok, n in seq])
    pixels = 40.0 + 180.0 * intensity + rng.normal(0.0, cfg.pixel_noise, intensity.shape)
    frames = np.clip(np.round(pixels), 0, 255).astype(np.uint8)[:, None]
    audio = np.concatenate([render_audio_motif(lex.audio[tok], n * SAMPLES_PER_FRAME) for tok, n in seq])
    return Sample(
        frames=frames,
        waveform=Waveform(quantize(audio)),
        boundaries=boundary,
        label=lex.words.index(word),
        word=word,
        split=split,
        id=sample_id,
    )


def iter_samples(cfg: WordbankConfig, lex: Lexicon | None = None):
    lex = lex or build_lexicon(cfg)
    counts = {"train": cfg.train_per_word, "val": cfg.val_per_word, "test": cfg.test_per_word}
    split_seeds = np.random.SeedSequence([cfg.seed, 2]).spawn(len(SPLITS))
    for split, ss in zip(SPLITS, split_seeds):
        for word, word_ss in zip(lex.words, ss.spawn(len(lex.words))):
            for k, sample_ss in enumerate(word_ss.spawn(counts[split])):
                yield render_sample(cfg, lex, word, split, f"{split}-{word}-{k:03d}", np.random.default_rng(sample_ss))


def generate_wordbank(cfg: WordbankConfig, root: str | os.PathLike) -> dict:
    """Write every sample under ``root`` and return the manifest (also written as manifest.json)."""
    root = Path(root)
    lex = build_lexicon(cfg)
    digest = hashlib.sha256()
    entries = []
    for sample in iter_samples(cfg, lex):
        rel = Path(sample.split) / sample.word / sample.id
        store_sample(sample, root / rel)
        for name in ("frames.tnsr", "audio.wav", "meta.json"):
            digest.update((root / rel / name).read_bytes())
        entries.append({"id": sample.id, "path": rel.as_posix(), "split": sample.split, "label": sample.label})
    manifest = {
        "config": cfg.to_dict(),
        "words": lex.words,
        "context_predictable": lex.predictable,
        "homophones": [list(p) for p in lex.homophones],
        "samples": entries,
        "content_hash": digest.hexdigest(),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def load_manifest(root: str | os.PathLike) -> dict:
    return json.loads((Path(root) / "manifest.json").read_text())
