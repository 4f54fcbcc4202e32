"""On-disk sample layout: frames.tnsr, audio.wav, meta.json."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..audio import Waveform, read_wav, write_wav
from ..backend import BoundarySpec
from ..tensor import tnsr

META_FIELDS = ("label", "word", "boundary_start", "boundary_end", "split", "id")


@dataclass
class Sample:
    frames: np.ndarray  # T x 1 x H x W uint8
    waveform: Waveform
    boundaries: BoundarySpec
    label: int
    word: str
    split: str
    id: str

    def validate(self) -> None:
        t = self.frames.shape[0]
        if self.frames.dtype != np.uint8 or self.frames.ndim != 4 or self.frames.shape[1] != 1:
            raise ValueError(f"frames must be uint8 T x 1 x H x W, got {self.frames.dtype} {self.frames.shape}")
        self.boundaries.validate(t)
        expected = t * self.waveform.sample_rate // 25
        if len(self.waveform.samples) != expected:
            raise ValueError(f"{len(self.waveform.samples)} audio samples do not span {t} frames at 25 fps")


def store_sample(sample: Sample, directory: str | os.PathLike) -> None:
    sample.validate()
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    tnsr.save(d / "frames.tnsr", sample.frames)
    write_wav(d / "audio.wav", sample.waveform)
    meta = {
        "label": int(sample.label),
        "word": sample.word,
        "boundary_start": int(sample.boundaries.start_frame),
        "boundary_end": int(sample.boundaries.end_frame),
        "split": sample.split,
        "id": sample.id,
    }
    (d / "meta.json").write_text(json.dumps(meta, sort_keys=True))


def load_sample(directory: str | os.PathLike) -> Sample:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    missing = [k for k in META_FIELDS if k not in meta]
    if missing:
        raise ValueError(f"{d / 'meta.json'}: missing fields {missing}")
    sample = Sample(
        frames=tnsr.load(d / "frames.tnsr"),
        waveform=read_wav(d / "audio.wav"),
        boundaries=BoundarySpec(int(meta["boundary_start"]), int(meta["boundary_end"])),
        label=int(meta["label"]),
        word=meta["word"],
        split=meta["split"],
        id=meta["id"],
    )
    sample.validate()
    return sample
