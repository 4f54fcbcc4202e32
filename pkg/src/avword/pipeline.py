"""Dataset-level workflows shared by the command line and the acceptance suite."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data.noise import NoiseBank, build_test_noise_sets, manifest_bytes, manifest_hash
from .data.wordbank import CLIP_SAMPLES, WordbankConfig, generate_wordbank, load_manifest
from .evaluate import EvalReport, SWEEP_KEYS, evaluate_mcr, noisy_test_features, snr_sweep_report
from .integration import FusionConfig, ModelSpec, WordNet, assemble_model, late_fuse
from .train import SplitData, TrainConfig, TrainResult, load_split, posteriors, train

NOISE_BANK_DIR = "noise_bank"
NOISE_SETS_FILE = "test_noise_sets.json"


class ArtifactError(RuntimeError):
    """A stored artifact is missing or does not fit the requested run."""


def generate_dataset(cfg: WordbankConfig, root, bank_seed: int = 0, files_per_category: int = 3,
                     bank_dir=None, test_seed: int = 0) -> dict:
    """Wordbank, noise bank and fixed test noise manifests under ``root``."""
    root = Path(root)
    manifest = generate_wordbank(cfg, root)
    bank = NoiseBank.from_directory(bank_dir) if bank_dir else NoiseBank.synthetic(bank_seed, files_per_category)
    bank.save(root / NOISE_BANK_DIR)
    # test manifests reference the bank as stored, so reload it before drawing offsets
    bank = NoiseBank.from_directory(root / NOISE_BANK_DIR)
    test_ids = [e["id"] for e in manifest["samples"] if e["split"] == "test"]
    sets = build_test_noise_sets(bank, test_ids, CLIP_SAMPLES, seed=test_seed)
    (root / NOISE_SETS_FILE).write_bytes(manifest_bytes(sets))
    return {"content_hash": manifest["content_hash"], "noise_sets_hash": manifest_hash(sets), "samples": len(manifest["samples"])}


@dataclass
class Dataset:
    root: Path
    manifest: dict
    train: SplitData
    val: SplitData
    test: SplitData

    @property
    def words(self) -> list[str]:
        return self.manifest["words"]

    def bank(self) -> NoiseBank:
        d = self.root / NOISE_BANK_DIR
        if not d.is_dir():
            raise ArtifactError(f"no noise bank under {self.root}; run gen-data first")
        return NoiseBank.from_directory(d)

    def noise_sets(self) -> dict:
        p = self.root / NOISE_SETS_FILE
        if not p.exists():
            raise ArtifactError(f"no test noise manifests under {self.root}; run gen-data first")
        return json.loads(p.read_text())


def load_dataset(root: str | os.PathLike) -> Dataset:
    root = Path(root)
    if not (root / "manifest.json").exists():
        raise ArtifactError(f"no dataset manifest under {root}")
    return Dataset(root, load_manifest(root), *(load_split(root, s) for s in ("train", "val", "test")))


def check_vocabulary(spec: ModelSpec, data: Dataset) -> None:
    if spec.vocab_size != len(data.words):
        raise ArtifactError(f"model has {spec.vocab_size} outputs but the dataset has {len(data.words)} words")


def train_model(spec: ModelSpec, data: Dataset, cfg: TrainConfig, seed: int, out_dir=None, dtype=np.float32) -> tuple[WordNet, TrainResult]:
    check_vocabulary(spec, data)
    net = assemble_model(spec, np.random.default_rng([seed, 5]), dtype)
    bank = data.bank() if spec.kind != "visual" else None
    return net, train(net, data.train, data.val, cfg, bank=bank, out_dir=out_dir)


def clean_report(net: WordNet, data: Dataset) -> tuple[EvalReport, np.ndarray]:
    check_vocabulary(net.spec, data)
    post = posteriors(net, data.test)
    return evaluate_mcr(post, data.test.labels, data.words), post


def sweep(net: WordNet, data: Dataset, keys=None):
    check_vocabulary(net.spec, data)
    test = data.test
    if net.spec.kind == "visual":
        fixed = posteriors(net, test)

        def fn(index, spectra):
            return fixed[index]
    else:
        def fn(index, spectra):
            return posteriors(net, test.subset(index), spectra)

    return snr_sweep_report(fn, test.waves, test.labels, test.ids, data.words, data.noise_sets(), data.bank(), keys)


@dataclass
class FusionRow:
    snr: str
    mcr_visual: float
    mcr_audio: float
    mcr_fused: float
    fused_decisions: np.ndarray
    audio_decisions: np.ndarray

    def to_json(self) -> dict:
        return {"snr": self.snr, "mcr_visual": self.mcr_visual, "mcr_audio": self.mcr_audio, "mcr_fused": self.mcr_fused}


def fused_sweep(visual: WordNet, audio: WordNet, data: Dataset, fusion: FusionConfig, keys=None) -> list[FusionRow]:
    """Late fusion of a visual-only and an audio-only network on the fixed test manifests."""
    if visual.spec.kind != "visual" or audio.spec.kind != "audio":
        raise ArtifactError(f"fusion needs a visual and an audio checkpoint, got {visual.spec.kind} and {audio.spec.kind}")
    check_vocabulary(visual.spec, data)
    check_vocabulary(audio.spec, data)
    keys = list(SWEEP_KEYS if keys is None else keys)
    sets = data.noise_sets()
    missing = [k for k in keys if k not in sets]
    if missing:
        raise ArtifactError(f"noise sets missing for SNR {missing}")
    bank = data.bank()
    test = data.test
    p_vis = posteriors(visual, test)
    rows = []
    for key in keys:
        spectra, index, _ = noisy_test_features(test.waves, test.ids, sets[key], bank)
        p_a = posteriors(audio, test.subset(index), spectra)
        p_v = p_vis[index]
        labels = test.labels[index]
        fused = late_fuse(p_v, p_a, fusion)
        rep = {name: evaluate_mcr(p, labels, data.words) for name, p in (("v", p_v), ("a", p_a), ("f", fused))}
        rows.append(FusionRow(key, rep["v"].mcr, rep["a"].mcr, rep["f"].mcr, rep["f"].predictions, rep["a"].predictions))
    return rows


def context_split(report: EvalReport, manifest: dict) -> dict:
    """Mean per-word MCR for context-predictable and context-free words."""
    per_word = report.per_word_mcr()
    predictable = set(manifest["context_predictable"])
    pred = [m for w, m in per_word.items() if w in predictable]
    free = [m for w, m in per_word.items() if w not in predictable]
    return {
        "predictable_mcr": float(np.mean(pred)) if pred else float("nan"),
        "free_mcr": float(np.mean(free)) if free else float("nan"),
        "per_word": [{"word": w, "mcr": m, "predictable": w in predictable} for w, m in per_word.items()],
    }
