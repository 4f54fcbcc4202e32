"""Misclassification-rate reports, SNR sweeps and confusion analysis."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .audio import Waveform, features_from_samples
from .data.noise import CATEGORIES, TEST_SNRS, NoiseBank, NoiseSpec
from .integration import decide

SWEEP_KEYS = [str(s) for s in TEST_SNRS] + ["clean"]


@dataclass
class EvalReport:
    words: list[str]
    mcr: float
    correct: int
    total: int
    confusion: np.ndarray  # target x estimate counts
    predictions: np.ndarray

    @property
    def per_word_counts(self) -> np.ndarray:
        return self.confusion.sum(axis=1)

    @property
    def per_word_errors(self) -> np.ndarray:
        return self.per_word_counts - np.diag(self.confusion)

    def per_word_mcr(self) -> dict[str, float]:
        counts = self.per_word_counts
        return {w: 100.0 * e / c for w, e, c in zip(self.words, self.per_word_errors, counts) if c > 0}

    def to_json(self) -> dict:
        rows, cols = np.nonzero(self.confusion)
        return {
            "mcr": self.mcr,
            "correct": self.correct,
            "total": self.total,
            "per_word_errors": {w: int(e) for w, e in zip(self.words, self.per_word_errors)},
            "confusion": [[self.words[r], self.words[c], int(self.confusion[r, c])] for r, c in zip(rows, cols)],
        }


def evaluate_mcr(posteriors: np.ndarray, labels: np.ndarray, words: list[str]) -> EvalReport:
    """Argmax decision per row (lowest index wins ties); MCR = 100 (1 - accuracy)."""
    posteriors = np.asarray(posteriors)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("cannot score an empty test set")
    if posteriors.shape != (len(labels), len(words)):
        raise ValueError(f"posteriors shaped {posteriors.shape}, expected {(len(labels), len(words))}")
    pred = decide(posteriors)
    confusion = np.zeros((len(words), len(words)), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    correct = int(np.sum(pred == labels))
    return EvalReport(list(words), 100.0 * (1.0 - correct / len(labels)), correct, len(labels), confusion, pred)


def confusion_pairs(report: EvalReport, top_k: int = 10) -> list[tuple[str, str, int]]:
    """Off-diagonal (target, estimate, count) cells, largest first; ties by word order."""
    if top_k <= 0:
        return []
    cells = [
        (-int(report.confusion[r, c]), r, c)
        for r in range(len(report.words))
        for c in range(len(report.words))
        if r != c and report.confusion[r, c] > 0
    ]
    cells.sort()
    return [(report.words[r], report.words[c], -n) for n, r, c in cells[:top_k]]


def context_only_table(report: EvalReport, threshold: float = 50.0) -> list[tuple[str, float]]:
    """Words whose MCR is at most ``threshold``, best first."""
    rows = [(w, m) for w, m in report.per_word_mcr().items() if m <= threshold]
    return sorted(rows, key=lambda r: (r[1], r[0]))


def chance_mcr(vocab_size: int) -> float:
    return 100.0 * (1.0 - 1.0 / vocab_size)


# -- noisy test sets ---------------------------------------------------------

def noisy_test_features(waves: np.ndarray, ids: list[str], noise_set: dict, bank: NoiseBank):
    """Realize one fixed test manifest: returns (spectra, sample index, category per entry)."""
    position = {sid: i for i, sid in enumerate(ids)}
    spectra, index, cats = [], [], []
    for entry in noise_set["entries"]:
        i = position[entry["id"]]
        spec = NoiseSpec.from_json(entry["noise"])
        mixed = spec.apply(bank, Waveform(waves[i])).samples
        spectra.append(features_from_samples(mixed))
        index.append(i)
        cats.append(entry.get("category", "clean"))
    return np.stack(spectra), np.array(index), cats


@dataclass
class SweepReport:
    words: list[str]
    by_snr: dict[str, EvalReport]
    by_snr_category: dict[str, dict[str, EvalReport]]

    def rows(self) -> list[dict]:
        return [{"snr": key, "mcr": self.by_snr[key].mcr} for key in SWEEP_KEYS if key in self.by_snr]

    def category_rows(self) -> list[dict]:
        out = []
        for cat in CATEGORIES:
            vals = [v[cat].mcr for v in self.by_snr_category.values() if cat in v]
            if vals:
                out.append({"category": cat, "mcr": float(np.mean(vals))})
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["snr_db", "mcr"] + [f"mcr_{c}" for c in CATEGORIES])
        for key in [k for k in SWEEP_KEYS if k in self.by_snr]:
            cats = self.by_snr_category.get(key, {})
            writer.writerow([key, f"{self.by_snr[key].mcr:.4f}"] + [f"{cats[c].mcr:.4f}" if c in cats else "" for c in CATEGORIES])
        return buf.getvalue()


PosteriorFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def snr_sweep_report(
    posterior_fn: PosteriorFn,
    waves: np.ndarray,
    labels: np.ndarray,
    ids: list[str],
    words: list[str],
    noise_sets: dict[str, dict],
    bank: NoiseBank,
    keys: list[str] | None = None,
) -> SweepReport:
    """Score ``posterior_fn(sample_index, spectra)`` on every fixed test set.

    Rows are the seven SNR levels plus clean; each noisy row also breaks
    down by noise category.
    """
    keys = SWEEP_KEYS if keys is None else keys
    missing = [k for k in keys if k not in noise_sets]
    if missing:
        raise ValueError(f"noise sets missing for SNR {missing}")
    by_snr, by_cat = {}, {}
    for key in keys:
        spectra, index, cats = noisy_test_features(waves, ids, noise_sets[key], bank)
        post = posterior_fn(index, spectra)
        by_snr[key] = evaluate_mcr(post, labels[index], words)
        if key != "clean":
            cats = np.array(cats)
            by_cat[key] = {c: evaluate_mcr(post[cats == c], labels[index][cats == c], words) for c in CATEGORIES if np.any(cats == c)}
    return SweepReport(list(words), by_snr, by_cat)
