"""Acceptance gate. Each test records one PASS/FAIL line, printed in the terminal summary.

Trained fixtures use seeds 0, 1 and 2 and report medians.
"""

import time

import numpy as np
import pytest
from scipy import stats

from avword.audio import (
    AudioFrontend,
    AudioFrontendConfig,
    Waveform,
    audio_frontend_forward,
    features_from_samples,
    stft_log_spectra,
)
from avword.backend import BiLstmBackendConfig
from avword.checks import BACKEND_CHAIN, GRAD_TOLERANCE, VISUAL_CHAIN, full_size_forward, gradient_suite
from avword.cli import main
from avword.data.noise import CLEAN, NoiseBank, build_test_noise_sets, measured_snr_db, mix_at_snr, sample_train_noise
from avword.data.wordbank import CLIP_SAMPLES, WordbankConfig
from avword.evaluate import SWEEP_KEYS
from avword.integration import (
    FusionConfig,
    ModelSpec,
    MultimodalDropConfig,
    decide,
    fused_log_scores,
    late_fuse,
    multimodal_masks,
)
from avword.pipeline import clean_report, context_split, fused_sweep, generate_dataset, load_dataset, sweep, train_model
from avword.recurrent import pyramidal_pair_concat
from avword.tensor import Tensor
from avword.train import TrainConfig
from avword.visual import ResNetConfig

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)
VOCAB = 20

# 20 words, 5 training clips per word, 32x32 frames
WORDBANK = dict(vocab_size=VOCAB, train_per_word=5, val_per_word=5, test_per_word=10, frame_size=32,
                context_source="filler", pixel_noise=8.0, jitter_px=1.0)
CONFUSABLE = dict(WORDBANK, context_source="vocabulary")

VISUAL = ResNetConfig(block_plan=(8, 16, 32, 64), feature_dim=32)
AUDIO = AudioFrontendConfig(hidden_size=128)
BACKEND = BiLstmBackendConfig(hidden_size=32)
VISUAL_TRAIN = dict(max_epochs=200, batch_size=20, track_train_accuracy=True)
AUDIO_TRAIN = dict(max_epochs=200, batch_size=20)
LOW_SNR = ["-10", "-5", "0"]


def _visual_spec(mode="indicator"):
    return ModelSpec("visual", mode, VOCAB, visual=VISUAL, backend=BACKEND)


def _audio_spec(mode="indicator"):
    return ModelSpec("audio", mode, VOCAB, audio=AUDIO, backend=BACKEND)


def _dataset(root, wordbank: dict, seed: int):
    generate_dataset(WordbankConfig(seed=seed, **wordbank), root, bank_seed=seed, test_seed=seed)
    return load_dataset(root)


@pytest.fixture(scope="session")
def filler_data(tmp_path_factory):
    return {s: _dataset(tmp_path_factory.mktemp(f"filler{s}"), WORDBANK, s) for s in SEEDS}


@pytest.fixture(scope="session")
def confusable_data(tmp_path_factory):
    return {s: _dataset(tmp_path_factory.mktemp(f"confusable{s}"), CONFUSABLE, s) for s in SEEDS}


def _train_all(spec, data, train_kw):
    runs, t0 = {}, time.perf_counter()
    for s in SEEDS:
        runs[s] = train_model(spec, data[s], TrainConfig(seed=s, **train_kw), s)
    return runs, time.perf_counter() - t0


@pytest.fixture(scope="session")
def visual_runs(filler_data):
    return _train_all(_visual_spec(), filler_data, VISUAL_TRAIN)


@pytest.fixture(scope="session")
def audio_runs(filler_data):
    return _train_all(_audio_spec(), filler_data, AUDIO_TRAIN)


@pytest.fixture(scope="session")
def audio_sweeps(audio_runs, filler_data):
    runs, _ = audio_runs
    return {s: sweep(runs[s][0], filler_data[s]) for s in SEEDS}


# -- 1 ---------------------------------------------------------------------------

def test_01_shape_compliance(criterion, tmp_path, capsys):
    code = main(["check", "--shapes", "--out", str(tmp_path)])
    text = capsys.readouterr().out
    chains_ok = code == 0 and "MISMATCH" not in text
    shape, seconds = full_size_forward()
    ok = chains_ok and shape == (1, 29, VISUAL_CHAIN[-1][0]) and seconds < 120
    detail = (f"check --shapes exit {code}; frontend {' -> '.join(map(str, VISUAL_CHAIN))}; "
              f"backend {' -> '.join(map(str, BACKEND_CHAIN))}; 112x112 forward {seconds:.1f}s, output {shape}")
    criterion(1, "shape compliance", ok, detail)


# -- 2 ---------------------------------------------------------------------------

def test_02_gradient_oracle(criterion):
    t0 = time.perf_counter()
    errors = gradient_suite(seeds=20)
    elapsed = time.perf_counter() - t0
    worst = {k: max(v) for k, v in errors.items()}
    ok = all(len(v) >= 20 for v in errors.values()) and max(worst.values()) < GRAD_TOLERANCE and elapsed < 600
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; 20 seeds each; {elapsed:.0f}s"
    criterion(2, "gradient oracle", ok, detail)


# -- 3 ---------------------------------------------------------------------------

def test_03_frame_rate_arithmetic(criterion):
    rng = np.random.default_rng(0)
    assert CLIP_SAMPLES == 18560
    spectra = stft_log_spectra(Waveform(rng.standard_normal(CLIP_SAMPLES) * 0.1)).frames
    front = AudioFrontend(AudioFrontendConfig(hidden_size=3), 161, rng, dtype=np.float64)
    fwd, bwd, lengths = audio_frontend_forward(front, Tensor(features_from_samples(rng.standard_normal(CLIP_SAMPLES))[None]))
    ok = spectra.shape == (116, 161) and fwd.shape[1] == bwd.shape[1] == 29 and lengths.tolist() == [29]
    lines = [f"1.16 s -> {spectra.shape[0]} frames x {spectra.shape[1]} bins -> {fwd.shape[1]} frontend frames"]
    for t_a in (5, 7, 117):
        x = rng.standard_normal((t_a, 2))
        paired = pyramidal_pair_concat(Tensor(x)).data
        expect = np.concatenate([x[0 : 2 * (t_a // 2) : 2], x[1 : 2 * (t_a // 2) : 2]], axis=1)
        out = audio_frontend_forward(front, Tensor(rng.standard_normal((1, t_a, 161))))[0]
        ok &= np.array_equal(paired, expect) and out.shape[1] == (t_a // 2) // 2
        lines.append(f"T={t_a}: pairs {paired.shape[0]}, frontend {out.shape[1]}")
    criterion(3, "frame-rate arithmetic", ok, "; ".join(lines))


# -- 4 ---------------------------------------------------------------------------

def test_04_snr_exactness(criterion):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(200, 4000))
        s = rng.standard_normal(n) * rng.uniform(0.01, 3)
        noise = rng.standard_normal(n) * rng.uniform(0.01, 3)
        snr = rng.uniform(-20, 30)
        mixed = mix_at_snr(Waveform(s), Waveform(noise), snr).samples
        worst = max(worst, abs(measured_snr_db(s, mixed - s) - snr))
    bank = NoiseBank.synthetic(0, seconds=1.0)
    draw_rng = np.random.default_rng(5)
    snrs = [spec.snr_db for spec, _ in (sample_train_noise(bank, draw_rng, 100) for _ in range(100_000)) if spec.snr_db != CLEAN]
    ks = stats.kstest(snrs, stats.uniform(-12, 34).cdf).statistic
    sets = build_test_noise_sets(bank, ["a", "b"], 1000)
    keys_ok = set(sets) == {"-10", "-5", "0", "5", "10", "15", "20", "clean"}
    ok = worst < 1e-6 and ks < 0.01 and keys_ok
    criterion(4, "SNR exactness", ok, f"max |measured - target| {worst:.1e} dB; KS {ks:.4f} on {len(snrs)} noisy draws; test levels {sorted(sets)}")


# -- 5 ---------------------------------------------------------------------------

def test_05_multimodal_dropout_law(criterion):
    keep = multimodal_masks(MultimodalDropConfig(), np.random.default_rng(5), 100_000, "train").astype(bool)
    audio, video = keep[:, 0], keep[:, 1]
    both = float(np.mean(audio & video))
    neither = int(np.sum(~audio & ~video))
    ok = 0.49 <= both <= 0.51 and neither == 0
    criterion(5, "multimodal dropout law", ok, f"P(both kept) {both:.4f}; drop-both count {neither} of 100000")


# -- 6 ---------------------------------------------------------------------------

def test_06_fusion_degeneracies(criterion):
    rng = np.random.default_rng(6)
    p_v = rng.dirichlet(np.ones(VOCAB) * 0.5, 1000)
    p_a = rng.dirichlet(np.ones(VOCAB) * 0.5, 1000)
    ok0 = np.array_equal(decide(late_fuse(p_v, p_a, 0.0)), decide(p_a))
    ok1 = np.array_equal(decide(late_fuse(p_v, p_a, 1.0)), decide(p_v))
    base = decide(late_fuse(p_v, p_a, 0.4))
    scale_v = rng.uniform(1e-3, 1e3, (1000, 1))
    scale_a = rng.uniform(1e-3, 1e3, (1000, 1))
    rescaled = decide(fused_log_scores(p_v * scale_v, p_a * scale_a, 0.4))
    ok_scale = np.array_equal(base, rescaled)
    ok = ok0 and ok1 and ok_scale
    criterion(6, "fusion degeneracies", ok, f"gamma=0 matches audio: {ok0}; gamma=1 matches visual: {ok1}; rescaling invariance on 1000 pairs: {ok_scale}")


# -- 7 ---------------------------------------------------------------------------

def test_07_overfit_fixture(criterion, visual_runs, filler_data):
    runs, elapsed = visual_runs
    parts, mcrs, reached = [], [], []
    for s in SEEDS:
        net, result = runs[s]
        first = next((r["epoch"] for r in result.history if r["train_acc"] >= 100.0), None)
        mcr = clean_report(net, filler_data[s])[0].mcr
        reached.append(first is not None and first <= 200)
        mcrs.append(mcr)
        parts.append(f"seed {s}: 100% train acc at epoch {first}, test MCR {mcr:.1f}")
    median = float(np.median(mcrs))
    ok = all(reached) and median <= 10.0 and elapsed < 7200
    criterion(7, "overfit fixture", ok, "; ".join(parts) + f"; median {median:.1f}; {elapsed / 60:.0f} min")


# -- 8 ---------------------------------------------------------------------------

def test_08_audiovisual_gain(criterion, visual_runs, audio_runs, filler_data):
    reductions, parts = [], []
    for s in SEEDS:
        rows = fused_sweep(visual_runs[0][s][0], audio_runs[0][s][0], filler_data[s], FusionConfig(0.4), LOW_SNR)
        audio = float(np.mean([r.mcr_audio for r in rows]))
        fused = float(np.mean([r.mcr_fused for r in rows]))
        red = (audio - fused) / audio if audio > 0 else 0.0
        reductions.append(red)
        parts.append(f"seed {s}: audio {audio:.1f} fused {fused:.1f} ({100 * red:.0f}%)")
    median = float(np.median(reductions))
    criterion(8, "audiovisual gain at SNR <= 0 dB", median >= 0.20, "; ".join(parts) + f"; median reduction {100 * median:.0f}%")


# -- 9 ---------------------------------------------------------------------------

def test_09_boundary_mode_ordering(criterion, confusable_data):
    medians, parts = {}, []
    for mode in ("indicator", "unused"):
        runs, _ = _train_all(_visual_spec(mode), confusable_data, dict(VISUAL_TRAIN, track_train_accuracy=False))
        mcrs = [clean_report(runs[s][0], confusable_data[s])[0].mcr for s in SEEDS]
        medians[mode] = float(np.median(mcrs))
        parts.append(f"{mode} {', '.join(f'{m:.1f}' for m in mcrs)}")
    ok = medians["indicator"] < medians["unused"]
    criterion(9, "boundary-mode ordering", ok, "; ".join(parts) + f"; medians {medians['indicator']:.1f} < {medians['unused']:.1f}")


# -- 10 --------------------------------------------------------------------------

def test_10_context_only_recognition(criterion, filler_data):
    pred, free, parts = [], [], []
    runs, _ = _train_all(_visual_spec("remove_inside"), filler_data, dict(VISUAL_TRAIN, track_train_accuracy=False))
    for s in SEEDS:
        report, _ = clean_report(runs[s][0], filler_data[s])
        split = context_split(report, filler_data[s].manifest)
        pred.append(split["predictable_mcr"])
        free.append(split["free_mcr"])
        parts.append(f"seed {s}: predictable {split['predictable_mcr']:.1f}, context-free {split['free_mcr']:.1f}")
    p, f = float(np.median(pred)), float(np.median(free))
    ok = p <= 50.0 and f >= 80.0
    criterion(10, "context-only recognition", ok, "; ".join(parts) + f"; medians {p:.1f} / {f:.1f} (chance 95)")


# -- 11 --------------------------------------------------------------------------

def test_11_determinism(criterion, filler_data, tmp_path):
    spec = ModelSpec("audiovisual", "indicator", VOCAB, visual=VISUAL, audio=AUDIO, backend=BACKEND,
                     multimodal_drop=MultimodalDropConfig())
    data = filler_data[0]
    hashes = []
    for run in range(2):
        _, result = train_model(spec, data, TrainConfig(max_epochs=2, batch_size=20, seed=3), 3, out_dir=tmp_path / f"r{run}")
        hashes.append(result.log_hash())
    logs = [(tmp_path / f"r{run}" / "train_log.jsonl").read_text().count("\n") for run in range(2)]
    criterion(11, "determinism", hashes[0] == hashes[1] and logs == [2, 2], f"log hashes {hashes[0][:12]} / {hashes[1][:12]}")


# -- 12 --------------------------------------------------------------------------

def test_12_snr_monotonicity(criterion, audio_sweeps):
    per_level = {key: float(np.median([audio_sweeps[s].by_snr[key].mcr for s in SEEDS])) for key in SWEEP_KEYS}
    values = [per_level[k] for k in SWEEP_KEYS]
    rises = [b - a for a, b in zip(values, values[1:]) if b > a]
    ok = len(rises) == 0 or (len(rises) == 1 and rises[0] <= 2.0)
    curve = ", ".join(f"{k}: {v:.1f}" for k, v in per_level.items())
    criterion(12, "SNR monotonicity", ok, f"median MCR {curve}; inversions {[round(r, 2) for r in rises]}")
