"""Optimizer, learning-rate schedule, training loop and checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .audio import Waveform, features_from_samples
from .data.io import load_sample
from .data.noise import NoiseBank, mix_at_snr, sample_train_noise
from .integration import Batch, ModelSpec, WordNet, model_logits
from .tensor import NonFiniteError, no_grad, softmax, softmax_cross_entropy, tnsr
from .visual import normalize_video

log = logging.getLogger(__name__)


class NonFiniteGradError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.param = name


class DivergenceError(FloatingPointError):
    pass


# -- optimizer ---------------------------------------------------------------

class Adam:
    def __init__(self, named_params, lr: float = 3e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.names, self.params = zip(*named_params) if named_params else ((), ())
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        grads = []
        for name, p in zip(self.names, self.params):
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradError(name)
            grads.append(g)
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def state(self) -> dict:
        return {"lr": self.lr, "betas": list(self.betas), "eps": self.eps, "step": self.step_count}


def adam_step(params, grads, state: Adam) -> None:
    """Functional form: install ``grads`` on ``params`` and take one step of ``state``."""
    for p, g in zip(params, grads):
        p.grad = np.asarray(g, dtype=p.data.dtype)
    state.step()


@dataclass
class PlateauScheduler:
    lr: float = 3e-3
    patience: int = 3
    factor: float = 0.5
    floor: float = 1e-5
    best: float = math.inf
    since_improvement: int = 0
    exhausted: bool = False

    def step(self, metric: float) -> float:
        """Record one validation result; ``exhausted`` turns on when patience runs out at the floor."""
        if metric < self.best:
            self.best = metric
            self.since_improvement = 0
        else:
            self.since_improvement += 1
            if self.since_improvement >= self.patience:
                if self.lr <= self.floor:
                    self.exhausted = True
                self.lr = max(self.lr * self.factor, self.floor)
                self.since_improvement = 0
        return self.lr


# -- datasets ----------------------------------------------------------------

@dataclass
class SplitData:
    ids: list[str]
    words: list[str]
    labels: np.ndarray
    starts: np.ndarray
    ends: np.ndarray
    frames: np.ndarray  # N x 1 x T x H x W float32, per-video normalized
    waves: np.ndarray  # N x samples float64
    _clean_spectra: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.labels)

    def clean_spectra(self) -> np.ndarray:
        if self._clean_spectra is None:
            self._clean_spectra = np.stack([features_from_samples(w) for w in self.waves])
        return self._clean_spectra

    def subset(self, index) -> "SplitData":
        index = np.asarray(index)
        spectra = None if self._clean_spectra is None else self._clean_spectra[index]
        return SplitData(
            [self.ids[i] for i in index], [self.words[i] for i in index], self.labels[index],
            self.starts[index], self.ends[index], self.frames[index], self.waves[index], spectra,
        )


def load_split(root: str | os.PathLike, split: str) -> SplitData:
    manifest = json.loads((Path(root) / "manifest.json").read_text())
    entries = [e for e in manifest["samples"] if e["split"] == split]
    if not entries:
        raise ValueError(f"no {split!r} samples under {root}")
    samples = [load_sample(Path(root) / e["path"]) for e in entries]
    frames = np.stack([normalize_video(s.frames[:, 0])[None] for s in samples])
    return SplitData(
        ids=[s.id for s in samples],
        words=[s.word for s in samples],
        labels=np.array([s.label for s in samples], dtype=np.int64),
        starts=np.array([s.boundaries.start_frame for s in samples], dtype=np.int64),
        ends=np.array([s.boundaries.end_frame for s in samples], dtype=np.int64),
        frames=frames.astype(np.float32),
        waves=np.stack([s.waveform.samples for s in samples]),
    )


def make_batch(data: SplitData, index, spec: ModelSpec, spectra: np.ndarray | None = None, visual_features=None) -> Batch:
    index = np.asarray(index)
    needs_audio = spec.kind in ("audio", "audiovisual")
    needs_video = spec.kind in ("visual", "audiovisual")
    if needs_audio and spectra is None:
        spectra = data.clean_spectra()
    return Batch(
        labels=data.labels[index],
        starts=data.starts[index],
        ends=data.ends[index],
        frames=data.frames[index] if needs_video and visual_features is None else None,
        spectra=spectra[index] if needs_audio else None,
        visual_features=None if visual_features is None else visual_features[index],
    )


def noisy_spectra(data: SplitData, bank: NoiseBank, rng: np.random.Generator) -> np.ndarray:
    """Per-sample on-the-fly training noise, then log-spectral features."""
    out = []
    for w in data.waves:
        spec, noise = sample_train_noise(bank, rng, len(w))
        mixed = mix_at_snr(Waveform(w), noise, spec.snr_db).samples
        out.append(features_from_samples(mixed))
    return np.stack(out)


# -- evaluation helpers ------------------------------------------------------

def posteriors(net: WordNet, data: SplitData, spectra: np.ndarray | None = None, batch_size: int = 32, visual_features=None) -> np.ndarray:
    out = []
    with no_grad():
        for lo in range(0, len(data), batch_size):
            idx = np.arange(lo, min(lo + batch_size, len(data)))
            batch = make_batch(data, idx, net.spec, spectra, visual_features)
            out.append(softmax(model_logits(net, batch, None, "eval").data.astype(np.float64)))
    return np.concatenate(out)


def mcr_of(post: np.ndarray, labels: np.ndarray) -> float:
    return 100.0 * float(np.mean(np.argmax(post, axis=1) != labels))


# -- training loop -----------------------------------------------------------

@dataclass
class TrainConfig:
    max_epochs: int = 300
    batch_size: int = 32
    lr: float = 3e-3
    patience: int = 3
    factor: float = 0.5
    lr_floor: float = 1e-5
    noise: str = "auto"  # auto | on | off
    stop_at_train_accuracy: float | None = None
    track_train_accuracy: bool = False
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    history: list[dict]
    best_epoch: int
    best_val_mcr: float
    stopped: str

    def log_hash(self) -> str:
        return training_log_hash(self.history)


def training_log_hash(history: list[dict]) -> str:
    """SHA-256 over the deterministic fields of the log (wall time excluded)."""
    keys = ("epoch", "loss", "val_mcr", "lr", "train_acc")
    rows = [{k: r[k] for k in keys if k in r} for r in history]
    return hashlib.sha256(json.dumps(rows, sort_keys=True).encode()).hexdigest()


def train(
    net: WordNet,
    train_data: SplitData,
    val_data: SplitData,
    cfg: TrainConfig = TrainConfig(),
    bank: NoiseBank | None = None,
    out_dir: str | os.PathLike | None = None,
    params=None,
    visual_features: tuple[np.ndarray, np.ndarray] | None = None,
) -> TrainResult:
    """Minibatch Adam with a plateau schedule on validation MCR.

    The parameters with the lowest validation MCR are restored at the end
    and, when ``out_dir`` is given, written there as the checkpoint. ``params``
    restricts the optimized set (e.g. the backend only, with
    ``visual_features`` holding stored frontend outputs for train and val).
    """
    spec = net.spec
    use_noise = cfg.noise == "on" or (cfg.noise == "auto" and spec.kind != "visual")
    if use_noise and bank is None:
        raise ValueError("noise augmentation requested without a noise bank")
    ss = np.random.SeedSequence([cfg.seed, 3])
    shuffle_rng, drop_rng, noise_rng = (np.random.default_rng(s) for s in ss.spawn(3))
    named = list(net.named_parameters()) if params is None else list(params)
    opt = Adam(named, lr=cfg.lr)
    sched = PlateauScheduler(cfg.lr, cfg.patience, cfg.factor, cfg.lr_floor)
    train_feats, val_feats = visual_features or (None, None)
    val_spectra = val_data.clean_spectra() if spec.kind != "visual" else None
    history: list[dict] = []
    best_state, best_epoch, best_mcr = net.state_dict(), 0, math.inf
    stopped = "max_epochs"
    log_fh = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        log_fh = open(Path(out_dir) / "train_log.jsonl", "w")
    t0 = time.perf_counter()
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            spectra = None
            if spec.kind != "visual":
                spectra = noisy_spectra(train_data, bank, noise_rng) if use_noise else train_data.clean_spectra()
            order = shuffle_rng.permutation(len(train_data))
            total, count = 0.0, 0
            for lo in range(0, len(order), cfg.batch_size):
                idx = order[lo : lo + cfg.batch_size]
                batch = make_batch(train_data, idx, spec, spectra, train_feats)
                try:
                    logits = model_logits(net, batch, drop_rng, "train")
                    loss, _ = softmax_cross_entropy(logits, batch.labels)
                    value = float(loss.data)
                    if not math.isfinite(value):
                        raise DivergenceError(f"loss became {value}")
                    opt.zero_grad()
                    loss.backward()
                except (NonFiniteError, DivergenceError) as exc:
                    raise DivergenceError(f"epoch {epoch}: {exc}") from exc
                opt.step()
                total += value * len(idx)
                count += len(idx)
            val_mcr = mcr_of(posteriors(net, val_data, val_spectra, visual_features=val_feats), val_data.labels)
            record = {"epoch": epoch, "loss": round(total / count, 10), "val_mcr": round(val_mcr, 10), "lr": opt.lr}
            if cfg.track_train_accuracy or cfg.stop_at_train_accuracy is not None:
                clean = train_data.clean_spectra() if spec.kind != "visual" else None
                acc = 100.0 - mcr_of(posteriors(net, train_data, clean, visual_features=train_feats), train_data.labels)
                record["train_acc"] = round(acc, 10)
            record["wall_s"] = round(time.perf_counter() - t0, 3)
            history.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            log.info("epoch %d loss %.4f val_mcr %.2f lr %.2e", epoch, record["loss"], val_mcr, opt.lr)
            if val_mcr < best_mcr or (val_mcr == best_mcr and record["loss"] < history[best_epoch - 1]["loss"]):
                best_state, best_epoch, best_mcr = net.state_dict(), epoch, val_mcr
            opt.lr = sched.step(val_mcr)
            if sched.exhausted:
                stopped = "lr_floor"
                break
            if cfg.stop_at_train_accuracy is not None and record["train_acc"] >= cfg.stop_at_train_accuracy:
                stopped = "train_accuracy"
                break
    except (DivergenceError, NonFiniteGradError) as exc:
        stopped = f"diverged: {exc}"
        log.error("training aborted: %s; keeping the last good parameters", exc)
    finally:
        if log_fh:
            log_fh.close()
    net.load_state_dict(best_state)
    result = TrainResult(history, best_epoch, best_mcr, stopped)
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "checkpoint", net, opt, sched, {"best_epoch": best_epoch, "stopped": stopped})
    return result


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(directory, net: WordNet, opt: Adam | None = None, sched: PlateauScheduler | None = None, extra: dict | None = None) -> None:
    from .config import spec_to_dict

    d = Path(directory)
    (d / "params").mkdir(parents=True, exist_ok=True)
    entries = []
    for name, arr in net.state_dict().items():
        fname = f"params/{name}.tnsr"
        tnsr.save(d / fname, np.ascontiguousarray(arr))
        entries.append({"name": name, "file": fname, "shape": list(arr.shape), "dtype": str(arr.dtype)})
    manifest = {"model_spec": spec_to_dict(net.spec), "parameters": entries, "extra": extra or {}}
    if opt is not None:
        (d / "optim").mkdir(exist_ok=True)
        for i, name in enumerate(opt.names):
            tnsr.save(d / f"optim/{name}.m.tnsr", opt.m[i])
            tnsr.save(d / f"optim/{name}.v.tnsr", opt.v[i])
        manifest["optimizer"] = opt.state()
    if sched is not None:
        manifest["scheduler"] = {k: (None if v == math.inf else v) for k, v in asdict(sched).items()}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


class CheckpointMismatch(ValueError):
    pass


def load_checkpoint(directory, spec: ModelSpec | None = None) -> WordNet:
    """Rebuild the network described by the checkpoint and load its parameters.

    When ``spec`` is given it must match the stored model spec.
    """
    from .config import spec_from_dict, spec_to_dict

    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    stored = spec_from_dict(manifest["model_spec"])
    if spec is not None and spec_to_dict(spec) != spec_to_dict(stored):
        raise CheckpointMismatch("checkpoint was trained with a different model spec")
    dtype = np.dtype(manifest["parameters"][0]["dtype"]) if manifest["parameters"] else np.float32
    net = WordNet(stored, np.random.default_rng(0), dtype)
    state = {e["name"]: tnsr.load(d / e["file"]) for e in manifest["parameters"]}
    try:
        net.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointMismatch(str(exc)) from exc
    return net
