"""JSON run configuration: one flat section per module, unknown keys rejected."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .audio import AudioFrontendConfig
from .backend import BiLstmBackendConfig, TConvBackendConfig
from .data.wordbank import WordbankConfig
from .integration import FusionConfig, ModelSpec, MultimodalDropConfig
from .train import TrainConfig
from .visual import ResNetConfig


class ConfigError(ValueError):
    pass


def _build(cls, data: dict | None, section: str):
    if data is None:
        return None
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be an object")
    names = {f.name for f in fields(cls) if not f.name.startswith("_")}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def spec_to_dict(spec: ModelSpec) -> dict:
    return {
        "kind": spec.kind,
        "boundary_mode": spec.boundary_mode,
        "vocab_size": spec.vocab_size,
        "backend_kind": spec.backend_kind,
        "visual": spec.visual.to_dict() if spec.visual else None,
        "audio": spec.audio.to_dict() if spec.audio else None,
        "backend": spec.backend.to_dict(),
        "tconv": spec.tconv.to_dict(),
        "multimodal_drop": asdict(spec.multimodal_drop) if spec.multimodal_drop else None,
    }


def spec_from_dict(d: dict) -> ModelSpec:
    top = {"kind", "boundary_mode", "vocab_size", "backend_kind", "visual", "audio", "backend", "tconv", "multimodal_drop"}
    unknown = sorted(set(d) - top)
    if unknown:
        raise ConfigError(f"unknown keys in 'model': {unknown}")
    spec = ModelSpec(
        kind=d.get("kind", "visual"),
        boundary_mode=d.get("boundary_mode", "indicator"),
        vocab_size=d.get("vocab_size", 500),
        backend_kind=d.get("backend_kind", "bilstm"),
        visual=_build(ResNetConfig, d.get("visual"), "model.visual"),
        audio=_build(AudioFrontendConfig, d.get("audio"), "model.audio"),
        backend=_build(BiLstmBackendConfig, d.get("backend", {}), "model.backend"),
        tconv=_build(TConvBackendConfig, d.get("tconv", {}), "model.tconv"),
        multimodal_drop=_build(MultimodalDropConfig, d.get("multimodal_drop"), "model.multimodal_drop"),
    )
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return spec


@dataclass
class NoiseConfig:
    bank_seed: int = 0
    files_per_category: int = 3
    bank_dir: str | None = None
    test_seed: int = 0


@dataclass
class RunConfig:
    seed: int = 0
    data_root: str = "data"
    out: str = "runs"
    wordbank: WordbankConfig = field(default_factory=WordbankConfig)
    model: ModelSpec | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "data_root": self.data_root,
            "out": self.out,
            "wordbank": self.wordbank.to_dict(),
            "model": spec_to_dict(self.model) if self.model else None,
            "train": self.train.to_dict(),
            "fusion": asdict(self.fusion),
            "noise": asdict(self.noise),
        }


SECTIONS = {"seed", "data_root", "out", "wordbank", "model", "train", "fusion", "noise"}


def parse_config(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(d) - SECTIONS)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {unknown}")
    model = d.get("model")
    return RunConfig(
        seed=int(d.get("seed", 0)),
        data_root=str(d.get("data_root", "data")),
        out=str(d.get("out", "runs")),
        wordbank=_build(WordbankConfig, d.get("wordbank", {}), "wordbank"),
        model=spec_from_dict(model) if model is not None else None,
        train=_build(TrainConfig, d.get("train", {}), "train"),
        fusion=_build(FusionConfig, d.get("fusion", {}), "fusion"),
        noise=_build(NoiseConfig, d.get("noise", {}), "noise"),
    )


def load_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return parse_config({})
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(raw)
