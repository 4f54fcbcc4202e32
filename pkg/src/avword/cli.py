"""Command-line entry point: ``avword <command> [flags]``.

Exit codes: 0 success, 2 config error, 3 artifact mismatch, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import json
import logging
import os
import subprocess
import sys
from pathlib import Path

from filelock import FileLock, Timeout
from threadpoolctl import threadpool_limits

from . import __version__
from .backend import BoundaryMode
from .checks import BACKEND_CHAIN, GRAD_TOLERANCE, VISUAL_CHAIN, full_size_forward, gradient_suite, shape_chains
from .config import ConfigError, RunConfig, load_config
from .evaluate import SWEEP_KEYS, confusion_pairs, context_only_table
from .integration import FusionConfig
from .pipeline import (
    ArtifactError,
    clean_report,
    context_split,
    fused_sweep,
    generate_dataset,
    load_dataset,
    sweep,
    train_model,
)
from .tensor import tnsr
from .tensor.core import NonFiniteError
from .tensor.tnsr import TnsrFormatError
from .train import CheckpointMismatch, load_checkpoint

log = logging.getLogger("avword")

EXIT_OK, EXIT_CONFIG, EXIT_ARTIFACT, EXIT_NUMERIC = 0, 2, 3, 4
LOCK_NAME = ".avword.lock"


def version_string() -> str:
    """``avword <version> (<git describe>)``; the describe part falls back to "untracked"."""
    try:
        proc = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=10,
        )
        described = proc.stdout.strip() if proc.returncode == 0 else ""
    except (OSError, subprocess.SubprocessError):
        described = ""
    return f"avword {__version__} ({described or 'untracked'})"


def parse_snr_list(text: str | None) -> list[str] | None:
    if text is None:
        return None
    keys = [k.strip() for k in text.split(",") if k.strip()]
    if not keys:
        raise ConfigError("--snr needs at least one value")
    out = []
    for k in keys:
        key = "clean" if k.lower() in ("clean", "inf") else k
        if key != "clean":
            try:
                key = str(int(float(key)))
            except ValueError:
                raise ConfigError(f"--snr value {k!r} is not a number") from None
        if key not in SWEEP_KEYS:
            raise ConfigError(f"--snr {k} is not a test level; choose from {','.join(SWEEP_KEYS)}")
        out.append(key)
    return out


def thread_cap():
    raw = os.environ.get("AVWORD_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"AVWORD_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"AVWORD_THREADS must be a positive integer, got {raw!r}")
    return threadpool_limits(limits=n)


@contextlib.contextmanager
def output_dir(path: Path, command: str, cfg: RunConfig, args: argparse.Namespace):
    """Create and lock the output directory, then write the config echo and version."""
    path.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(path / LOCK_NAME))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise ArtifactError(f"output directory {path} is locked by another run") from None
    try:
        version = version_string()
        flags = {k: v for k, v in vars(args).items() if k not in ("func", "command") and v is not None}
        echo = {"command": command, "version": version, "flags": flags, "config": cfg.to_dict()}
        (path / "config.json").write_text(json.dumps(echo, indent=1, sort_keys=True, default=str))
        (path / "VERSION").write_text(version + "\n")
        yield path
    finally:
        lock.release()


def _out(args, cfg: RunConfig, command: str) -> Path:
    return Path(args.out) if args.out else Path(cfg.out) / command


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "data", None):
        cfg.data_root = args.data
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
    return cfg


def _model_spec(cfg: RunConfig, mode: str | None):
    if cfg.model is None:
        raise ConfigError("config has no 'model' section")
    spec = cfg.model
    if mode is not None:
        spec = dataclasses.replace(spec, boundary_mode=mode)
        try:
            spec.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return spec


def _load_net(path, cfg: RunConfig, mode: str | None = None):
    if not Path(path, "manifest.json").exists():
        raise ArtifactError(f"no checkpoint at {path}")
    net = load_checkpoint(path, cfg.model)
    if mode is not None and net.spec.boundary_mode != mode:
        raise CheckpointMismatch(f"checkpoint uses boundary mode {net.spec.boundary_mode}, not {mode}")
    return net


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True))


# -- commands ----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg.wordbank = dataclasses.replace(cfg.wordbank, seed=args.seed)
    root = Path(args.out) if args.out else Path(cfg.data_root)
    with output_dir(root, "gen-data", cfg, args):
        n = cfg.noise
        info = generate_dataset(cfg.wordbank, root, n.bank_seed, n.files_per_category, n.bank_dir, n.test_seed)
    print(f"wrote {info['samples']} samples to {root}")
    print(f"content hash {info['content_hash']}")
    print(f"noise manifest hash {info['noise_sets_hash']}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    spec = _model_spec(cfg, args.mode)
    cfg.model = spec
    out = _out(args, cfg, "train")
    data = load_dataset(cfg.data_root)
    with output_dir(out, "train", cfg, args):
        net, result = train_model(spec, data, cfg.train, cfg.seed, out_dir=out)
        report, _ = clean_report(net, data)
        summary = {
            "best_epoch": result.best_epoch,
            "best_val_mcr": result.best_val_mcr,
            "stopped": result.stopped,
            "epochs": len(result.history),
            "log_hash": result.log_hash(),
            "test_mcr": report.mcr,
        }
        _write_json(out / "summary.json", summary)
    print(f"trained {len(result.history)} epochs ({result.stopped}); best val MCR {result.best_val_mcr:.2f} at epoch {result.best_epoch}")
    print(f"clean test MCR {report.mcr:.2f}; checkpoint {out / 'checkpoint'}")
    return EXIT_NUMERIC if result.stopped.startswith("diverged") else EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    keys = parse_snr_list(args.snr)
    net = _load_net(args.checkpoint, cfg, args.mode)
    data = load_dataset(cfg.data_root)
    out = _out(args, cfg, "eval")
    with output_dir(out, "eval", cfg, args):
        report, post = clean_report(net, data)
        _write_json(out / "report.json", report.to_json())
        tnsr.save(out / "posteriors.tnsr", post)
        words = data.words
        _write_csv(out / "per_word.csv", ["word", "mcr"], [(w, f"{m:.4f}") for w, m in report.per_word_mcr().items()])
        _write_csv(
            out / "predictions.csv",
            ["id", "label", "predicted"],
            [(i, words[l], words[p]) for i, l, p in zip(data.test.ids, data.test.labels, report.predictions)],
        )
        if keys:
            rep = sweep(net, data, keys)
            (out / "sweep.csv").write_text(rep.to_csv())
    print(f"clean test MCR {report.mcr:.2f} ({report.correct}/{report.total})")
    return EXIT_OK


def cmd_fuse(args) -> int:
    cfg = _config(args)
    gamma = cfg.fusion.gamma if args.gamma is None else args.gamma
    try:
        fusion = FusionConfig(gamma)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    keys = parse_snr_list(args.snr) or ["clean"]
    cfg.model = None  # two different networks; each checkpoint carries its own spec
    visual = _load_net(args.visual, cfg)
    audio = _load_net(args.audio, cfg)
    data = load_dataset(cfg.data_root)
    out = _out(args, cfg, "fuse")
    with output_dir(out, "fuse", cfg, args):
        rows = fused_sweep(visual, audio, data, fusion, keys)
        _write_csv(
            out / "fusion.csv",
            ["snr_db", "mcr_visual", "mcr_audio", "mcr_fused"],
            [(r.snr, f"{r.mcr_visual:.4f}", f"{r.mcr_audio:.4f}", f"{r.mcr_fused:.4f}") for r in rows],
        )
        _write_json(out / "fusion.json", {
            "gamma": gamma,
            "rows": [r.to_json() for r in rows],
            "decisions": {r.snr: {"fused": r.fused_decisions.tolist(), "audio": r.audio_decisions.tolist()} for r in rows},
        })
    for r in rows:
        print(f"snr {r.snr:>5}: visual {r.mcr_visual:6.2f}  audio {r.mcr_audio:6.2f}  fused {r.mcr_fused:6.2f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    keys = parse_snr_list(args.snr)
    net = _load_net(args.checkpoint, cfg)
    data = load_dataset(cfg.data_root)
    out = _out(args, cfg, "sweep-snr")
    with output_dir(out, "sweep-snr", cfg, args):
        rep = sweep(net, data, keys)
        (out / "sweep.csv").write_text(rep.to_csv())
        _write_csv(out / "categories.csv", ["category", "mcr"], [(r["category"], f"{r['mcr']:.4f}") for r in rep.category_rows()])
        _write_json(out / "sweep.json", {"rows": rep.rows(), "categories": rep.category_rows()})
    for row in rep.rows():
        print(f"snr {row['snr']:>5}: MCR {row['mcr']:6.2f}")
    return EXIT_OK


def cmd_confusions(args) -> int:
    cfg = _config(args)
    net = _load_net(args.checkpoint, cfg)
    data = load_dataset(cfg.data_root)
    out = _out(args, cfg, "analyze-confusions")
    homophones = {tuple(sorted(p)) for p in data.manifest.get("homophones", [])}
    with output_dir(out, "analyze-confusions", cfg, args):
        report, _ = clean_report(net, data)
        pairs = confusion_pairs(report, args.top_k)
        _write_csv(
            out / "confusions.csv",
            ["target", "estimate", "count", "homophone"],
            [(t, e, n, int(tuple(sorted((t, e))) in homophones)) for t, e, n in pairs],
        )
    for t, e, n in pairs:
        print(f"{t} -> {e}: {n}")
    return EXIT_OK


def cmd_context_eval(args) -> int:
    cfg = _config(args)
    mode = args.mode or BoundaryMode.REMOVE_INSIDE.value
    data = load_dataset(cfg.data_root)
    out = _out(args, cfg, "context-eval")
    if args.checkpoint:
        net = _load_net(args.checkpoint, cfg, mode)
    else:
        cfg.model = _model_spec(cfg, mode)
    with output_dir(out, "context-eval", cfg, args):
        if not args.checkpoint:
            net, _ = train_model(cfg.model, data, cfg.train, cfg.seed, out_dir=out)
        report, _ = clean_report(net, data)
        split = context_split(report, data.manifest)
        _write_json(out / "context.json", {"mcr": report.mcr, **split})
        _write_csv(out / "per_word.csv", ["word", "mcr", "predictable"], [(r["word"], f"{r['mcr']:.4f}", int(r["predictable"])) for r in split["per_word"]])
        _write_csv(out / "recognized.csv", ["word", "mcr"], [(w, f"{m:.4f}") for w, m in context_only_table(report)])
    print(f"context-only MCR: predictable words {split['predictable_mcr']:.2f}, context-free words {split['free_mcr']:.2f}")
    return EXIT_OK


def cmd_check(args) -> int:
    cfg = _config(args)
    run_shapes = args.shapes or not (args.grad or args.forward)
    out = _out(args, cfg, "check")
    result, failed = {}, []
    with output_dir(out, "check", cfg, args):
        if run_shapes:
            chains = shape_chains()
            for name, got, want in (("visual", chains["visual"], VISUAL_CHAIN), ("backend", chains["backend"], BACKEND_CHAIN)):
                ok = got == want
                print(f"{name} chain: {' -> '.join('x'.join(map(str, s)) for s in got)} [{'ok' if ok else 'MISMATCH'}]")
                if not ok:
                    failed.append(f"{name} chain")
            result["shapes"] = {k: [list(s) for s in v] for k, v in chains.items()}
        if args.forward:
            shape, seconds = full_size_forward()
            print(f"112x112 forward, 29 frames: output {shape} in {seconds:.1f}s")
            result["forward"] = {"shape": list(shape), "seconds": seconds}
        if args.grad:
            errors = gradient_suite(args.seeds)
            for name, errs in errors.items():
                worst = max(errs)
                ok = worst < GRAD_TOLERANCE
                print(f"grad {name}: max rel error {worst:.2e} over {len(errs)} seeds [{'ok' if ok else 'FAIL'}]")
                if not ok:
                    failed.append(f"grad {name}")
            result["grad"] = {k: max(v) for k, v in errors.items()}
        result["failed"] = failed
        _write_json(out / "check.json", result)
    if failed:
        print(f"failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avword", description="Audiovisual word recognition toolkit.")
    parser.add_argument("--version", action="version", version=f"avword {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_text, seed=True):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", metavar="PATH", help="JSON run configuration")
        p.add_argument("--out", metavar="DIR", help="output directory")
        p.add_argument("--data", metavar="DIR", help="dataset root (overrides data_root)")
        p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
        if seed:
            p.add_argument("--seed", type=int, metavar="N", help="override the run seed")
        p.set_defaults(func=func)
        return p

    modes = [m.value for m in BoundaryMode]
    command("gen-data", cmd_gen_data, "generate the synthetic wordbank, noise bank and test noise manifests")
    p = command("train", cmd_train, "train the configured model")
    p.add_argument("--mode", choices=modes, help="override the boundary mode")
    p = command("eval", cmd_eval, "clean test report for a checkpoint", seed=False)
    p.add_argument("--checkpoint", required=True, metavar="DIR")
    p.add_argument("--mode", choices=modes, help="require this boundary mode")
    p.add_argument("--snr", metavar="LIST", help="also score these test levels, e.g. --snr=-10,0,clean")
    p = command("fuse", cmd_fuse, "late fusion of a visual and an audio checkpoint", seed=False)
    p.add_argument("--visual", required=True, metavar="DIR")
    p.add_argument("--audio", required=True, metavar="DIR")
    p.add_argument("--gamma", type=float, metavar="F", help="visual weight in [0, 1]")
    p.add_argument("--snr", metavar="LIST", help="test levels to fuse at (default clean)")
    p = command("sweep-snr", cmd_sweep, "MCR per SNR level and noise category", seed=False)
    p.add_argument("--checkpoint", required=True, metavar="DIR")
    p.add_argument("--snr", metavar="LIST", help="subset of levels (default all)")
    p = command("analyze-confusions", cmd_confusions, "most frequent word confusions", seed=False)
    p.add_argument("--checkpoint", required=True, metavar="DIR")
    p.add_argument("--top-k", type=int, default=10)
    p = command("context-eval", cmd_context_eval, "train and score with the target word removed")
    p.add_argument("--checkpoint", metavar="DIR", help="score an existing checkpoint instead of training")
    p.add_argument("--mode", choices=modes, help="boundary mode (default remove_inside)")
    p = command("check", cmd_check, "dataset-free self checks", seed=False)
    p.add_argument("--shapes", action="store_true", help="protocol-size shape chains (default)")
    p.add_argument("--grad", action="store_true", help="finite-difference gradient suite")
    p.add_argument("--forward", action="store_true", help="time one full-size frontend forward pass")
    p.add_argument("--seeds", type=int, default=20, help="random seeds per gradient case")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        with thread_cap():
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointMismatch, ArtifactError, TnsrFormatError, FileNotFoundError) as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except (FloatingPointError, NonFiniteError, AssertionError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
