"""Command-line entry point: ``mimicse <command> ...``.

Commands: ``synth``, ``train-am``, ``train-enh``, ``eval`` and
``compare-features``. Exit codes: 0 success, 2 configuration or validation
error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FrozenModelError, NumericalError, ValidationError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

log = logging.getLogger("mimicse")


@dataclass
class CommandResult:
    exit_code: int = EXIT_OK
    artifacts: dict = field(default_factory=dict)
    summary: str = ""


def _read_mapping(path) -> dict:
    import yaml

    try:
        raw = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML/JSON: {exc}") from exc
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return raw


def cmd_synth(args) -> CommandResult:
    from .corpus import CorpusSpec, corpus_hash, load_corpus, synth_corpus

    raw = _read_mapping(args.config) if args.config else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    spec = CorpusSpec.from_dict(raw)
    if args.out is None:
        raise ConfigError("--out is required")
    manifest = synth_corpus(spec, args.out)
    splits = load_corpus(manifest, spec.stft)
    n_frames = sum(len(u.labels) for s in splits.values() for u in s)
    summary = "\n".join([
        f"manifest: {manifest}",
        f"corpus hash: {corpus_hash(manifest)}",
        "utterances: " + ", ".join(f"{k} {len(v)}" for k, v in splits.items()),
        f"frames: {n_frames}  senones: {spec.n_senones}  channels: {spec.n_channels}",
    ])
    return CommandResult(EXIT_OK, {"manifest": str(manifest)}, summary)


def cmd_train_am(args) -> CommandResult:
    from .acoustic_model import AmConfig, AmSchedule, fingerprint, save_am, train_am
    from .corpus import load_corpus
    from .dsp import StftConfig

    raw = _read_mapping(args.config) if args.config else {}
    unknown = set(raw) - {"am", "schedule", "stft", "corpus"}
    if unknown:
        raise ConfigError(f"unknown AM config sections: {sorted(unknown)}")
    try:
        am_cfg = AmConfig(**raw.get("am", {}))
        schedule = AmSchedule(**{**raw.get("schedule", {}), "preset": args.preset, "seed": args.seed})
        stft_cfg = StftConfig(**raw.get("stft", {}))
    except TypeError as exc:
        raise ConfigError(f"invalid AM config: {exc}") from exc
    manifest = args.corpus or raw.get("corpus")
    if not manifest:
        raise ConfigError("a corpus manifest is required (--corpus)")
    if args.out is None:
        raise ConfigError("--out is required")
    splits = load_corpus(manifest, stft_cfg)
    utts = [(u.utt_id, u.clean, u.labels) for u in splits["train"] if u.clean is not None]
    valid = [(u.utt_id, u.clean, u.labels) for u in splits.get("valid", []) if u.clean is not None]
    if not utts:
        raise DataError("no clean training utterances in the corpus")
    model, history = train_am(utts, am_cfg, schedule, stft_cfg, valid or None)
    out = Path(args.out)
    path = save_am(out if out.suffix else out / f"am_{args.preset}.pt", model, history, stft_cfg)
    last = history.epochs[-1] if history.epochs else {}
    best = next((e for e in history.epochs if e["epoch"] == history.best_epoch), last)
    lines = [f"epochs: {len(history.epochs)}"]
    if best:
        lines.append(f"clean frame accuracy (valid): {best['valid_accuracy']:.3f}")
    lines += [f"checkpoint: {path}", f"fingerprint: {fingerprint(model)}"]
    return CommandResult(EXIT_OK, {"checkpoint": str(path)}, "\n".join(lines))


def cmd_train_enh(args) -> CommandResult:
    from .metrics import format_table
    from .trainer import load_config, run_experiment

    cfg = load_config(args.config)
    cfg.optimizer.seed = args.seed
    if args.out is None:
        raise ConfigError("--out is required")
    result = run_experiment(cfg, args.out, quiet=args.quiet)
    lines = [format_table([("Noisy speech", result.noisy_report), (cfg.mode, result.report)])]
    if cfg.am_frozen and cfg.uses_am:
        verdict = "VERIFIED" if result.log.final["am_frozen_verified"] else "FAILED"
        lines.append(f"AM frozen: {verdict}")
    lines.append(f"enhancer fingerprint: {result.enhancer_fingerprint}")
    code = EXIT_OK
    if cfg.am_frozen and cfg.uses_am and not result.log.final["am_frozen_verified"]:
        code = EXIT_NUMERICAL
    return CommandResult(code, {"checkpoint": str(result.checkpoint), "out": str(result.out_dir)},
                         "\n".join(lines))


def cmd_eval(args) -> CommandResult:
    from .acoustic_model import freeze, load_am
    from .corpus import load_corpus
    from .dsp import StftConfig
    from .enhancer import load_enhancer
    from .metrics import format_table
    from .trainer import evaluate

    if bool(args.checkpoint) == bool(args.passthrough):
        raise ConfigError("give exactly one of --checkpoint or --passthrough")
    stft_cfg = StftConfig()
    splits = load_corpus(args.manifest, stft_cfg)
    records = splits.get(args.split, [])
    if not records:
        raise DataError(f"split {args.split!r} is empty")
    model = None if args.passthrough else load_enhancer(args.checkpoint)
    am = freeze(load_am(args.am)) if args.am else None
    report = evaluate(model, records, args.channel, stft_cfg, am, args.out)
    label = "Noisy speech" if model is None else "Enhanced"
    artifacts = {}
    if args.out:
        artifacts["report"] = str(Path(args.out) / "report.json")
    lines = [format_table([(label, report)])]
    if args.per_utterance:
        lines += [f"  {s.utt_id}  {s.si_sdr_db:6.1f}  {100 * s.estoi:6.1f}" for s in report.per_utterance]
    return CommandResult(EXIT_OK, artifacts, "\n".join(lines))


def _parse_source(text):
    label, sep, path = text.partition("=")
    if not sep or not label or not path:
        raise ConfigError(f"sources are LABEL=PATH, got {text!r}")
    return label, path


def compare_features(sources: dict, out_dir, utt_id: str = "utt", sample_rate: int = 16000,
                     n_mels: int = 40, segment=None) -> dict:
    """Log-mel grids for several equal-length waveforms plus a stacked multi-panel image.

    Writes ``<utt_id>_logmel.npz`` (one array per source, in order) and
    ``<utt_id>_logmel.png``. ``segment`` = ``(first_frame, n_frames)`` limits
    the plotted region; the saved grids always cover the whole utterance.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import torch

    from .dsp import StftConfig, log_mel, magnitude, stft

    if not sources:
        raise ValidationError("no sources to compare")
    lengths = {k: len(v) for k, v in sources.items()}
    if len(set(lengths.values())) != 1:
        raise ValidationError(f"sources differ in length: {lengths}")
    cfg = StftConfig()
    grids = {}
    for label, wav in sources.items():
        mag = magnitude(stft(torch.as_tensor(np.asarray(wav, dtype=np.float64)), cfg))
        grids[label] = log_mel(mag, cfg, sample_rate, n_mels=n_mels).numpy()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    npz = out_dir / f"{utt_id}_logmel.npz"
    np.savez(npz, order=np.array(list(grids)), **grids)

    first, count = segment or (0, None)
    lo = min(g.min() for g in grids.values())
    hi = max(g.max() for g in grids.values())
    fig, axes = plt.subplots(len(grids), 1, figsize=(8, 1.8 * len(grids)), sharex=True, squeeze=False)
    for ax, (label, g) in zip(axes[:, 0], grids.items()):
        part = g[first:None if count is None else first + count]
        ax.imshow(part.T, origin="lower", aspect="auto", vmin=lo, vmax=hi, cmap="magma",
                  extent=(first, first + len(part), 0, n_mels))
        ax.set_ylabel(label)
    axes[-1, 0].set_xlabel("frame")
    fig.suptitle(f"log-mel filterbank features, {utt_id}")
    fig.tight_layout()
    png = out_dir / f"{utt_id}_logmel.png"
    fig.savefig(png, dpi=100)
    plt.close(fig)

    ref = next(iter(grids))
    diffs = {k: float(np.max(np.abs(g - grids[ref]))) for k, g in grids.items()}
    return {"npz": npz, "png": png, "linf_vs_first": diffs, "order": list(grids)}


def cmd_compare_features(args) -> CommandResult:
    from .dsp import read_wav

    sources = {}
    rate = None
    if args.manifest:
        from .corpus import ingest_external
        from .dsp import StftConfig
        records, _ = ingest_external(args.manifest, StftConfig())
        rec = next((r for r in records if r.utt_id == args.utt_id), None)
        if rec is None:
            raise DataError(f"utterance {args.utt_id!r} not found in {args.manifest}", [args.utt_id])
        rate = rec.sample_rate
        sources["noisy"] = rec.noisy[args.channel]
        if rec.clean is not None:
            sources["clean"] = rec.clean
        if args.enhancer:
            from .enhancer import enhance, load_enhancer
            for path in args.enhancer:
                sources[Path(path).stem] = enhance(rec.noisy[args.channel], load_enhancer(path)).numpy()
    for text in args.source or []:
        label, path = _parse_source(text)
        try:
            wav = read_wav(path, expected_rate=rate)
        except FileNotFoundError as exc:
            raise DataError(f"missing audio file {path}", [path]) from exc
        rate = wav.sample_rate
        sources[label] = wav.samples
    if not sources:
        raise ConfigError("nothing to compare: give --manifest/--utt-id or --source LABEL=PATH")
    lengths = {k: len(v) for k, v in sources.items()}
    if len(set(lengths.values())) != 1:
        raise DataError(f"sources differ in length: {lengths}")
    if args.out is None:
        raise ConfigError("--out is required")
    segment = (args.start, args.frames) if args.frames else None
    res = compare_features(sources, args.out, args.utt_id or "utt", rate or 16000, segment=segment)
    lines = [f"grids: {res['npz']}", f"image: {res['png']}"]
    first = res["order"][0]
    lines += [f"max |{k} - {first}|: {v:.4f}" for k, v in res["linf_vs_first"].items() if k != first]
    return CommandResult(EXIT_OK, {"npz": str(res["npz"]), "png": str(res["png"])}, "\n".join(lines))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON configuration file")
    common.add_argument("--out", help="output path")
    common.add_argument("--quiet", action="store_true", help="only print the final summary")

    parser = argparse.ArgumentParser(prog="mimicse", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate the synthetic corpus")
    p.add_argument("--seed", type=int, help="override the corpus seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-am", parents=[common], help="train the senone acoustic model")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--corpus", help="corpus manifest")
    p.add_argument("--preset", choices=("light", "converged"), default="converged")
    p.set_defaults(func=cmd_train_am)

    p = sub.add_parser("train-enh", parents=[common], help="train an enhancer from an experiment config")
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_train_enh)

    p = sub.add_parser("eval", parents=[common], help="score an enhancer or the noisy input")
    p.add_argument("--seed", type=int, help="accepted for symmetry; evaluation is deterministic")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--passthrough", action="store_true")
    p.add_argument("--am", help="acoustic model checkpoint for frame accuracy")
    p.add_argument("--split", default="test")
    p.add_argument("--channel", type=int, default=0)
    p.add_argument("--per-utterance", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare-features", parents=[common], help="log-mel comparison grids and image")
    p.add_argument("--seed", type=int, help="accepted for symmetry; unused")
    p.add_argument("--utt-id")
    p.add_argument("--manifest", help="corpus manifest to take noisy/clean audio from")
    p.add_argument("--channel", type=int, default=0)
    p.add_argument("--enhancer", action="append", help="enhancer checkpoint to add as a panel")
    p.add_argument("--source", action="append", help="extra panel as LABEL=WAV_PATH")
    p.add_argument("--start", type=int, default=0, help="first plotted frame")
    p.add_argument("--frames", type=int, help="number of plotted frames")
    p.set_defaults(func=cmd_compare_features)
    return parser


def run(argv=None) -> CommandResult:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return CommandResult(EXIT_OK if exc.code == 0 else EXIT_CONFIG)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    from .trainer import deterministic_requested, set_deterministic
    if deterministic_requested():
        set_deterministic(True)
    try:
        return args.func(args)
    except NumericalError as exc:
        return CommandResult(EXIT_NUMERICAL, summary=f"numerical failure: {exc}")
    except DataError as exc:
        detail = f" ({', '.join(exc.offending[:20])})" if exc.offending else ""
        return CommandResult(EXIT_DATA, summary=f"data error: {exc}{detail}")
    except (ConfigError, ValidationError, FrozenModelError) as exc:
        return CommandResult(EXIT_CONFIG, summary=f"configuration error: {exc}")
    except FileNotFoundError as exc:
        return CommandResult(EXIT_DATA, summary=f"data error: missing file {exc}")


def main(argv=None) -> int:
    result = run(argv)
    if result.summary:
        stream = sys.stdout if result.exit_code == EXIT_OK else sys.stderr
        print(result.summary, file=stream)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
