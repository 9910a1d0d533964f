"""Enhancer training in the parallel and non-parallel regimes, with frozen or jointly trained acoustic model.

Modes and the losses they allow:

=====================  ==========================  =========  ==============
mode                   losses                      AM         clean audio
=====================  ==========================  =========  ==============
nonparallel_mimic      hard_ce                     frozen     never read
nonparallel_joint      hard_ce                     trained    never read
parallel_T             time L1                     -          yes
parallel_T_mimic       time L1 + soft mimic        frozen     yes
parallel_T_SM          time L1 + spec L1           -          yes
parallel_T_SM_mimic    time + spec + soft mimic    frozen     yes
parallel_joint         time + spec + soft mimic    trained    yes
=====================  ==========================  =========  ==============

"soft mimic" is any of ``soft_l1``, ``soft_l2`` or ``kd``.
"""
from __future__ import annotations

import json
import logging
import os
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import metrics
from .acoustic_model import AcousticModel, AmConfig, FrozenModel, freeze, init_am, load_am
from .checkpoint import fingerprint
from .corpus import load_corpus
from .dsp import StftConfig, Waveform, magnitude, stft, write_wav
from .enhancer import Enhancer, EnhancerConfig, enhance, init_enhancer, save_enhancer, seeded
from .errors import ConfigError, DataError, FrozenModelError, NumericalError
from .losses import LossConfig, compute_losses

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
DETERMINISTIC_ENV = "MIMICSE_DETERMINISTIC"
SOFT_MIMIC = ("soft_l1", "soft_l2", "kd")

# mode -> (time_l1, spec_l1, allowed mimic kinds, frozen AM, parallel)
MODES = {
    "nonparallel_mimic": (False, False, ("hard_ce",), True, False),
    "nonparallel_joint": (False, False, ("hard_ce",), False, False),
    "parallel_T": (True, False, ("none",), True, True),
    "parallel_T_mimic": (True, False, SOFT_MIMIC, True, True),
    "parallel_T_SM": (True, True, ("none",), True, True),
    "parallel_T_SM_mimic": (True, True, SOFT_MIMIC, True, True),
    "parallel_joint": (True, True, SOFT_MIMIC, False, True),
}


def set_deterministic(enabled: bool = True) -> None:
    """Single-threaded, deterministic torch kernels."""
    torch.use_deterministic_algorithms(enabled)
    if enabled:
        torch.set_num_threads(1)


def deterministic_requested() -> bool:
    return os.environ.get(DETERMINISTIC_ENV, "").strip().lower() in ("1", "true", "yes", "on")


@dataclass
class OptimizerConfig:
    name: str = "adam"
    learning_rate: float = 2e-4
    batch_size: int = 4
    epochs: int = 10
    seed: int | None = None

    def __post_init__(self):
        if self.name not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.name!r}")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("learning_rate > 0, batch_size >= 1 and epochs >= 0 required")


@dataclass
class DataConfig:
    manifest: str = ""
    channel_policy: str = "random"
    train_segment: int = 12800
    max_eval_utterances: int | None = None

    def __post_init__(self):
        if self.channel_policy not in ("random", "eval"):
            raise ConfigError(f"channel_policy must be 'random' or 'eval', got {self.channel_policy!r}")


def _build(cls, value, name):
    if isinstance(value, cls):
        return value
    if value is None:
        return cls()
    if not isinstance(value, dict):
        raise ConfigError(f"{name} must be a mapping")
    unknown = set(value) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown {name} fields: {sorted(unknown)}")
    try:
        return cls(**value)
    except TypeError as exc:
        raise ConfigError(f"invalid {name}: {exc}") from exc


@dataclass
class ExperimentConfig:
    mode: str
    am_checkpoint: str
    loss: LossConfig = None
    optimizer: OptimizerConfig = None
    data: DataConfig = None
    enhancer: EnhancerConfig = None
    stft: StftConfig = None
    eval_channel: int = 0
    am_frozen: bool | None = None
    joint_am_init: str | None = None  # random for nonparallel_joint, clean for parallel_joint
    checkpoint_every: int = 1
    version: int = CONFIG_VERSION

    def __post_init__(self):
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {sorted(MODES)}")
        if self.loss is None:
            self.loss = default_loss(self.mode)
        self.loss = _build(LossConfig, self.loss, "loss")
        self.optimizer = _build(OptimizerConfig, self.optimizer, "optimizer")
        self.data = _build(DataConfig, self.data, "data")
        self.enhancer = _build(EnhancerConfig, self.enhancer, "enhancer")
        self.stft = _build(StftConfig, self.stft, "stft")
        frozen = MODES[self.mode][3]
        if self.am_frozen is None:
            self.am_frozen = frozen
        elif bool(self.am_frozen) != frozen:
            raise ConfigError(f"mode {self.mode} requires am_frozen={frozen}")
        if self.joint_am_init is None:
            self.joint_am_init = "random" if self.mode == "nonparallel_joint" else "clean"
        if self.joint_am_init not in ("clean", "random"):
            raise ConfigError("joint_am_init must be 'clean' or 'random'")
        check_mode_legality(self.mode, self.loss)

    @property
    def parallel(self) -> bool:
        return MODES[self.mode][4]

    @property
    def uses_am(self) -> bool:
        return self.loss.mimic != "none"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("experiment config must be a mapping")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown experiment config fields: {sorted(unknown)}")
        missing = {"mode", "am_checkpoint"} - set(d)
        if missing:
            raise ConfigError(f"experiment config lacks {sorted(missing)}")
        d = dict(d)
        if base_dir is not None:
            d["am_checkpoint"] = _resolve(base_dir, d["am_checkpoint"])
            if isinstance(d.get("data"), dict) and d["data"].get("manifest"):
                d["data"] = dict(d["data"], manifest=_resolve(base_dir, d["data"]["manifest"]))
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"invalid experiment config: {exc}") from exc


def _resolve(base_dir, p) -> str:
    p = Path(p)
    return str(p if p.is_absolute() else Path(base_dir) / p)


def load_config(path) -> ExperimentConfig:
    import yaml

    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML/JSON: {exc}") from exc
    return ExperimentConfig.from_dict(raw, base_dir=path.parent)


def default_loss(mode: str) -> LossConfig:
    time_l1, spec_l1, mimic, _, _ = MODES[mode]
    return LossConfig(use_time_l1=time_l1, use_specmag_l1=spec_l1,
                      mimic="soft_l1" if mimic == SOFT_MIMIC else mimic[0])


def check_mode_legality(mode: str, loss: LossConfig) -> None:
    """Reject any loss configuration the mode does not allow, before any compute happens."""
    time_l1, spec_l1, mimic, _, parallel = MODES[mode]
    problems = []
    if loss.use_time_l1 != time_l1:
        problems.append(f"time L1 must be {'on' if time_l1 else 'off'}")
    if loss.use_specmag_l1 != spec_l1:
        problems.append(f"spectral magnitude L1 must be {'on' if spec_l1 else 'off'}")
    if loss.mimic not in mimic:
        problems.append(f"mimic must be one of {list(mimic)}, got {loss.mimic!r}")
    if not parallel and loss.needs_clean:
        problems.append("non-parallel modes cannot use losses that need clean audio")
    if problems:
        raise ConfigError(f"illegal loss configuration for mode {mode}: " + "; ".join(problems))


def sample_channel(utt, epoch: int, seed: int, n_channels: int | None = None) -> int:
    """Channel index for ``utt`` in ``epoch``: uniform, keyed only by (utt_id, epoch, seed)."""
    utt_id = utt if isinstance(utt, str) else utt.utt_id
    if n_channels is None:
        n_channels = len(utt.noisy)
    if n_channels <= 1:
        return 0
    rng = np.random.default_rng([seed, epoch, zlib.crc32(utt_id.encode())])
    return int(rng.integers(0, n_channels))


def joint_init_from_clean(am_checkpoint) -> AcousticModel:
    """Load a clean-trained AM as a trainable starting point for joint training."""
    model = load_am(am_checkpoint)
    for p in model.parameters():
        p.requires_grad_(True)
    model.train()
    return model


def make_optimizer(cfg: OptimizerConfig, *modules):
    params = []
    for m in modules:
        if isinstance(m, FrozenModel):
            raise FrozenModelError("refusing to register a frozen model with the optimizer")
        params.extend(m.parameters())
    if cfg.name == "adam":
        return torch.optim.Adam(params, lr=cfg.learning_rate)
    return torch.optim.SGD(params, lr=cfg.learning_rate)


@dataclass
class TrainingLog:
    header: dict = field(default_factory=dict)
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    final: dict = field(default_factory=dict)

    def am_fingerprints(self) -> list[str]:
        return [e["am_fingerprint"] for e in self.epochs if e.get("am_fingerprint")]

    def frozen_verified(self) -> bool:
        """True if every logged AM fingerprint equals the one recorded before training."""
        start = self.header.get("am_fingerprint")
        prints = self.am_fingerprints()
        return bool(start) and bool(prints) and all(p == start for p in prints)

    def write(self, path) -> Path:
        path = Path(path)
        with path.open("w") as fh:
            fh.write(json.dumps({"type": "header", **self.header}, sort_keys=True) + "\n")
            for rec in self.steps:
                fh.write(json.dumps({"type": "step", **rec}, sort_keys=True) + "\n")
            for rec in self.epochs:
                fh.write(json.dumps({"type": "epoch", **rec}, sort_keys=True) + "\n")
            if self.final:
                fh.write(json.dumps({"type": "final", **self.final}, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "TrainingLog":
        out = cls()
        for line in Path(path).read_text().splitlines():
            rec = json.loads(line)
            kind = rec.pop("type")
            if kind == "header":
                out.header = rec
            elif kind == "step":
                out.steps.append(rec)
            elif kind == "epoch":
                out.epochs.append(rec)
            elif kind == "final":
                out.final = rec
        return out


@dataclass
class ExperimentResult:
    log: TrainingLog
    checkpoint: Path
    out_dir: Path
    report: metrics.MetricReport
    noisy_report: metrics.MetricReport
    enhancer_fingerprint: str


def _batches(records, epoch, cfg: ExperimentConfig, seed):
    """Training batches for one epoch; order and crops are a pure function of (seed, epoch)."""
    rng = np.random.default_rng([seed, epoch, 17])
    hop = cfg.stft.hop_length
    order = rng.permutation(len(records))
    bs = cfg.optimizer.batch_size
    for start in range(0, len(order), bs):
        idx = order[start:start + bs]
        shortest = min(len(records[i].labels) for i in idx)
        seg_hops = min(cfg.data.train_segment // hop, shortest - 1)
        noisy, clean, labels, ids = [], [], [], []
        for i in idx:
            rec = records[i]
            ch = (sample_channel(rec, epoch, seed) if cfg.data.channel_policy == "random"
                  else cfg.eval_channel)
            k = int(rng.integers(0, len(rec.labels) - seg_hops))
            s, e = k * hop, (k + seg_hops) * hop
            noisy.append(rec.noisy[ch][s:e])
            if cfg.parallel:
                clean.append(rec.clean[s:e])
            labels.append(rec.labels[k:k + seg_hops + 1])
            ids.append((rec.utt_id, ch, s))
        yield (torch.as_tensor(np.stack(noisy), dtype=torch.float32),
               torch.as_tensor(np.stack(clean), dtype=torch.float32) if cfg.parallel else None,
               torch.as_tensor(np.stack(labels), dtype=torch.long), ids)


def frame_scorer(am, stft_cfg: StftConfig):
    """Return ``f(waveform, labels) -> accuracy`` using ``am`` on the waveform's magnitudes."""
    def score(wav, labels):
        x = torch.as_tensor(np.asarray(getattr(wav, "samples", wav), dtype=np.float32))
        with torch.no_grad():
            logits = am(magnitude(stft(x, stft_cfg)))
        return metrics.frame_accuracy(logits, labels)
    return score


def evaluate(model: Enhancer | None, records, channel: int, stft_cfg: StftConfig, ref_am=None,
             out_dir=None) -> metrics.MetricReport:
    """Score ``model`` (``None`` = pass the noisy audio through) on ``records``.

    Enhanced audio is rounded to float32 before scoring; with ``out_dir`` it is
    also written as float32 WAV plus an evaluation manifest, so re-scoring the
    files reproduces the report exactly.
    """
    scorer = frame_scorer(ref_am, stft_cfg) if ref_am is not None else None
    scores, manifest = [], []
    for rec in records:
        if rec.clean is None:
            raise DataError(f"{rec.utt_id}: no clean reference for evaluation", [rec.utt_id])
        if channel >= len(rec.noisy):
            raise DataError(f"{rec.utt_id}: eval channel {channel} missing", [rec.utt_id])
        noisy = rec.noisy[channel]
        if model is None:
            est = np.asarray(noisy, dtype=np.float32)
        else:
            est = enhance(torch.as_tensor(noisy, dtype=torch.float32), model).numpy().astype(np.float32)
        est64 = est.astype(np.float64)
        acc = scorer(est64, rec.labels) if scorer else None
        scores.append(metrics.UtteranceScore(
            rec.utt_id, metrics.si_sdr(est64, rec.clean),
            metrics.estoi(est64, rec.clean, rec.sample_rate), acc))
        if out_dir is not None:
            out_dir = Path(out_dir)
            write_wav(out_dir / "enhanced" / f"{rec.utt_id}.wav", Waveform(est64, rec.sample_rate),
                      fmt="float32")
            write_wav(out_dir / "reference" / f"{rec.utt_id}.wav",
                      Waveform(rec.clean, rec.sample_rate), fmt="float32")
            manifest.append({"utt_id": rec.utt_id, "estimate": f"enhanced/{rec.utt_id}.wav",
                             "reference": f"reference/{rec.utt_id}.wav"})
    report = metrics.MetricReport(scores)
    if out_dir is not None:
        (Path(out_dir) / "manifest.jsonl").write_text(
            "".join(json.dumps(r) + "\n" for r in manifest))
        (Path(out_dir) / "report.json").write_text(json.dumps(report.to_dict(), indent=2))
    return report


def _dump_batch(path, noisy, clean, labels, ids):
    np.savez(path, noisy=noisy.detach().numpy(),
             clean=np.zeros(0) if clean is None else clean.detach().numpy(),
             labels=labels.numpy(), ids=np.array([f"{u}:{c}:{s}" for u, c, s in ids]))


def run_experiment(cfg: ExperimentConfig, out_dir, corpus=None, quiet: bool = True) -> ExperimentResult:
    """Train an enhancer per ``cfg`` and evaluate it on the held-out split.

    Writes ``train_log.jsonl``, per-epoch checkpoints under ``checkpoints/``,
    the final ``enhancer.pt`` and an ``eval/`` directory of enhanced audio.
    ``corpus`` may pass pre-loaded splits (``{"train": [...], ...}``).
    """
    if cfg.optimizer.seed is None:
        raise ConfigError("optimizer.seed is required; training never picks a seed silently")
    if deterministic_requested():
        set_deterministic(True)
    seed = cfg.optimizer.seed
    out_dir = Path(out_dir)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    if corpus is None:
        corpus = load_corpus(cfg.data.manifest, cfg.stft)
    train, valid, test = corpus["train"], corpus.get("valid", []), corpus["test"]
    if not train or not test:
        raise DataError("corpus needs non-empty train and test splits")
    if cfg.data.max_eval_utterances:
        valid = valid[:cfg.data.max_eval_utterances]
        test = test[:cfg.data.max_eval_utterances]
    if cfg.parallel and any(r.clean is None for r in train):
        raise DataError("parallel modes need clean audio for every training utterance")

    ref_am = freeze(load_am(cfg.am_checkpoint))
    ref_print = fingerprint(ref_am)
    am = None
    if cfg.uses_am:
        if cfg.am_frozen:
            am = ref_am
        elif cfg.joint_am_init == "clean":
            am = joint_init_from_clean(cfg.am_checkpoint)
        else:
            am = init_am(AmConfig(**load_am(cfg.am_checkpoint).cfg.to_dict()), seed)
            am.train()
    enh = init_enhancer(cfg.enhancer, seed)
    trainable = [enh] + ([am] if am is not None and not cfg.am_frozen else [])
    opt = make_optimizer(cfg.optimizer, *trainable)

    tlog = TrainingLog(header={
        "config": cfg.to_dict(), "am_fingerprint": ref_print,
        "am_frozen": cfg.am_frozen, "seed": seed,
        "enhancer_parameters": sum(p.numel() for p in enh.parameters()),
        "deterministic": torch.are_deterministic_algorithms_enabled(),
    })
    started = time.perf_counter()
    step = 0
    with seeded(seed):
        for epoch in range(1, cfg.optimizer.epochs + 1):
            enh.train()
            for noisy, clean, labels, ids in _batches(train, epoch, cfg, seed):
                denoised = enh(noisy)
                parts = compute_losses(denoised, cfg.loss, cfg.stft, clean=clean, labels=labels,
                                       am=am)
                if not torch.isfinite(parts.total):
                    dump = out_dir / "nan_batch.npz"
                    _dump_batch(dump, noisy, clean, labels, ids)
                    raise NumericalError(
                        f"non-finite loss at epoch {epoch} step {step}: {parts.to_dict()}; "
                        f"batch dumped to {dump}")
                opt.zero_grad()
                parts.total.backward()
                opt.step()
                step += 1
                tlog.steps.append({"step": step, "epoch": epoch, **parts.to_dict()})
            enh.eval()
            rec = {"epoch": epoch, "step": step, "wall_clock_s": time.perf_counter() - started,
                   "am_fingerprint": fingerprint(ref_am if am is None else am)}
            if valid:
                rec["valid"] = evaluate(enh, valid, cfg.eval_channel, cfg.stft, ref_am).to_dict()
                del rec["valid"]["per_utterance"]
            if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                ck = save_enhancer(out_dir / "checkpoints" / f"epoch_{epoch:03d}.pt", enh,
                                   {"epoch": epoch, "am_fingerprint": rec["am_fingerprint"]})
                rec["checkpoint"] = str(ck.relative_to(out_dir))
            tlog.epochs.append(rec)
            if not quiet:
                v = rec.get("valid", {})
                log.info("epoch %d: loss %.4f valid eSTOI %s", epoch,
                         tlog.steps[-1]["total"] if tlog.steps else float("nan"), v.get("estoi"))
    enh.eval()
    final_path = save_enhancer(out_dir / "enhancer.pt", enh, {"mode": cfg.mode, "seed": seed})
    enh_print = fingerprint(enh)
    report = evaluate(enh, test, cfg.eval_channel, cfg.stft, ref_am, out_dir / "eval")
    noisy_report = evaluate(None, test, cfg.eval_channel, cfg.stft, ref_am)
    tlog.final = {"enhancer_fingerprint": enh_print, "test": report.to_dict(),
                  "test_noisy": noisy_report.to_dict(),
                  "am_frozen_verified": tlog.frozen_verified() if cfg.am_frozen else None,
                  "wall_clock_s": time.perf_counter() - started}
    tlog.write(out_dir / "train_log.jsonl")
    return ExperimentResult(tlog, final_path, out_dir, report, noisy_report, enh_print)


@dataclass
class GradcheckEntry:
    name: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float
    step: float = 0.0


@dataclass
class GradcheckReport:
    entries: list
    am_grad_absent: bool | None
    tolerance: float

    @property
    def max_rel_error(self) -> float:
        return max(e.rel_error for e in self.entries)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance and self.am_grad_absent is not False


def tiny_models(seed: int = 0, n_senones: int = 12, stft_cfg: StftConfig | None = None):
    """Small float64 enhancer + frozen AM pair for gradient checks."""
    stft_cfg = stft_cfg or StftConfig()
    enh = init_enhancer(EnhancerConfig(depth=4, base_channels=4, max_channels=8, kernel=5,
                                       chunk_length=4096, identity_init=False), seed).double()
    am = init_am(AmConfig(scale=1 / 16, n_senones=n_senones, input_bins=stft_cfg.n_bins),
                 seed + 1).double()
    return enh, am


def _central_difference(loss_fn, p, idx, step, shrink=10.0, tries=4):
    """Central difference of ``loss_fn`` in ``p[idx]``.

    Leaky ReLUs and |x| make the loss piecewise smooth. When the stencil
    straddles a kink the forward and backward slopes disagree; the step is then
    shrunk until they agree (or round-off would dominate). Returns the estimate
    and the step used.
    """
    eps = np.finfo(np.float64).eps
    best = None
    with torch.no_grad():
        orig = p[idx].item()
        f0 = loss_fn().item()
        h = step
        for _ in range(tries):
            p[idx] = orig + h
            up = loss_fn().item()
            p[idx] = orig - h
            down = loss_fn().item()
            p[idx] = orig
            central = (up - down) / (2 * h)
            gap = abs((up - f0) - (f0 - down)) / h
            if gap <= max(1e-3 * abs(central), 8 * eps * abs(f0) / h):
                return central, h
            if best is None or gap < best[0]:
                best = (gap, central, h)
            h /= shrink
    return best[1], best[2]


def gradcheck(loss_cfg: LossConfig, n_params: int = 32, seed: int = 0, *, enh=None, am=None,
              stft_cfg: StftConfig | None = None, n_samples: int = 2048, step: float = 1e-5,
              tolerance: float = 1e-3, frozen: bool = True) -> GradcheckReport:
    """Compare backprop gradients of the full loss graph with central finite differences.

    The step starts at ``step`` and shrinks near kinks (see ``_central_difference``).
    Relative error is ``|a - n| / max(|a|, |n|, 1e-10)``. In frozen mode the AM
    parameters must end up with no gradient at all.
    """
    stft_cfg = stft_cfg or StftConfig()
    if enh is None or am is None:
        enh0, am0 = tiny_models(seed, stft_cfg=stft_cfg)
        enh, am = enh or enh0, am or am0
    am_handle = freeze(am) if frozen else am
    raw_am = am_handle._model if isinstance(am_handle, FrozenModel) else am_handle
    rng = np.random.default_rng(seed)
    noisy = torch.as_tensor(0.1 * rng.standard_normal((2, n_samples)))
    clean = torch.as_tensor(0.1 * rng.standard_normal((2, n_samples)))
    labels = torch.as_tensor(rng.integers(0, raw_am.cfg.n_senones,
                                          (2, stft_cfg.n_frames(n_samples))))

    def loss_fn():
        return compute_losses(enh(noisy), loss_cfg, stft_cfg, clean=clean, labels=labels,
                              am=am_handle).total

    enh.zero_grad()
    for p in raw_am.parameters():
        p.grad = None
    loss_fn().backward()
    named = [(n, p) for n, p in enh.named_parameters()]
    sizes = np.array([p.numel() for _, p in named], dtype=np.float64)
    entries = []
    for _ in range(n_params):
        k = int(rng.choice(len(named), p=sizes / sizes.sum()))
        name, p = named[k]
        flat = int(rng.integers(0, p.numel()))
        idx = np.unravel_index(flat, tuple(p.shape))
        if p.grad is None or not torch.isfinite(p.grad).all():
            raise NumericalError(f"non-finite or missing analytic gradient for {name}")
        analytic = float(p.grad[idx])
        numeric, h = _central_difference(loss_fn, p, idx, step)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-10)
        entries.append(GradcheckEntry(name, tuple(int(i) for i in idx), analytic, numeric, rel, h))
    am_absent = None
    if frozen and loss_cfg.mimic != "none":
        am_absent = all(p.grad is None for p in raw_am.parameters())
    return GradcheckReport(entries, am_absent, tolerance)
