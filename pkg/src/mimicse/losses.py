"""Local mapping losses, mimic losses through a frozen acoustic model, and their weighted sum."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

from .dsp import StftConfig, magnitude, stft
from .errors import ConfigError, LengthError, ShapeError, ValidationError

MIMIC_KINDS = ("none", "hard_ce", "soft_l1", "soft_l2", "kd")


@dataclass
class LossConfig:
    use_time_l1: bool = True
    use_specmag_l1: bool = False
    mimic: str = "none"
    kd_temperature: float = 1.0
    weights: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.weights = tuple(float(w) for w in self.weights)
        if self.mimic not in MIMIC_KINDS:
            raise ConfigError(f"unknown mimic loss {self.mimic!r}; expected one of {MIMIC_KINDS}")
        if len(self.weights) != 3 or min(self.weights) < 0:
            raise ConfigError("weights must be three nonnegative numbers (time, spec, mimic)")
        if self.kd_temperature <= 0:
            raise ConfigError(f"kd_temperature must be positive, got {self.kd_temperature}")
        if not self.enabled:
            raise ConfigError("at least one loss term must be enabled")
        if all(self.weights[i] == 0 for i in self.enabled):
            raise ConfigError("every enabled loss term has weight zero")

    @property
    def enabled(self) -> list[int]:
        on = [self.use_time_l1, self.use_specmag_l1, self.mimic != "none"]
        return [i for i, flag in enumerate(on) if flag]

    @property
    def needs_labels(self) -> bool:
        return self.mimic == "hard_ce"

    @property
    def needs_clean(self) -> bool:
        return self.use_time_l1 or self.use_specmag_l1 or self.mimic in ("soft_l1", "soft_l2", "kd")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = list(self.weights)
        return d


@dataclass
class LossBreakdown:
    """Weighted loss terms; ``total`` is the sum of the three components."""
    total: torch.Tensor
    time_l1: torch.Tensor
    spec_l1: torch.Tensor
    mimic: torch.Tensor

    def to_dict(self) -> dict:
        return {name: float(getattr(self, name).detach()) for name in ("total", "time_l1", "spec_l1", "mimic")}


def _check_same_length(a, b):
    if a.shape[-1] != b.shape[-1]:
        raise LengthError(f"length mismatch: {a.shape[-1]} vs {b.shape[-1]}")


def loss_time_l1(denoised: torch.Tensor, clean: torch.Tensor) -> torch.Tensor:
    _check_same_length(denoised, clean)
    return (denoised - clean).abs().mean()


def loss_specmag_l1(denoised: torch.Tensor, clean: torch.Tensor, cfg: StftConfig) -> torch.Tensor:
    _check_same_length(denoised, clean)
    return (magnitude(stft(denoised, cfg)) - magnitude(stft(clean, cfg))).abs().mean()


def _check_labels(logits, labels):
    if logits.shape[:-1] != labels.shape:
        raise LengthError(
            f"frame mismatch: logits {tuple(logits.shape[:-1])} vs labels {tuple(labels.shape)}")
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[-1]):
        raise ValidationError(f"labels must lie in [0, {logits.shape[-1]})")


def log_softmax(logits: torch.Tensor) -> torch.Tensor:
    shifted = logits - logits.max(dim=-1, keepdim=True).values.detach()
    return shifted - torch.log(torch.exp(shifted).sum(dim=-1, keepdim=True))


def loss_mimic_hard(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean frame cross-entropy of pre-softmax ``logits`` (..., T, S) against hard senone labels."""
    labels = torch.as_tensor(labels, dtype=torch.long, device=logits.device)
    _check_labels(logits, labels)
    return -log_softmax(logits).gather(-1, labels.unsqueeze(-1)).mean()


def loss_mimic_soft(logits_denoised: torch.Tensor, logits_clean: torch.Tensor,
                    kind: str = "l1") -> torch.Tensor:
    """L1 (or L2) distance between denoised and clean logits; the clean side is a fixed target."""
    if logits_denoised.shape != logits_clean.shape:
        raise ShapeError(
            f"shape mismatch: {tuple(logits_denoised.shape)} vs {tuple(logits_clean.shape)}")
    diff = logits_denoised - logits_clean.detach()
    if kind == "l1":
        return diff.abs().mean()
    if kind == "l2":
        return (diff ** 2).mean()
    raise ConfigError(f"unknown soft mimic kind {kind!r}")


def loss_kd(logits_denoised: torch.Tensor, logits_clean: torch.Tensor,
            temperature: float) -> torch.Tensor:
    """Knowledge distillation: T^2 * CE(softmax(clean / T), softmax(denoised / T)), mean over frames."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    if logits_denoised.shape != logits_clean.shape:
        raise ShapeError(
            f"shape mismatch: {tuple(logits_denoised.shape)} vs {tuple(logits_clean.shape)}")
    target = torch.exp(log_softmax(logits_clean.detach() / temperature))
    ce = -(target * log_softmax(logits_denoised / temperature)).sum(dim=-1)
    return temperature ** 2 * ce.mean()


def combine(terms: dict, cfg: LossConfig) -> LossBreakdown:
    """Weight and sum the enabled terms. ``terms`` maps ``time_l1``/``spec_l1``/``mimic`` to values."""
    names = ("time_l1", "spec_l1", "mimic")
    if all(w == 0 for w in cfg.weights):
        raise ConfigError("all loss weights are zero")
    zero = None
    parts = []
    for i, name in enumerate(names):
        value = terms.get(name)
        if i in cfg.enabled:
            if value is None:
                raise ValidationError(f"enabled loss term {name!r} was not computed")
            parts.append(cfg.weights[i] * torch.as_tensor(value))
        else:
            parts.append(None)
    ref = next(p for p in parts if p is not None)
    zero = torch.zeros((), dtype=ref.dtype, device=ref.device)
    parts = [zero if p is None else p for p in parts]
    return LossBreakdown(parts[0] + parts[1] + parts[2], *parts)


def compute_losses(denoised, cfg: LossConfig, stft_cfg: StftConfig, *, clean=None, labels=None,
                   am=None, teacher=None) -> LossBreakdown:
    """Evaluate the full loss graph for a batch of denoised waveforms.

    ``am`` scores the denoised audio; ``teacher`` (defaults to ``am``) scores the
    clean audio to produce soft targets, without gradient.
    """
    terms = {}
    if cfg.needs_clean and clean is None:
        raise ValidationError("this loss configuration needs parallel clean audio")
    if cfg.use_time_l1:
        terms["time_l1"] = loss_time_l1(denoised, clean)
    mag_d = None
    if cfg.use_specmag_l1 or cfg.mimic != "none":
        mag_d = magnitude(stft(denoised, stft_cfg))
    if cfg.use_specmag_l1:
        _check_same_length(denoised, clean)
        terms["spec_l1"] = (mag_d - magnitude(stft(clean, stft_cfg))).abs().mean()
    if cfg.mimic != "none":
        if am is None:
            raise ValidationError("mimic losses need an acoustic model")
        logits_d = am(mag_d)
        if cfg.mimic == "hard_ce":
            if labels is None:
                raise ValidationError("hard_ce mimic loss needs alignment labels")
            terms["mimic"] = loss_mimic_hard(logits_d, labels)
        else:
            teacher = am if teacher is None else teacher
            with torch.no_grad():
                logits_c = teacher(magnitude(stft(clean, stft_cfg)))
            if cfg.mimic == "kd":
                terms["mimic"] = loss_kd(logits_d, logits_c, cfg.kd_temperature)
            else:
                terms["mimic"] = loss_mimic_soft(logits_d, logits_c, cfg.mimic[-2:])
    return combine(terms, cfg)
