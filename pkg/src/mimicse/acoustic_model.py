"""Utterance-level senone classifier used as the frozen perceiving network.

Architecture: a 3x3 stem followed by ``n_blocks`` residual blocks of
``layers_per_block`` pre-activation conv layers. The first layer of every block
strides 2 along time (and ``freq_stride`` along frequency) with a 1x1
projection shortcut. Frequency is average-pooled at the top, the channels are
cut into ``n_split = 2 ** n_blocks`` groups and each group gets its own affine
map to senone logits. Interleaving the groups back along time undoes the
downsampling, so every input frame receives exactly one logit vector.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint
from .errors import ConfigError, DataError, FrozenModelError, ShapeError

log = logging.getLogger(__name__)

FEATURE_NORMS = ("bin_mean", "global")

@dataclass
class AmConfig:
    n_senones: int = 12
    input_bins: int = 257
    n_blocks: int = 4
    layers_per_block: int = 3
    block_channels: tuple = (128, 256, 512, 1024)
    n_split: int = 16
    scale: float = 1.0
    freq_stride: int = 2
    leaky_slope: float = 0.1
    log_floor: float = 0.1
    feature_norm: str = "bin_mean"

    def __post_init__(self):
        self.block_channels = tuple(int(c) for c in self.block_channels)
        if len(self.block_channels) != self.n_blocks:
            raise ConfigError(
                f"{len(self.block_channels)} block channel counts for {self.n_blocks} blocks")
        if self.n_split != 2 ** self.n_blocks:
            raise ConfigError(
                f"n_split must equal 2**n_blocks={2 ** self.n_blocks} to keep one output per frame")
        if not 0 < self.scale <= 1:
            raise ConfigError(f"scale must be in (0, 1], got {self.scale}")
        if self.feature_norm not in FEATURE_NORMS:
            raise ConfigError(f"feature_norm must be one of {FEATURE_NORMS}")
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")
        if self.n_senones < 2 or self.layers_per_block < 1 or self.input_bins < 1:
            raise ConfigError("n_senones >= 2, layers_per_block >= 1 and input_bins >= 1 required")

    @property
    def channels(self) -> list[int]:
        chans = [max(1, round(c * self.scale)) for c in self.block_channels]
        chans[-1] = self.n_split * math.ceil(chans[-1] / self.n_split)
        return chans

    @property
    def time_factor(self) -> int:
        return 2 ** self.n_blocks

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_channels"] = list(self.block_channels)
        return d


class _ResLayer(nn.Module):
    def __init__(self, cin, cout, stride, slope):
        super().__init__()
        self.slope = slope
        self.conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.shortcut = None
        if stride != (1, 1) or cin != cout:
            self.shortcut = nn.Conv2d(cin, cout, 1, stride=stride)

    def forward(self, x):
        h = self.conv(F.leaky_relu(x, self.slope))
        return h + (x if self.shortcut is None else self.shortcut(x))


def normalize_features(mag: torch.Tensor, floor: float = 0.1, mode: str = "bin_mean") -> torch.Tensor:
    """Log-compress, then normalise each utterance.

    ``bin_mean`` subtracts every bin's mean over time (so a fixed linear filter
    on the waveform leaves the features unchanged) and divides by one
    utterance-wide standard deviation. ``global`` uses a single mean instead.
    """
    feats = torch.log(mag + floor)
    if mode == "bin_mean":
        feats = feats - feats.mean(dim=-2, keepdim=True)
    else:
        feats = feats - feats.mean(dim=(-2, -1), keepdim=True)
    std = feats.pow(2).mean(dim=(-2, -1), keepdim=True).sqrt()
    return feats / (std + 1e-5)


class AcousticModel(nn.Module):
    def __init__(self, cfg: AmConfig):
        super().__init__()
        self.cfg = cfg
        chans = cfg.channels
        self.stem = nn.Conv2d(1, chans[0], 3, padding=1)
        layers = []
        cin = chans[0]
        for cout in chans:
            for i in range(cfg.layers_per_block):
                stride = (2, cfg.freq_stride) if i == 0 else (1, 1)
                layers.append(_ResLayer(cin, cout, stride, cfg.leaky_slope))
                cin = cout
        self.layers = nn.Sequential(*layers)
        # grouped 1x1 conv == one affine layer per channel group
        self.head = nn.Conv1d(cin, cfg.n_split * cfg.n_senones, 1, groups=cfg.n_split)

    def forward(self, mag: torch.Tensor) -> torch.Tensor:
        """Magnitudes (B, T, F) or (T, F) -> senone logits of the same leading shape, (..., T, S)."""
        squeeze = mag.dim() == 2
        if squeeze:
            mag = mag.unsqueeze(0)
        if mag.shape[-1] != self.cfg.input_bins:
            raise ShapeError(f"expected {self.cfg.input_bins} bins, got {mag.shape[-1]}")
        n_frames = mag.shape[1]
        x = normalize_features(mag, self.cfg.log_floor, self.cfg.feature_norm)
        pad = -n_frames % self.cfg.time_factor
        if pad:
            # repeat the last frame; padded outputs are trimmed below
            x = torch.cat([x, x[:, -1:].expand(-1, pad, -1)], dim=1)
        h = self.layers(self.stem(x.unsqueeze(1)))
        h = F.leaky_relu(h, self.cfg.leaky_slope).mean(dim=3)  # (B, C, T / 2^n)
        out = self.head(h)
        b, _, t_low = out.shape
        out = out.view(b, self.cfg.n_split, self.cfg.n_senones, t_low)
        out = out.permute(0, 3, 1, 2).reshape(b, t_low * self.cfg.n_split, self.cfg.n_senones)
        out = out[:, :n_frames]
        return out[0] if squeeze else out


class FrozenModel:
    """Read-only handle around a trained model.

    Calling it runs the forward pass with gradients flowing to the inputs.
    Asking for its parameters (as an optimizer would) raises
    :class:`FrozenModelError`; :meth:`unfreeze` hands back a trainable model.
    """

    def __init__(self, model: nn.Module):
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        self._model = model

    @property
    def cfg(self):
        return self._model.cfg

    def __call__(self, *args, **kwargs):
        return self._model(*args, **kwargs)

    def parameters(self, *args, **kwargs):
        raise FrozenModelError("frozen model parameters cannot be registered with an optimizer")

    named_parameters = parameters

    def state_dict(self):
        return self._model.state_dict()

    def to(self, *args, **kwargs):
        self._model.to(*args, **kwargs)
        return self

    def double(self):
        self._model.double()
        return self

    def unfreeze(self) -> nn.Module:
        for p in self._model.parameters():
            p.requires_grad_(True)
        self._model.train()
        return self._model

    def copy(self) -> "FrozenModel":
        return FrozenModel(copy.deepcopy(self._model))


def freeze(model) -> FrozenModel:
    if isinstance(model, FrozenModel):
        return model
    return FrozenModel(model)


def fingerprint(model) -> str:
    return checkpoint.fingerprint(model)


def am_forward(mag, model) -> torch.Tensor:
    return model(torch.as_tensor(mag))


def init_am(cfg: AmConfig, seed: int = 0) -> AcousticModel:
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = AcousticModel(cfg)
    finally:
        torch.random.set_rng_state(gen_state)
    return model


@dataclass
class AmSchedule:
    """Training schedule. ``light`` runs exactly ``light_epochs``; ``converged``
    early-stops once validation CE has not improved for ``patience`` epochs."""
    preset: str = "converged"
    light_epochs: int = 5
    max_epochs: int = 60
    patience: int = 5
    learning_rate: float = 3e-3
    batch_size: int = 4
    crop_frames: int = 96
    seed: int = 0
    epochs: int | None = None  # explicit override, e.g. 0 for an untrained model

    def __post_init__(self):
        if self.preset not in ("light", "converged"):
            raise ConfigError(f"unknown AM preset {self.preset!r}")

    @property
    def n_epochs(self) -> int:
        if self.epochs is not None:
            return self.epochs
        return self.light_epochs if self.preset == "light" else self.max_epochs


@dataclass
class AmTrainingLog:
    preset: str
    epochs: list = field(default_factory=list)
    best_epoch: int | None = None

    def to_dict(self):
        return asdict(self)


def check_labels(utts, stft_cfg) -> None:
    """Raise :class:`DataError` listing every utterance whose label count disagrees with its frames."""
    bad = []
    for utt_id, wav, labels in utts:
        if stft_cfg.n_frames(len(wav)) != len(labels):
            bad.append(utt_id)
    if bad:
        raise DataError(f"{len(bad)} utterances have label/frame mismatches: {', '.join(bad[:10])}", bad)


def _magnitudes(utts, stft_cfg):
    from .dsp import magnitude, stft
    return [magnitude(stft(torch.as_tensor(np.asarray(w, dtype=np.float32)), stft_cfg))
            for _, w, _ in utts]


def _eval_ce(model, mags, labels):
    model.eval()
    total, correct, n = 0.0, 0, 0
    with torch.no_grad():
        for m, y in zip(mags, labels):
            logits = model(m)
            total += F.cross_entropy(logits, y, reduction="sum").item()
            correct += (logits.argmax(-1) == y).sum().item()
            n += len(y)
    return total / n, correct / n


def train_am(train_utts, cfg: AmConfig, schedule: AmSchedule, stft_cfg, valid_utts=None,
             model: AcousticModel | None = None):
    """Train an acoustic model on clean utterances with cross-entropy against hard senone labels.

    ``train_utts`` / ``valid_utts`` are sequences of ``(utt_id, waveform, labels)``.
    Returns ``(model, AmTrainingLog)``.
    """
    check_labels(train_utts, stft_cfg)
    if valid_utts:
        check_labels(valid_utts, stft_cfg)
    if model is None:
        model = init_am(cfg, schedule.seed)
    mags = _magnitudes(train_utts, stft_cfg)
    labels = [torch.as_tensor(np.asarray(y), dtype=torch.long) for _, _, y in train_utts]
    v_mags = _magnitudes(valid_utts, stft_cfg) if valid_utts else mags
    v_labels = ([torch.as_tensor(np.asarray(y), dtype=torch.long) for _, _, y in valid_utts]
                if valid_utts else labels)
    opt = torch.optim.Adam(model.parameters(), lr=schedule.learning_rate)
    rng = np.random.default_rng(schedule.seed)
    history = AmTrainingLog(schedule.preset)
    best = (math.inf, None, None)
    stale = 0
    for epoch in range(1, schedule.n_epochs + 1):
        model.train()
        order = rng.permutation(len(mags))
        train_loss, n_batches = 0.0, 0
        for start in range(0, len(order), schedule.batch_size):
            idx = order[start:start + schedule.batch_size]
            crop = min(schedule.crop_frames, min(len(labels[i]) for i in idx))
            xs, ys = [], []
            for i in idx:
                off = int(rng.integers(0, len(labels[i]) - crop + 1))
                xs.append(mags[i][off:off + crop])
                ys.append(labels[i][off:off + crop])
            logits = model(torch.stack(xs))
            loss = F.cross_entropy(logits.reshape(-1, cfg.n_senones), torch.cat(ys))
            opt.zero_grad()
            loss.backward()
            opt.step()
            train_loss += loss.item()
            n_batches += 1
        val_ce, val_acc = _eval_ce(model, v_mags, v_labels)
        history.epochs.append({"epoch": epoch, "train_ce": train_loss / max(n_batches, 1),
                               "valid_ce": val_ce, "valid_accuracy": val_acc})
        log.info("AM epoch %d: train CE %.4f, valid CE %.4f, valid acc %.3f",
                 epoch, train_loss / max(n_batches, 1), val_ce, val_acc)
        if schedule.preset == "converged" and schedule.epochs is None:
            if val_ce < best[0] - 1e-4:
                best = (val_ce, epoch, copy.deepcopy(model.state_dict()))
                stale = 0
            else:
                stale += 1
                if stale >= schedule.patience:
                    break
    if best[2] is not None:
        model.load_state_dict(best[2])
        history.best_epoch = best[1]
    model.eval()
    return model, history


def save_am(path, model, training_log: AmTrainingLog | None = None, stft_cfg=None):
    inner = getattr(model, "_model", model)
    meta = {"training_log": training_log.to_dict() if training_log else None,
            "stft": stft_cfg.to_dict() if stft_cfg else None,
            "feature_normalization": f"log(|X| + {inner.cfg.log_floor}), {inner.cfg.feature_norm} mean, "
                                     "per-utterance variance"}
    return checkpoint.save(path, "acoustic_model", inner.cfg.to_dict(), inner, meta)


def load_am(path) -> AcousticModel:
    blob = checkpoint.load(path, "acoustic_model")
    model = AcousticModel(AmConfig(**blob["config"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    model.checkpoint_meta = blob["meta"]
    return model
