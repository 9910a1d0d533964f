"""Time-domain convolutional autoencoder enhancer (AECNN-style, leaky ReLU).

The encoder is ``depth`` strided 1-D convolutions (the first keeps full rate),
the decoder mirrors it with nearest-neighbour upsampling followed by a
convolution, and mirrored encoder features are concatenated in as skip
connections. The output convolution also sees the raw input waveform; with
``identity_init`` it starts as a copy of that input, so an untrained model
passes audio through unchanged while every other weight is random.
"""
from __future__ import annotations

import contextlib
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint
from .errors import ConfigError, ValidationError


@contextlib.contextmanager
def seeded(seed: int):
    """Run a block with torch's global RNG seeded, restoring the previous state afterwards."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def leaky_relu(x: torch.Tensor, slope: float) -> torch.Tensor:
    return torch.where(x >= 0, x, slope * x)


@dataclass
class EnhancerConfig:
    depth: int = 8
    base_channels: int = 64
    max_channels: int = 256
    kernel: int = 11
    stride: int = 2
    skip_connections: bool = True
    leaky_slope: float = 0.3
    chunk_length: int = 16384
    scale: float = 1.0
    identity_init: bool = True

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.stride < 1 or self.kernel < 1:
            raise ConfigError("stride and kernel must be positive")
        if self.stride > self.kernel:
            raise ConfigError(f"stride ({self.stride}) must not exceed kernel ({self.kernel})")
        if self.kernel % 2 == 0:
            raise ConfigError("kernel must be odd so 'same' padding is symmetric")
        if not 0 < self.scale <= 1:
            raise ConfigError(f"scale must be in (0, 1], got {self.scale}")
        if self.chunk_length < 4 or self.chunk_length % self.multiple:
            raise ConfigError(
                f"chunk_length must be a positive multiple of {self.multiple}, got {self.chunk_length}")
        if not 0 <= self.leaky_slope <= 1:
            raise ConfigError("leaky_slope must be in [0, 1]")

    @property
    def multiple(self) -> int:
        """Input lengths are padded to a multiple of this before the forward pass."""
        return self.stride ** (self.depth - 1)

    @property
    def channels(self) -> list[int]:
        return [max(1, round(min(self.base_channels * 2 ** (i // 3), self.max_channels) * self.scale))
                for i in range(self.depth)]

    def to_dict(self) -> dict:
        return asdict(self)


class Enhancer(nn.Module):
    def __init__(self, cfg: EnhancerConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.channels
        pad = cfg.kernel // 2
        self.encoder = nn.ModuleList()
        for i, c in enumerate(ch):
            cin = 1 if i == 0 else ch[i - 1]
            self.encoder.append(nn.Conv1d(cin, c, cfg.kernel, stride=1 if i == 0 else cfg.stride,
                                          padding=pad))
        self.decoder = nn.ModuleList()
        for j in range(cfg.depth - 1, 0, -1):
            cin = ch[j] * (2 if cfg.skip_connections and j < cfg.depth - 1 else 1)
            self.decoder.append(nn.Conv1d(cin, ch[j - 1], cfg.kernel, padding=pad))
        out_in = ch[0] * (2 if cfg.skip_connections and cfg.depth > 1 else 1) + 1
        self.output = nn.Conv1d(out_in, 1, cfg.kernel, padding=pad)
        if cfg.identity_init:
            with torch.no_grad():
                self.output.weight.zero_()
                self.output.bias.zero_()
                self.output.weight[0, -1, pad] = 1.0

    def _forward_aligned(self, x):
        # x: (B, 1, L) with L a multiple of cfg.multiple
        slope = self.cfg.leaky_slope
        feats = []
        h = x
        for conv in self.encoder:
            h = leaky_relu(conv(h), slope)
            feats.append(h)
        for k, conv in enumerate(self.decoder):
            j = self.cfg.depth - 1 - k
            if self.cfg.skip_connections and j < self.cfg.depth - 1:
                h = torch.cat([h, feats[j]], dim=1)
            h = F.interpolate(h, scale_factor=self.cfg.stride, mode="nearest")
            h = leaky_relu(conv(h), slope)
        if self.cfg.skip_connections and self.cfg.depth > 1:
            h = torch.cat([h, feats[0]], dim=1)
        return self.output(torch.cat([h, x], dim=1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Waveforms (B, L) or (L,) -> enhanced waveforms of identical shape."""
        squeeze = x.dim() == 1
        if squeeze:
            x = x.unsqueeze(0)
        n = x.shape[-1]
        pad = -n % self.cfg.multiple
        y = self._forward_aligned(F.pad(x, (0, pad)).unsqueeze(1))[:, 0, :n]
        return y[0] if squeeze else y


def init_enhancer(cfg: EnhancerConfig, seed: int) -> Enhancer:
    with seeded(seed):
        return Enhancer(cfg)


def n_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def _crossfade_weights(length: int, overlap: int, first: bool, last: bool) -> np.ndarray:
    w = np.ones(length)
    ramp = (np.arange(overlap) + 0.5) / overlap
    if not first:
        w[:overlap] = ramp
    if not last:
        w[-overlap:] = ramp[::-1]
    return w


def chunk_starts(n: int, chunk: int, overlap: int) -> list[int]:
    if n <= chunk:
        return [0]
    hop = chunk - overlap
    starts = list(range(0, n - chunk + 1, hop))
    if starts[-1] + chunk < n:
        starts.append(n - chunk)
    return starts


def enhance(noisy, model: Enhancer) -> torch.Tensor:
    """Enhance a single waveform of any length.

    Inputs longer than ``chunk_length`` are cut into chunks with 25 % overlap
    and recombined with a linear cross-fade.
    """
    x = torch.as_tensor(np.asarray(noisy) if not isinstance(noisy, torch.Tensor) else noisy)
    if x.dim() != 1 or x.numel() == 0:
        raise ValidationError("enhance expects a non-empty 1-D waveform")
    if not torch.isfinite(x).all():
        raise ValidationError("input contains non-finite samples")
    dtype = next(model.parameters()).dtype
    x = x.to(dtype)
    n = x.numel()
    chunk = model.cfg.chunk_length
    with torch.no_grad():
        if n <= chunk:
            return model(x)
        overlap = chunk // 4
        starts = chunk_starts(n, chunk, overlap)
        out = torch.zeros(n, dtype=dtype)
        norm = torch.zeros(n, dtype=dtype)
        for i, s in enumerate(starts):
            w = torch.as_tensor(_crossfade_weights(chunk, overlap, i == 0, i == len(starts) - 1),
                                dtype=dtype)
            out[s:s + chunk] += w * model(x[s:s + chunk])
            norm[s:s + chunk] += w
        return out / norm


def save_enhancer(path, model: Enhancer, meta: dict | None = None):
    return checkpoint.save(path, "enhancer", model.cfg.to_dict(), model, meta)


def load_enhancer(path) -> Enhancer:
    blob = checkpoint.load(path, "enhancer")
    model = Enhancer(EnhancerConfig(**blob["config"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    model.checkpoint_meta = blob["meta"]
    return model
