"""Differentiable signal processing: framing, STFT/ISTFT, magnitudes, log-mel features, WAV I/O.

All transforms operate on torch tensors with arbitrary leading batch dimensions
so gradients flow from spectral losses back to waveform samples. Numpy arrays
are accepted and converted.

Padding rule: the signal is reflect-padded by ``frame_length // 2`` on both
sides, so frame ``t`` is centred on sample ``t * hop_length`` and an input of
``n`` samples yields ``1 + n // hop_length`` frames.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.io import wavfile

from .errors import ConfigError, LengthError, ValidationError

EPS_MAG = 1e-12
EPS_LOG = 1e-10

WINDOWS = ("hann", "hamming", "rect")


@dataclass(frozen=True)
class StftConfig:
    frame_length: int = 512
    hop_length: int = 128
    window: str = "hann"
    fft_size: int = 512

    def __post_init__(self):
        if self.window not in WINDOWS:
            raise ConfigError(f"unknown window {self.window!r}; expected one of {WINDOWS}")
        if self.frame_length < 2 or self.hop_length < 1:
            raise ConfigError("frame_length must be >= 2 and hop_length >= 1")
        if self.hop_length > self.frame_length:
            raise ConfigError(
                f"hop_length ({self.hop_length}) exceeds frame_length ({self.frame_length})")
        if self.fft_size < self.frame_length:
            raise ConfigError(
                f"fft_size ({self.fft_size}) must be >= frame_length ({self.frame_length})")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        return 1 + n_samples // self.hop_length

    def to_dict(self) -> dict:
        return asdict(self)


def window(cfg: StftConfig, dtype=torch.float64) -> torch.Tensor:
    """Periodic analysis window of length ``frame_length``."""
    n = cfg.frame_length
    if cfg.window == "hann":
        return torch.hann_window(n, periodic=True, dtype=dtype)
    if cfg.window == "hamming":
        return torch.hamming_window(n, periodic=True, dtype=dtype)
    return torch.ones(n, dtype=dtype)


def overlap_envelope(cfg: StftConfig, power: int = 1) -> np.ndarray:
    """One period (``hop_length`` samples) of the overlap-added ``window ** power``."""
    wp = window(cfg).numpy() ** power
    env = np.zeros(cfg.hop_length)
    for start in range(0, cfg.frame_length, cfg.hop_length):
        seg = wp[start:start + cfg.hop_length]
        env[:len(seg)] += seg
    return env


def is_cola(cfg: StftConfig, rtol: float = 1e-9) -> bool:
    """Constant overlap-add: the window summed at this hop is a positive constant."""
    env = overlap_envelope(cfg)
    return env.min() > 0 and (env.max() - env.min()) <= rtol * env.max()


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    arr = np.asarray(x)
    if arr.dtype.kind in "iu":
        arr = arr.astype(np.float64)
    return torch.from_numpy(np.ascontiguousarray(arr))


def frames(x, cfg: StftConfig) -> torch.Tensor:
    """Reflect-pad and slice ``x`` (..., n) into unwindowed frames (..., T, frame_length)."""
    x = _as_tensor(x)
    n = x.shape[-1]
    if n < cfg.frame_length:
        raise LengthError(f"signal of {n} samples is shorter than one frame ({cfg.frame_length})")
    if not torch.isfinite(x).all():
        raise ValidationError("signal contains non-finite samples")
    pad = cfg.frame_length // 2
    lead = x.shape[:-1]
    flat = x.reshape(-1, 1, n)
    padded = torch.nn.functional.pad(flat, (pad, pad), mode="reflect").reshape(*lead, n + 2 * pad)
    return padded.unfold(-1, cfg.frame_length, cfg.hop_length)


def stft(x, cfg: StftConfig) -> torch.Tensor:
    """Complex one-sided STFT, shape (..., T, fft_size // 2 + 1)."""
    fr = frames(x, cfg)
    win = window(cfg, dtype=fr.dtype).to(fr.device)
    return torch.fft.rfft(fr * win, n=cfg.fft_size, dim=-1)


def istft(spec: torch.Tensor, cfg: StftConfig, length: int | None = None) -> torch.Tensor:
    """Inverse of :func:`stft` by weighted overlap-add.

    Frames are inverse-transformed, windowed again and overlap-added; the sum is
    divided by the squared-window envelope, which is exact wherever that
    envelope is nonzero (always, for a COLA configuration). ``length`` trims the output to the
    original number of samples (defaults to ``(T - 1) * hop_length``).
    """
    if not is_cola(cfg):
        raise ConfigError(
            f"{cfg.window} window with frame {cfg.frame_length} / hop {cfg.hop_length} "
            "does not satisfy constant overlap-add")
    spec = _as_tensor(spec)
    n_frames = spec.shape[-2]
    fr = torch.fft.irfft(spec, n=cfg.fft_size, dim=-1)[..., :cfg.frame_length]
    win = window(cfg, dtype=fr.dtype).to(fr.device)
    fr = fr * win
    total = cfg.frame_length + (n_frames - 1) * cfg.hop_length
    lead = fr.shape[:-2]
    # fold expects (N, C * kernel, L)
    cols = fr.reshape(-1, n_frames, cfg.frame_length).transpose(1, 2)
    out = torch.nn.functional.fold(
        cols, output_size=(1, total), kernel_size=(1, cfg.frame_length),
        stride=(1, cfg.hop_length)).reshape(*lead, total)
    env = torch.nn.functional.fold(
        (win ** 2).reshape(1, -1, 1).expand(1, -1, n_frames),
        output_size=(1, total), kernel_size=(1, cfg.frame_length),
        stride=(1, cfg.hop_length)).reshape(total)
    out = out / env.clamp_min(1e-11)
    pad = cfg.frame_length // 2
    if length is None:
        length = (n_frames - 1) * cfg.hop_length
    return out[..., pad:pad + length]


def magnitude(spec: torch.Tensor, eps: float = EPS_MAG) -> torch.Tensor:
    """``sqrt(re^2 + im^2 + eps)``; the epsilon keeps the gradient finite at zero."""
    spec = _as_tensor(spec)
    return torch.sqrt(spec.real ** 2 + spec.imag ** 2 + eps)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, cfg: StftConfig, sample_rate: int,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular mel filterbank, shape (n_mels, n_bins).

    Triangles are evaluated at the bin centre frequencies; a filter whose
    triangle misses every bin centre is a configuration error.
    """
    fmax = sample_rate / 2 if fmax is None else fmax
    if not 0 <= fmin < fmax <= sample_rate / 2:
        raise ConfigError(f"need 0 <= fmin < fmax <= {sample_rate / 2}, got {fmin}, {fmax}")
    if n_mels < 1 or n_mels > cfg.n_bins:
        raise ConfigError(f"n_mels={n_mels} must be in [1, {cfg.n_bins}]")
    bin_hz = np.arange(cfg.n_bins) * sample_rate / cfg.fft_size
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_hz - lo) / (mid - lo)
    falling = (hi - bin_hz) / (hi - mid)
    fb = np.clip(np.minimum(rising, falling), 0.0, None)
    empty = np.flatnonzero(fb.sum(axis=1) <= 0)
    if len(empty):
        raise ConfigError(
            f"{len(empty)} mel filters cover no FFT bin; reduce n_mels ({n_mels}) "
            f"or increase fft_size ({cfg.fft_size})")
    return fb


def log_mel(mag, cfg: StftConfig, sample_rate: int, n_mels: int = 40, fmin: float = 0.0,
            fmax: float | None = None, eps: float = EPS_LOG) -> torch.Tensor:
    """``log(filterbank @ power + eps)`` for a magnitude spectrogram (..., T, F) -> (..., T, n_mels)."""
    mag = _as_tensor(mag)
    if mag.shape[-1] != cfg.n_bins:
        raise ConfigError(f"magnitude has {mag.shape[-1]} bins, config expects {cfg.n_bins}")
    fb = torch.from_numpy(mel_filterbank(n_mels, cfg, sample_rate, fmin, fmax)).to(mag)
    return torch.log((mag ** 2) @ fb.T + eps)


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 1 or len(self.samples) < 1:
            raise ValidationError("waveform must be a non-empty 1-D array")
        if not np.isfinite(self.samples).all():
            raise ValidationError("waveform contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise ValidationError(f"sample rate must be positive, got {self.sample_rate}")

    def __len__(self):
        return len(self.samples)


def read_wav(path, expected_rate: int | None = None) -> Waveform:
    """Read a mono PCM16 or float WAV file into float64 samples in [-1, 1]."""
    rate, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise ValidationError(f"{path}: expected mono audio, got shape {data.shape}")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype.kind == "f":
        samples = data.astype(np.float64)
    else:
        raise ValidationError(f"{path}: unsupported sample format {data.dtype}")
    if expected_rate is not None and rate != expected_rate:
        raise ValidationError(f"{path}: sample rate {rate} != expected {expected_rate}")
    return Waveform(samples, rate)


def write_wav(path, wav: Waveform, fmt: str = "pcm16") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    x = np.asarray(wav.samples, dtype=np.float64)
    if fmt == "pcm16":
        data = np.round(np.clip(x, -1.0, 32767 / 32768) * 32768.0).astype(np.int16)
    elif fmt == "float32":
        data = x.astype(np.float32)
    else:
        raise ConfigError(f"unknown WAV format {fmt!r}")
    wavfile.write(str(path), int(wav.sample_rate), data)
    return path
