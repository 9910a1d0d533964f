"""Objective metrics: SI-SDR, extended STOI and frame senone accuracy.

Everything here is plain numpy on float64 copies of the inputs, so metric
values never depend on the dtype a model was trained in.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import resample_poly

from .errors import DataError, LengthError, ValidationError

SI_SDR_CAP_DB = 100.0

# Extended STOI constants (Jensen & Taal); frozen so scores stay comparable.
ESTOI_FS = 10000
ESTOI_FRAME = 256
ESTOI_HOP = 128
ESTOI_NFFT = 512
ESTOI_BANDS = 15
ESTOI_MIN_FREQ = 150.0
ESTOI_SEGMENT = 30
ESTOI_DYN_RANGE_DB = 40.0
_EPS = np.finfo(np.float64).eps


def _as_array(x) -> np.ndarray:
    if hasattr(x, "samples"):
        x = x.samples
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64).reshape(-1)


def si_sdr(estimate, reference) -> float:
    """Scale-invariant SDR in dB, capped at +100 dB for a vanishing residual."""
    est, ref = _as_array(estimate), _as_array(reference)
    if est.shape != ref.shape:
        raise LengthError(f"length mismatch: estimate {est.shape[0]} vs reference {ref.shape[0]}")
    est = est - est.mean()
    ref = ref - ref.mean()
    ref_energy = np.dot(ref, ref)
    if ref_energy <= 0:
        raise ValidationError("reference signal is identically zero")
    target = (np.dot(est, ref) / ref_energy) * ref
    residual = est - target
    t_energy = np.dot(target, target)
    r_energy = np.dot(residual, residual)
    if r_energy < 1e-12 * t_energy:
        return SI_SDR_CAP_DB
    if t_energy == 0:
        return -SI_SDR_CAP_DB
    return float(10.0 * np.log10(t_energy / r_energy))


def third_octave_bands(fs=ESTOI_FS, nfft=ESTOI_NFFT, n_bands=ESTOI_BANDS,
                       min_freq=ESTOI_MIN_FREQ) -> np.ndarray:
    """Binary band matrix (n_bands, nfft // 2 + 1) grouping FFT bins into one-third octaves."""
    freqs = np.linspace(0, fs, nfft + 1)[:nfft // 2 + 1]
    k = np.arange(n_bands, dtype=np.float64)
    lows = min_freq * 2.0 ** ((2 * k - 1) / 6)
    highs = min_freq * 2.0 ** ((2 * k + 1) / 6)
    bands = np.zeros((n_bands, len(freqs)))
    for i in range(n_bands):
        lo = np.argmin((freqs - lows[i]) ** 2)
        hi = np.argmin((freqs - highs[i]) ** 2)
        bands[i, lo:hi] = 1.0
    return bands


_BANDS = third_octave_bands()


def _analysis_window(n):
    # symmetric Hann without the zero end points
    return np.hanning(n + 2)[1:-1]


def _frame(x, n, hop):
    starts = np.arange(0, len(x) - n, hop)
    return np.stack([x[s:s + n] for s in starts]) if len(starts) else np.zeros((0, n))


def _overlap_add(fr, hop):
    if len(fr) == 0:
        return np.zeros(0)
    n = fr.shape[1]
    out = np.zeros((len(fr) - 1) * hop + n)
    for i, f in enumerate(fr):
        out[i * hop:i * hop + n] += f
    return out


def _drop_silent_frames(ref, est):
    w = _analysis_window(ESTOI_FRAME)
    ref_fr = _frame(ref, ESTOI_FRAME, ESTOI_HOP) * w
    est_fr = _frame(est, ESTOI_FRAME, ESTOI_HOP) * w
    if len(ref_fr) == 0:
        return np.zeros(0), np.zeros(0)
    energy_db = 20 * np.log10(np.linalg.norm(ref_fr, axis=1) + _EPS)
    keep = energy_db > energy_db.max() - ESTOI_DYN_RANGE_DB
    return _overlap_add(ref_fr[keep], ESTOI_HOP), _overlap_add(est_fr[keep], ESTOI_HOP)


def _band_envelopes(x):
    w = _analysis_window(ESTOI_FRAME)
    spec = np.fft.rfft(_frame(x, ESTOI_FRAME, ESTOI_HOP) * w, n=ESTOI_NFFT, axis=1)
    return np.sqrt(_BANDS @ (np.abs(spec) ** 2).T)  # (bands, frames)


def _normalize(seg, axis):
    seg = seg - seg.mean(axis=axis, keepdims=True)
    return seg / (np.linalg.norm(seg, axis=axis, keepdims=True) + _EPS)


def resample(x, sr_in: int, sr_out: int) -> np.ndarray:
    if sr_in == sr_out:
        return x
    ratio = Fraction(sr_out, sr_in)
    return resample_poly(x, ratio.numerator, ratio.denominator)


def estoi(estimate, reference, sr: int) -> float:
    """Extended short-time objective intelligibility of ``estimate`` against ``reference``.

    Both signals are resampled to 10 kHz, frames more than 40 dB below the
    loudest reference frame are dropped, and one-third-octave envelopes are
    compared over every sliding 30-frame segment after row and column
    normalisation.
    """
    est, ref = _as_array(estimate), _as_array(reference)
    if est.shape != ref.shape:
        raise LengthError(f"length mismatch: estimate {est.shape[0]} vs reference {ref.shape[0]}")
    ref = resample(ref, sr, ESTOI_FS)
    est = resample(est, sr, ESTOI_FS)
    ref, est = _drop_silent_frames(ref, est)
    if len(ref) < ESTOI_FRAME:
        raise ValidationError("no speech frames left after silence removal")
    ref_env = _band_envelopes(ref)
    est_env = _band_envelopes(est)
    if ref_env.shape[1] < ESTOI_SEGMENT:
        raise ValidationError(
            f"signal too short for eSTOI: {ref_env.shape[1]} frames < {ESTOI_SEGMENT}")
    # (segments, bands, N)
    ref_seg = sliding_window_view(ref_env, ESTOI_SEGMENT, axis=1).transpose(1, 0, 2)
    est_seg = sliding_window_view(est_env, ESTOI_SEGMENT, axis=1).transpose(1, 0, 2)
    ref_n = _normalize(_normalize(ref_seg, axis=2), axis=1)
    est_n = _normalize(_normalize(est_seg, axis=2), axis=1)
    score = np.sum(ref_n * est_n) / (ESTOI_SEGMENT * ref_n.shape[0])
    return float(np.clip(score, -1.0, 1.0))


def frame_accuracy(logits, labels) -> float:
    """Fraction of frames whose argmax logit equals the senone label."""
    logits = logits.detach().cpu().numpy() if hasattr(logits, "detach") else np.asarray(logits)
    labels = labels.detach().cpu().numpy() if hasattr(labels, "detach") else np.asarray(labels)
    logits = logits.reshape(-1, logits.shape[-1])
    labels = labels.reshape(-1)
    if logits.shape[0] != labels.shape[0]:
        raise LengthError(f"frame count mismatch: {logits.shape[0]} logits vs {labels.shape[0]} labels")
    if labels.size == 0:
        raise ValidationError("no frames to score")
    return float(np.mean(np.argmax(logits, axis=-1) == labels))


@dataclass
class UtteranceScore:
    utt_id: str
    si_sdr_db: float
    estoi: float
    frame_accuracy: float | None = None


@dataclass
class MetricReport:
    per_utterance: list[UtteranceScore]
    si_sdr_db: float = field(init=False)
    estoi: float = field(init=False)
    frame_accuracy: float | None = field(init=False)

    def __post_init__(self):
        if not self.per_utterance:
            raise ValidationError("a metric report needs at least one utterance")
        n = len(self.per_utterance)
        self.si_sdr_db = math.fsum(u.si_sdr_db for u in self.per_utterance) / n
        self.estoi = math.fsum(u.estoi for u in self.per_utterance) / n
        accs = [u.frame_accuracy for u in self.per_utterance if u.frame_accuracy is not None]
        self.frame_accuracy = math.fsum(accs) / len(accs) if accs else None

    def to_dict(self) -> dict:
        return {
            "si_sdr_db": self.si_sdr_db,
            "estoi": self.estoi,
            "frame_accuracy": self.frame_accuracy,
            "per_utterance": [asdict(u) for u in self.per_utterance],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls([UtteranceScore(**u) for u in d["per_utterance"]])

    def table(self, label: str = "Enhanced") -> str:
        return format_table([(label, self)])


def format_table(rows) -> str:
    """Paper-style table: SI-SDR in dB and eSTOI x 100, one decimal each."""
    width = max([len("Features")] + [len(name) for name, _ in rows])
    lines = [f"{'Features':<{width}}  {'SI-SDR':>6}  {'eSTOI':>6}  {'FrameAcc':>8}"]
    for name, rep in rows:
        acc = "-" if rep.frame_accuracy is None else f"{100 * rep.frame_accuracy:.1f}"
        lines.append(f"{name:<{width}}  {rep.si_sdr_db:>6.1f}  {100 * rep.estoi:>6.1f}  {acc:>8}")
    return "\n".join(lines)


def evaluate_manifest(path, frame_scorer=None) -> MetricReport:
    """Score a line-delimited manifest of ``{utt_id, estimate, reference[, alignment]}`` records.

    ``frame_scorer(waveform, labels) -> accuracy`` is called for records with an
    alignment path; relative paths resolve against the manifest's directory.
    """
    from .alignments import read_alignments
    from .dsp import read_wav

    path = Path(path)
    scores = []
    for line_no, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        try:
            est = read_wav(path.parent / rec["estimate"])
            ref = read_wav(path.parent / rec["reference"], expected_rate=est.sample_rate)
        except KeyError as exc:
            raise DataError(f"{path}:{line_no}: record lacks {exc}") from exc
        except FileNotFoundError as exc:
            raise DataError(f"{path}:{line_no}: {exc}") from exc
        acc = None
        if rec.get("alignment") and frame_scorer is not None:
            labels = read_alignments(path.parent / rec["alignment"])[rec["utt_id"]]
            acc = frame_scorer(est, labels)
        scores.append(UtteranceScore(
            rec["utt_id"], si_sdr(est, ref), estoi(est, ref, est.sample_rate), acc))
    return MetricReport(scores)
