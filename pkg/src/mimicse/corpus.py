"""Synthetic noisy-speech corpus with exact senone alignments, plus external corpus ingestion.

Each synthetic utterance is a random sequence of senone segments (5-30
frames). A senone is a fixed sound prototype: a harmonic or noise excitation
shaped by two formant resonators at senone-specific frequencies and played
at a senone-specific level. Because the label of every STFT frame is known by
construction, the acoustic model and the non-parallel trainer can be tested
without any real corpus.
"""
from __future__ import annotations

import hashlib
import json
import logging
import shutil
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .alignments import read_alignments, write_alignments
from .dsp import StftConfig, read_wav, write_wav
from .errors import ConfigError, DataError, ValidationError

log = logging.getLogger(__name__)

NOISE_KINDS = ("white", "pink", "babble")
SPLITS = ("train", "valid", "test")


@dataclass
class CorpusSpec:
    n_utterances: int = 200
    n_senones: int = 12
    sample_rate: int = 16000
    utt_length_range: tuple = (1.0, 1.5)
    n_channels: int = 2
    snr_range_db: tuple = (-3.0, 6.0)
    noise_kinds: tuple = NOISE_KINDS
    seed: int = 0
    split_fractions: tuple = (0.8, 0.1, 0.1)
    level_spread_db: float = 18.0
    speech_rms: float = 0.05
    stft: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        if isinstance(self.stft, dict):
            self.stft = StftConfig(**self.stft)
        self.utt_length_range = tuple(float(v) for v in self.utt_length_range)
        self.snr_range_db = tuple(float(v) for v in self.snr_range_db)
        self.noise_kinds = tuple(self.noise_kinds)
        self.split_fractions = tuple(float(v) for v in self.split_fractions)
        if self.n_utterances < 1:
            raise ConfigError("n_utterances must be >= 1")
        if self.n_senones < 2:
            raise ConfigError("n_senones must be >= 2")
        if self.n_channels < 1:
            raise ConfigError("n_channels must be >= 1")
        if len(self.snr_range_db) != 2 or not np.all(np.isfinite(self.snr_range_db)) \
                or self.snr_range_db[0] > self.snr_range_db[1]:
            raise ConfigError(f"snr_range_db must be a finite [lo, hi] interval, got {self.snr_range_db}")
        lo, hi = self.utt_length_range
        if not 0 < lo <= hi:
            raise ConfigError(f"bad utt_length_range {self.utt_length_range}")
        if lo * self.sample_rate < self.stft.frame_length:
            raise ConfigError("utterances must be at least one STFT frame long")
        unknown = set(self.noise_kinds) - set(NOISE_KINDS)
        if unknown or not self.noise_kinds:
            raise ConfigError(f"noise_kinds must be a non-empty subset of {NOISE_KINDS}")
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1) > 1e-9 \
                or min(self.split_fractions) < 0:
            raise ConfigError("split_fractions must be three nonnegative values summing to 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("utt_length_range", "snr_range_db", "noise_kinds", "split_fractions"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown corpus spec fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"invalid corpus spec: {exc}") from exc


@dataclass
class UtteranceRecord:
    utt_id: str
    clean: np.ndarray | None
    noisy: list
    labels: np.ndarray
    sample_rate: int
    snr_db: list = field(default_factory=list)
    split: str = "train"
    metadata: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SenonePrototype:
    formants: tuple
    bandwidths: tuple
    voiced: bool
    level_db: float


def senone_prototypes(n_senones: int, level_spread_db: float = 18.0) -> list[SenonePrototype]:
    """Fixed, spectrally separated sound prototypes (independent of the corpus seed)."""
    rng = np.random.default_rng(1234 + n_senones)
    f1 = np.geomspace(300.0, 1100.0, n_senones)
    f2 = np.geomspace(1200.0, 3400.0, n_senones)[rng.permutation(n_senones)]
    levels = np.linspace(0.0, -level_spread_db, n_senones)[rng.permutation(n_senones)]
    protos = []
    for s in range(n_senones):
        voiced = s % 4 != 3
        protos.append(SenonePrototype(
            formants=(float(f1[s]), float(f2[s])),
            bandwidths=(90.0 + 0.06 * f1[s], 120.0 + 0.05 * f2[s]),
            voiced=voiced,
            level_db=float(levels[s])))
    return protos


def _resonator(excitation, freq, bw, sr):
    r = np.exp(-np.pi * bw / sr)
    theta = 2 * np.pi * freq / sr
    a = [1.0, -2 * r * np.cos(theta), r * r]
    # unit gain at the centre frequency
    gain = abs(1 - r * np.exp(-2j * theta)) * (1 - r)
    return lfilter([gain], a, excitation)


def _voiced_excitation(n, sr, rng):
    f0 = rng.uniform(100.0, 180.0)
    drift = 1 + 0.05 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * np.arange(n) / sr
                              + rng.uniform(0, 2 * np.pi))
    phase = 2 * np.pi * np.cumsum(f0 * drift) / sr
    n_harm = int((sr / 2 - 200) // (f0 * 1.05))
    k = np.arange(1, n_harm + 1)[:, None]
    exc = np.cos(k * phase[None, :]).sum(axis=0) / np.sqrt(n_harm)
    return exc + 0.05 * rng.standard_normal(n)


def _segments(n_frames, n_senones, rng):
    labels = np.empty(n_frames, dtype=np.int64)
    t, prev = 0, -1
    while t < n_frames:
        length = int(rng.integers(5, 31))
        s = int(rng.integers(0, n_senones - 1))
        if s >= prev >= 0:
            s += 1  # never repeat the previous senone
        labels[t:t + length] = s
        prev = s
        t += length
    return labels


def _gate(sample_labels, senone, ramp):
    gate = (sample_labels == senone).astype(np.float64)
    if ramp > 1 and gate.any():
        kernel = np.hanning(ramp + 2)[1:-1]
        gate = np.convolve(gate, kernel / kernel.sum(), mode="same")
    return gate


def synth_clean(labels, spec: CorpusSpec, rng) -> np.ndarray:
    """Render clean audio whose STFT frame ``t`` (centred on ``t * hop``) carries ``labels[t]``."""
    hop = spec.stft.hop_length
    sr = spec.sample_rate
    n = (len(labels) - 1) * hop + hop // 2
    sample_labels = labels[np.minimum((np.arange(n) + hop // 2) // hop, len(labels) - 1)]
    protos = senone_prototypes(spec.n_senones, spec.level_spread_db)
    voiced_exc = _voiced_excitation(n, sr, rng)
    noise_exc = rng.standard_normal(n)
    out = np.zeros(n)
    ramp = int(0.005 * sr)
    for s in np.unique(labels):
        p = protos[s]
        y = voiced_exc if p.voiced else noise_exc
        for f, bw in zip(p.formants, p.bandwidths):
            y = _resonator(y, f, bw, sr)
        y = y / (np.sqrt(np.mean(y ** 2)) + 1e-12)
        jitter = rng.uniform(-2.0, 2.0)
        out += _gate(sample_labels, s, ramp) * y * 10 ** ((p.level_db + jitter) / 20)
    return out


def make_noise(kind: str, n: int, sr: int, rng) -> np.ndarray:
    if kind == "white":
        return rng.standard_normal(n)
    if kind == "pink":
        spec = np.fft.rfft(rng.standard_normal(n))
        f = np.arange(len(spec), dtype=np.float64)
        f[0] = 1.0
        return np.fft.irfft(spec / np.sqrt(f), n)
    if kind == "babble":
        t = np.arange(n) / sr
        out = np.zeros(n)
        for _ in range(4):
            base = _resonator(rng.standard_normal(n), rng.uniform(300, 2500), 800.0, sr)
            mod = 1 + 0.9 * np.sin(2 * np.pi * rng.uniform(2.0, 6.0) * t + rng.uniform(0, 2 * np.pi))
            out += base * mod
        return out
    raise ConfigError(f"unknown noise kind {kind!r}")


def mix_at_snr(clean, noise, snr_db: float, rng=None) -> np.ndarray:
    """Return ``clean + g * noise_crop`` with ``g`` chosen so the mix has exactly ``snr_db``.

    A random crop of ``noise`` (length of ``clean``) is used when the noise is longer.
    """
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if len(noise) < len(clean):
        raise ValidationError(f"noise ({len(noise)}) shorter than clean ({len(clean)})")
    offset = 0
    if len(noise) > len(clean):
        rng = rng or np.random.default_rng(0)
        offset = int(rng.integers(0, len(noise) - len(clean) + 1))
    noise = noise[offset:offset + len(clean)]
    p_clean = np.mean(clean ** 2)
    p_noise = np.mean(noise ** 2)
    if p_clean <= 0 or p_noise <= 0:
        raise ValidationError("clean and noise must both have nonzero power")
    gain = np.sqrt(p_clean / (p_noise * 10 ** (snr_db / 10)))
    return clean + gain * noise


def measured_snr_db(clean, noisy) -> float:
    clean = np.asarray(clean, dtype=np.float64)
    resid = np.asarray(noisy, dtype=np.float64) - clean
    return float(10 * np.log10(np.mean(clean ** 2) / np.mean(resid ** 2)))


def split_assignment(spec: CorpusSpec) -> list[str]:
    n = spec.n_utterances
    order = np.random.default_rng([spec.seed, 99]).permutation(n)
    n_train = int(round(spec.split_fractions[0] * n))
    n_valid = int(round(spec.split_fractions[1] * n))
    splits = [""] * n
    for rank, idx in enumerate(order):
        splits[idx] = "train" if rank < n_train else "valid" if rank < n_train + n_valid else "test"
    return splits


def utt_id_for(index: int) -> str:
    return f"utt{index:05d}"


def synth_utterance(spec: CorpusSpec, index: int, split: str = "train") -> UtteranceRecord:
    """Generate one utterance; a pure function of ``(spec, index)``."""
    rng = np.random.default_rng([spec.seed, index])
    sr, hop = spec.sample_rate, spec.stft.hop_length
    dur = rng.uniform(*spec.utt_length_range)
    n_frames = max(int(round(dur * sr / hop)), spec.stft.frame_length // hop + 1)
    labels = _segments(n_frames, spec.n_senones, rng)
    clean = synth_clean(labels, spec, rng)
    clean *= spec.speech_rms / np.sqrt(np.mean(clean ** 2))
    noisy, snrs, kinds = [], [], []
    for _ in range(spec.n_channels):
        kind = spec.noise_kinds[int(rng.integers(0, len(spec.noise_kinds)))]
        snr = float(rng.uniform(*spec.snr_range_db))
        noise = make_noise(kind, len(clean) + sr // 4, sr, rng)
        noisy.append(mix_at_snr(clean, noise, snr, rng))
        snrs.append(snr)
        kinds.append(kind)
    peak = max(np.abs(x).max() for x in [clean, *noisy])
    if peak > 0.99:
        # one common gain keeps clean and noisy consistent
        g = 0.99 / peak
        clean = clean * g
        noisy = [x * g for x in noisy]
    return UtteranceRecord(utt_id_for(index), clean, noisy, labels, sr, snrs, split,
                           {"noise_kinds": kinds})


def _file_hash(paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def synth_corpus(spec: CorpusSpec, out_dir) -> Path:
    """Write the corpus (WAV PCM16 audio, alignments, manifest) and return the manifest path.

    Files are rendered into a temporary directory and moved into place only
    after everything succeeded, so a failure leaves no partial corpus behind.
    """
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".synth-", dir=out_dir.parent))
    try:
        splits = split_assignment(spec)
        alignments, records = {}, []
        for i in range(spec.n_utterances):
            utt = synth_utterance(spec, i, splits[i])
            clean_rel = f"clean/{utt.utt_id}.wav"
            write_wav(tmp / clean_rel, _wave(utt.clean, spec.sample_rate))
            noisy_rel = []
            for c, x in enumerate(utt.noisy):
                rel = f"noisy/{utt.utt_id}_ch{c}.wav"
                write_wav(tmp / rel, _wave(x, spec.sample_rate))
                noisy_rel.append(rel)
            alignments[utt.utt_id] = utt.labels
            records.append({"utt_id": utt.utt_id, "split": utt.split, "clean_path": clean_rel,
                            "noisy_paths": noisy_rel, "labels_path": "alignments.txt",
                            "snr_db": utt.snr_db})
        write_alignments(tmp / "alignments.txt", alignments)
        (tmp / "corpus_spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True))
        (tmp / "manifest.jsonl").write_text(
            "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
        if out_dir.exists():
            shutil.rmtree(out_dir)
        tmp.rename(out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return out_dir / "manifest.jsonl"


def corpus_hash(manifest) -> str:
    """Hash over the manifest and every file it references, in a fixed order."""
    manifest = Path(manifest)
    root = manifest.parent
    paths = {manifest}
    for rec in _read_manifest(manifest):
        for key in ("clean_path", "labels_path"):
            if rec.get(key):
                paths.add(root / rec[key])
        paths.update(root / p for p in rec.get("noisy_paths", []))
    return _file_hash(sorted(paths))


def _wave(x, sr):
    from .dsp import Waveform
    return Waveform(x, sr)


def _read_manifest(path) -> list[dict]:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except FileNotFoundError as exc:
        raise DataError(f"manifest not found: {path}", [str(path)]) from exc
    records = []
    for no, line in enumerate(lines, 1):
        if line.strip():
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{no}: invalid JSON record") from exc
    return records


@dataclass
class Rejection:
    utt_id: str
    reason: str


def ingest_external(manifest, stft_cfg: StftConfig, expected_rate: int | None = None,
                    require_clean: bool = False):
    """Load and validate a WAV + alignment corpus described by a manifest.

    Returns ``(records, rejections)``. Utterances with missing files,
    inconsistent sample rates or label counts that disagree with the STFT
    frame count are rejected and listed; the rest load normally.
    """
    manifest = Path(manifest)
    root = manifest.parent
    records, rejections = [], []
    align_cache: dict[str, dict] = {}
    for rec in _read_manifest(manifest):
        utt_id = rec.get("utt_id", "?")
        try:
            labels_path = root / rec["labels_path"]
            if str(labels_path) not in align_cache:
                if not labels_path.exists():
                    raise FileNotFoundError(labels_path)
                align_cache[str(labels_path)] = read_alignments(labels_path)
            aligns = align_cache[str(labels_path)]
            if utt_id not in aligns:
                raise DataError(f"no alignment for {utt_id} in {labels_path}")
            labels = aligns[utt_id]
            noisy = []
            rate = expected_rate
            for p in rec.get("noisy_paths", []):
                w = _read_checked(root / p, rate)
                rate = w.sample_rate
                noisy.append(w.samples)
            clean = None
            if rec.get("clean_path"):
                w = _read_checked(root / rec["clean_path"], rate)
                rate = w.sample_rate
                clean = w.samples
            elif require_clean:
                raise DataError("record has no clean_path")
            if not noisy and clean is None:
                raise DataError("record lists no audio")
            lengths = {len(x) for x in noisy + ([clean] if clean is not None else [])}
            if len(lengths) != 1:
                raise DataError(f"channel lengths differ: {sorted(lengths)}")
            n = lengths.pop()
            if n < stft_cfg.frame_length:
                raise DataError(f"audio shorter than one frame ({n} samples)")
            expected = stft_cfg.n_frames(n)
            if len(labels) != expected:
                raise DataError(
                    f"alignment has {len(labels)} frames but audio yields {expected} frames")
        except FileNotFoundError as exc:
            rejections.append(Rejection(utt_id, f"missing file: {exc.args[0] if exc.args else exc}"))
            continue
        except (DataError, ValidationError, KeyError) as exc:
            rejections.append(Rejection(utt_id, str(exc)))
            continue
        records.append(UtteranceRecord(utt_id, clean, noisy, labels, rate,
                                       list(rec.get("snr_db", [])), rec.get("split", "train")))
    for r in rejections:
        log.warning("rejected %s: %s", r.utt_id, r.reason)
    return records, rejections


def _read_checked(path, rate):
    if not Path(path).exists():
        raise FileNotFoundError(str(path))
    return read_wav(path, expected_rate=rate)


def load_corpus(manifest, stft_cfg: StftConfig, splits=SPLITS) -> dict[str, list[UtteranceRecord]]:
    """Ingest a corpus strictly: any rejected utterance is a :class:`DataError`."""
    records, rejections = ingest_external(manifest, stft_cfg)
    if rejections:
        raise DataError(f"{len(rejections)} utterances failed validation: "
                        + "; ".join(f"{r.utt_id}: {r.reason}" for r in rejections[:5]),
                        [r.utt_id for r in rejections])
    out = {s: [] for s in splits}
    for r in records:
        if r.split in out:
            out[r.split].append(r)
    seen = {}
    for s, recs in out.items():
        for r in recs:
            if r.utt_id in seen:
                raise DataError(f"{r.utt_id} appears in both {seen[r.utt_id]} and {s}")
            seen[r.utt_id] = s
    return out
