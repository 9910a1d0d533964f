"""Desk-scale acceptance suite.

Each test prints one ``criterion N: PASS|FAIL`` line. The training criteria
synthesise the desk corpus, train the acoustic model and then the enhancers
from the YAML files in ``configs/desk``; on one CPU core the whole module
takes roughly 40 minutes. Select it with ``pytest -m acceptance``.
"""
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml

from mimicse import cli
from mimicse.acoustic_model import fingerprint, load_am
from mimicse.corpus import CorpusSpec, load_corpus, mix_at_snr, synth_utterance
from mimicse.dsp import StftConfig, istft, log_mel, magnitude, stft, window
from mimicse.enhancer import enhance, load_enhancer
from mimicse.losses import LossConfig, loss_kd, loss_mimic_hard, loss_mimic_soft, loss_specmag_l1, loss_time_l1
from mimicse.metrics import SI_SDR_CAP_DB, estoi, si_sdr
from mimicse.trainer import ExperimentConfig, gradcheck, run_experiment, set_deterministic

pytestmark = pytest.mark.acceptance

CONFIGS = Path(__file__).resolve().parents[1] / "configs" / "desk"
PARALLEL_MODES = ("parallel_T", "parallel_T_SM", "parallel_T_SM_mimic")
SEEDS = (0, 1, 2)


def verdict(capsys, n, ok, detail):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


@dataclass
class Desk:
    root: Path
    manifest: Path
    am: Path
    corpus: dict

    def config(self, name, seed, **optimizer):
        raw = yaml.safe_load((CONFIGS / f"{name}.yaml").read_text())
        raw["am_checkpoint"] = str(self.am)
        raw["data"]["manifest"] = str(self.manifest)
        raw["optimizer"] = {**raw["optimizer"], **optimizer, "seed": seed}
        return ExperimentConfig.from_dict(raw)

    def run(self, name, seed, tag="", **optimizer):
        cfg = self.config(name, seed, **optimizer)
        start = time.perf_counter()
        result = run_experiment(cfg, self.root / f"{name}_{seed}{tag}", corpus=self.corpus)
        return result, time.perf_counter() - start


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    manifest = root / "corpus" / "manifest.jsonl"
    assert cli.main(["synth", "--config", str(CONFIGS / "corpus.yaml"), "--out", str(root / "corpus"),
                     "--quiet"]) == 0
    assert cli.main(["train-am", "--config", str(CONFIGS / "am.yaml"), "--corpus", str(manifest),
                     "--preset", "converged", "--seed", "0", "--out", str(root / "am"), "--quiet"]) == 0
    return Desk(root, manifest, root / "am" / "am_converged.pt", load_corpus(manifest, StftConfig()))


@pytest.fixture(scope="module")
def nonparallel(desk):
    return desk.run("nonparallel_mimic", 0)


@pytest.fixture(scope="module")
def joint(desk):
    return desk.run("nonparallel_joint", 0)


def naive_stft(x, cfg):
    pad = cfg.frame_length // 2
    xp = np.pad(x, pad, mode="reflect")
    win = window(cfg).numpy()
    n = np.arange(cfg.frame_length)
    basis = np.exp(-2j * np.pi * np.arange(cfg.n_bins)[:, None] * n[None, :] / cfg.fft_size)
    return np.stack([basis @ (xp[t * cfg.hop_length:t * cfg.hop_length + cfg.frame_length] * win)
                     for t in range(1 + len(x) // cfg.hop_length)])


def test_criterion_01_dsp_exactness(capsys):
    start = time.perf_counter()
    cfg = StftConfig()
    rng = np.random.default_rng(0)
    stft_err, cola_err = 0.0, 0.0
    for length in (4000, 16000, 16127):
        x = rng.standard_normal(length)
        spec = stft(torch.as_tensor(x), cfg).numpy()
        ref = naive_stft(x, cfg)
        stft_err = max(stft_err, np.abs(spec - ref).max() / np.abs(ref).max())
        back = istft(torch.as_tensor(spec), cfg, length).numpy()
        cola_err = max(cola_err, np.linalg.norm(back - x) / np.linalg.norm(x))
    elapsed = time.perf_counter() - start
    verdict(capsys, 1, stft_err <= 1e-6 and cola_err <= 1e-6 and elapsed < 10,
            f"stft vs naive DFT {stft_err:.1e}, round trip {cola_err:.1e}, {elapsed:.1f} s")


def test_criterion_02_metric_oracles(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    s = rng.standard_normal(16000)
    s -= s.mean()
    e = rng.standard_normal(16000)
    e -= e.mean()
    e -= (e @ s) / (s @ s) * s
    e *= math.sqrt((s @ s) / (e @ e) / 100.0)
    orth = si_sdr(s + e, s)
    caps = [si_sdr(a * s, s) for a in (1.0, 0.01, 250.0, -3.0)]
    caps_ok = all(c == SI_SDR_CAP_DB for c in caps) and si_sdr(np.zeros_like(s), s) == -SI_SDR_CAP_DB

    spec = CorpusSpec(n_channels=1)
    self_scores, monotone = [], True
    for k in range(5):
        clean = synth_utterance(spec, k).clean
        self_scores.append(estoi(clean, clean, spec.sample_rate))
        noise = np.random.default_rng(100 + k).standard_normal(len(clean))
        scores = [estoi(mix_at_snr(clean, noise, snr), clean, spec.sample_rate) for snr in (-10, -5, 0, 5, 10)]
        monotone &= all(a < b for a, b in zip(scores, scores[1:]))
    elapsed = time.perf_counter() - start
    ok = abs(orth - 20.0) <= 1e-6 and caps_ok and min(self_scores) >= 0.999 and monotone and elapsed < 120
    verdict(capsys, 2, ok, f"orthogonal {orth:.9f} dB, caps {caps_ok}, estoi(x,x) min "
                           f"{min(self_scores):.4f}, monotone {monotone}, {elapsed:.1f} s")


GRAPHS = {
    "time": LossConfig(),
    "time+spec": LossConfig(use_specmag_l1=True),
    "hard_ce": LossConfig(use_time_l1=False, mimic="hard_ce"),
    "soft_l1": LossConfig(mimic="soft_l1"),
    "time+spec+soft_l2": LossConfig(use_specmag_l1=True, mimic="soft_l2"),
    "time+spec+kd": LossConfig(use_specmag_l1=True, mimic="kd", kd_temperature=2.0),
}


def test_criterion_03_gradient_correctness(capsys):
    start = time.perf_counter()
    worst, frozen_ok = {}, True
    for k, (name, loss) in enumerate(GRAPHS.items()):
        report = gradcheck(loss, n_params=32, seed=k)
        worst[name] = report.max_rel_error
        if loss.mimic != "none":
            frozen_ok &= report.am_grad_absent is True
    elapsed = time.perf_counter() - start
    top = max(worst.values())
    verdict(capsys, 3, top <= 1e-3 and frozen_ok and elapsed < 300,
            f"max relative error {top:.1e} over {len(worst)} graphs x 32 params, {elapsed:.0f} s")


def test_criterion_04_frozen_teacher(capsys, desk, nonparallel):
    result, _ = nonparallel
    start = result.log.header["am_fingerprint"]
    prints = result.log.am_fingerprints()
    ok = (len(prints) == len(result.log.epochs) > 0 and set(prints) == {start}
          and fingerprint(load_am(desk.am)) == start and result.log.frozen_verified())
    verdict(capsys, 4, ok, f"{len(prints)} checkpoints, distinct AM fingerprints {len(set(prints))}")


def test_criterion_05_nonparallel_ordering(capsys, nonparallel):
    result, elapsed = nonparallel
    noisy, enh = result.noisy_report, result.report
    gain = enh.frame_accuracy - noisy.frame_accuracy
    ok = enh.estoi > noisy.estoi and gain >= 0.10 and elapsed <= 900
    verdict(capsys, 5, ok, f"eSTOI {noisy.estoi:.4f} -> {enh.estoi:.4f}, frame accuracy "
                           f"{noisy.frame_accuracy:.3f} -> {enh.frame_accuracy:.3f}, SI-SDR "
                           f"{noisy.si_sdr_db:.2f} -> {enh.si_sdr_db:.2f} dB, {elapsed:.0f} s")


def test_criterion_06_joint_below_frozen(capsys, nonparallel, joint):
    frozen, joint_run = nonparallel[0].report.estoi, joint[0].report.estoi
    verdict(capsys, 6, joint_run < frozen, f"eSTOI joint {joint_run:.4f} vs frozen {frozen:.4f}")


def test_criterion_07_parallel_ordering(capsys, desk):
    scores = {m: [] for m in PARALLEL_MODES}
    total = 0.0
    for seed in SEEDS:
        for mode in PARALLEL_MODES:
            result, elapsed = desk.run(mode, seed)
            scores[mode].append(result.report.estoi)
            total += elapsed
    mean = {m: float(np.mean(v)) for m, v in scores.items()}
    wins = sum(a > b for a, b in zip(scores["parallel_T_SM_mimic"], scores["parallel_T_SM"]))
    ok = (mean["parallel_T_SM_mimic"] >= mean["parallel_T_SM"] >= mean["parallel_T"]
          and wins >= 2 and total <= 2700)
    detail = ", ".join(f"{m} {mean[m]:.4f}" for m in PARALLEL_MODES)
    verdict(capsys, 7, ok, f"mean eSTOI {detail}; mimic beats T-SM in {wins}/3 seeds; {total / 60:.1f} min")


def test_criterion_08_loss_oracles(capsys):
    torch_dtype = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        rng = np.random.default_rng(8)
        n_senones = 12
        labels = torch.as_tensor(rng.integers(0, n_senones, (2, 30)))
        uniform = abs(loss_mimic_hard(torch.zeros(2, 30, n_senones), labels).item() - math.log(n_senones))

        a = rng.standard_normal((2, 30, n_senones))
        teacher = np.full_like(a, -1e4)
        np.put_along_axis(teacher, labels.numpy()[..., None], 1e4, axis=-1)
        kd_gap = abs(loss_kd(torch.as_tensor(a), torch.as_tensor(teacher), 1.0).item()
                     - loss_mimic_hard(torch.as_tensor(a), labels).item())

        b = rng.standard_normal((2, 30, n_senones))
        shifted = a - a.max(-1, keepdims=True)
        log_p = shifted - np.log(np.exp(shifted).sum(-1, keepdims=True))
        t = 3.0
        sa, sb = a / t, b / t
        log_pa = sa - sa.max(-1, keepdims=True)
        log_pa -= np.log(np.exp(log_pa).sum(-1, keepdims=True))
        pb = np.exp(sb - sb.max(-1, keepdims=True))
        pb /= pb.sum(-1, keepdims=True)
        x, y = rng.standard_normal((2, 3000)), rng.standard_normal((2, 3000))
        cfg = StftConfig()
        mag = lambda v: np.abs(np.stack([naive_stft(r, cfg) for r in v]))
        pairs = {
            "hard_ce": (loss_mimic_hard(torch.as_tensor(a), labels).item(),
                        -np.take_along_axis(log_p, labels.numpy()[..., None], -1).mean()),
            "soft_l1": (loss_mimic_soft(torch.as_tensor(a), torch.as_tensor(b), "l1").item(), np.abs(a - b).mean()),
            "soft_l2": (loss_mimic_soft(torch.as_tensor(a), torch.as_tensor(b), "l2").item(), ((a - b) ** 2).mean()),
            "kd": (loss_kd(torch.as_tensor(a), torch.as_tensor(b), t).item(),
                   t * t * -(pb * log_pa).sum(-1).mean()),
            "time_l1": (loss_time_l1(torch.as_tensor(x), torch.as_tensor(y)).item(), np.abs(x - y).mean()),
            "spec_l1": (loss_specmag_l1(torch.as_tensor(x), torch.as_tensor(y), cfg).item(),
                        np.abs(mag(x) - mag(y)).mean()),
        }
    finally:
        torch.set_default_dtype(torch_dtype)
    pair_err = max(abs(u - v) / max(1.0, abs(v)) for u, v in pairs.values())
    ok = uniform <= 1e-9 and kd_gap <= 1e-6 and pair_err <= 1e-6
    verdict(capsys, 8, ok, f"uniform CE gap {uniform:.1e}, KD reduction gap {kd_gap:.1e}, "
                           f"worst oracle pair {pair_err:.1e}")


def test_criterion_09_reproducibility(capsys, desk):
    prints = []
    set_deterministic(True)
    try:
        for tag in ("_a", "_b"):
            result, _ = desk.run("parallel_T_SM_mimic", 7, tag, epochs=2)
            prints.append(result.enhancer_fingerprint)
    finally:
        set_deterministic(False)
    verdict(capsys, 9, prints[0] == prints[1], f"fingerprints {prints[0][:16]} / {prints[1][:16]}")


def test_criterion_10_feature_artifact(capsys, desk, nonparallel):
    result, _ = nonparallel
    utt = desk.corpus["test"][0]
    out = desk.root / "features"
    code = cli.main(["compare-features", "--manifest", str(desk.manifest), "--utt-id", utt.utt_id,
                     "--enhancer", str(result.checkpoint), "--out", str(out)])
    grids = np.load(out / f"{utt.utt_id}_logmel.npz")
    order = [str(o) for o in grids["order"]]
    cfg = StftConfig()
    direct = {
        "noisy": utt.noisy[0],
        "clean": utt.clean,
        Path(result.checkpoint).stem: enhance(utt.noisy[0], load_enhancer(result.checkpoint)).numpy(),
    }
    exact = all(np.array_equal(grids[k], log_mel(magnitude(stft(torch.as_tensor(np.asarray(v, dtype=np.float64)),
                                                                 cfg)), cfg, 16000).numpy())
                for k, v in direct.items())
    png = out / f"{utt.utt_id}_logmel.png"
    ok = code == 0 and order == list(direct) and exact and png.stat().st_size > 0
    verdict(capsys, 10, ok, f"panels {order}, grids bit-exact {exact}, image {png.name}")
