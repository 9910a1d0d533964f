import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mimicse import losses
from mimicse.acoustic_model import AcousticModel, AmConfig, fingerprint, freeze
from mimicse.dsp import StftConfig, magnitude, stft
from mimicse.errors import ConfigError, ValidationError
from mimicse.losses import LossConfig



@pytest.fixture(autouse=True)
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def naive_ce(logits, labels):
    total = 0.0
    for row, lab in zip(logits, labels):
        z = sum(math.exp(v) for v in row)
        total += -math.log(math.exp(row[lab]) / z)
    return total / len(labels)


def naive_softmax(row, t=1.0):
    e = [math.exp(v / t) for v in row]
    s = sum(e)
    return [v / s for v in e]


def naive_kd(student, teacher, t):
    total = 0.0
    for s_row, t_row in zip(student, teacher):
        p = naive_softmax(t_row, t)
        q = naive_softmax(s_row, t)
        total += -sum(pi * math.log(qi) for pi, qi in zip(p, q))
    return t * t * total / len(student)


def rand(*shape, seed=0):
    return torch.as_tensor(np.random.default_rng(seed).standard_normal(shape))


class TestTimeL1:
    def test_identical(self):
        x = rand(100)
        assert losses.loss_time_l1(x, x) == 0

    def test_constant_offset(self):
        x = rand(100)
        assert abs(losses.loss_time_l1(x + 0.5, x).item() - 0.5) <= 1e-12

    def test_loop_oracle(self):
        a, b = rand(257, seed=1), rand(257, seed=2)
        oracle = sum(abs(p - q) for p, q in zip(a.tolist(), b.tolist())) / 257
        assert abs(losses.loss_time_l1(a, b).item() - oracle) <= 1e-9

    def test_length_mismatch(self):
        with pytest.raises(ValidationError):
            losses.loss_time_l1(rand(10), rand(11))


class TestSpecMagL1:
    cfg = StftConfig()

    def test_identical(self):
        x = rand(2048)
        assert losses.loss_specmag_l1(x, x, self.cfg) == 0

    def test_impulse_vs_silence(self):
        imp = torch.zeros(2048)
        imp[1000] = 1.0
        zero = torch.zeros(2048)
        # silence still has magnitude sqrt(eps); subtract it explicitly
        direct = (magnitude(stft(imp, self.cfg)) - magnitude(stft(zero, self.cfg))).abs().mean()
        assert abs(losses.loss_specmag_l1(imp, zero, self.cfg).item() - direct.item()) <= 1e-12
        assert abs(direct.item() - magnitude(stft(imp, self.cfg)).mean().item()) <= 1e-5

    def test_gradient_matches_finite_differences(self):
        cfg = StftConfig(frame_length=64, hop_length=16, fft_size=64)
        clean = rand(400, seed=3)
        x = rand(400, seed=4).requires_grad_()
        losses.loss_specmag_l1(x, clean, cfg).backward()
        h = 1e-6
        for i in np.random.default_rng(0).choice(400, 20, replace=False):
            xp, xm = x.detach().clone(), x.detach().clone()
            xp[i] += h
            xm[i] -= h
            num = (losses.loss_specmag_l1(xp, clean, cfg) - losses.loss_specmag_l1(xm, clean, cfg)) / (2 * h)
            ana = x.grad[i]
            assert abs(ana - num) / max(abs(ana), abs(num), 1e-10) <= 1e-3

    def test_length_mismatch(self):
        with pytest.raises(ValidationError):
            losses.loss_specmag_l1(rand(1000), rand(1001), self.cfg)


class TestMimicHard:
    def test_saturated(self):
        labels = torch.tensor([0, 4, 2, 2, 11])
        logits = torch.zeros(5, 12)
        logits[torch.arange(5), labels] = 30.0
        assert losses.loss_mimic_hard(logits, labels).item() <= 1e-9

    @pytest.mark.parametrize("s", [2, 12, 4000])
    def test_uniform_is_log_s(self, s):
        got = losses.loss_mimic_hard(torch.zeros(7, s), torch.zeros(7, dtype=torch.long)).item()
        assert abs(got - math.log(s)) <= 1e-9

    def test_naive_oracle(self):
        logits = rand(40, 12, seed=5) * 4
        labels = np.random.default_rng(6).integers(0, 12, 40)
        got = losses.loss_mimic_hard(logits, labels).item()
        assert abs(got - naive_ce(logits.tolist(), labels.tolist())) <= 1e-6

    def test_batched(self):
        logits = rand(3, 10, 5, seed=7)
        labels = torch.as_tensor(np.random.default_rng(8).integers(0, 5, (3, 10)))
        oracle = naive_ce(logits.reshape(30, 5).tolist(), labels.reshape(30).tolist())
        assert abs(losses.loss_mimic_hard(logits, labels).item() - oracle) <= 1e-9

    def test_extreme_logits_are_finite(self):
        logits = torch.tensor([[1000.0, -1000.0, 0.0]])
        assert math.isfinite(losses.loss_mimic_hard(logits, torch.tensor([1])).item())

    def test_frame_mismatch(self):
        with pytest.raises(ValidationError):
            losses.loss_mimic_hard(torch.zeros(5, 3), torch.zeros(4, dtype=torch.long))

    @pytest.mark.parametrize("bad", [-1, 3])
    def test_label_out_of_range(self, bad):
        with pytest.raises(ValidationError):
            losses.loss_mimic_hard(torch.zeros(2, 3), torch.tensor([0, bad]))


class TestMimicSoft:
    def test_identical(self):
        x = rand(10, 12)
        assert losses.loss_mimic_soft(x, x, "l1") == 0
        assert losses.loss_mimic_soft(x, x, "l2") == 0

    def test_constant_offset(self):
        x = rand(10, 12)
        assert abs(losses.loss_mimic_soft(x + 2.0, x, "l1").item() - 2.0) <= 1e-12

    def test_l2_loop_oracle(self):
        a, b = rand(9, 12, seed=1), rand(9, 12, seed=2)
        oracle = sum((p - q) ** 2 for ra, rb in zip(a.tolist(), b.tolist()) for p, q in zip(ra, rb)) / 108
        assert abs(losses.loss_mimic_soft(a, b, "l2").item() - oracle) <= 1e-9

    def test_no_gradient_into_target(self):
        a = rand(4, 3, seed=1).requires_grad_()
        b = rand(4, 3, seed=2).requires_grad_()
        losses.loss_mimic_soft(a, b, "l1").backward()
        assert a.grad is not None and b.grad is None

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            losses.loss_mimic_soft(torch.zeros(4, 3), torch.zeros(4, 4))

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            losses.loss_mimic_soft(torch.zeros(2, 2), torch.zeros(2, 2), "huber")


@settings(max_examples=40, deadline=None)
@given(a=st.floats(-50, 50), seed=st.integers(0, 10_000))
def test_soft_l1_is_absolutely_homogeneous(a, seed):
    x, y = rand(6, 5, seed=seed), rand(6, 5, seed=seed + 1)
    lhs = losses.loss_mimic_soft(a * x, a * y, "l1").item()
    rhs = abs(a) * losses.loss_mimic_soft(x, y, "l1").item()
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(rhs))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), t=st.floats(0.2, 20))
def test_losses_nonnegative(seed, t):
    a, b = rand(5, 7, seed=seed) * 3, rand(5, 7, seed=seed + 1) * 3
    labels = torch.as_tensor(np.random.default_rng(seed).integers(0, 7, 5))
    assert losses.loss_mimic_hard(a, labels) >= 0
    assert losses.loss_mimic_soft(a, b, "l1") >= 0
    assert losses.loss_mimic_soft(a, b, "l2") >= 0
    assert losses.loss_kd(a, b, t) >= 0
    assert losses.loss_time_l1(a.flatten(), b.flatten()) >= 0


class TestKd:
    @pytest.mark.parametrize("t", [0.5, 1.0, 2.0, 5.0])
    def test_self_ce_is_tempered_entropy(self, t):
        x = rand(8, 12, seed=9) * 3
        assert abs(losses.loss_kd(x, x, t).item() - naive_kd(x.tolist(), x.tolist(), t)) <= 1e-9

    def test_high_temperature_oracle(self):
        a, b = rand(8, 12, seed=10), rand(8, 12, seed=11)
        got = losses.loss_kd(a, b, 100.0).item()
        assert abs(got - naive_kd(a.tolist(), b.tolist(), 100.0)) <= 1e-6
        assert abs(got / 100.0 ** 2 - math.log(12)) <= 1e-3

    def test_saturated_teacher_reduces_to_hard_ce(self):
        labels = torch.as_tensor(np.random.default_rng(12).integers(0, 12, 20))
        teacher = torch.full((20, 12), -40.0)
        teacher[torch.arange(20), labels] = 40.0
        student = rand(20, 12, seed=13) * 2
        kd = losses.loss_kd(student, teacher, 1.0).item()
        assert abs(kd - losses.loss_mimic_hard(student, teacher.argmax(-1)).item()) <= 1e-6

    @pytest.mark.parametrize("t", [0.0, -1.0])
    def test_nonpositive_temperature(self, t):
        with pytest.raises(ConfigError):
            losses.loss_kd(torch.zeros(2, 2), torch.zeros(2, 2), t)


class TestCombine:
    def test_only_time(self):
        cfg = LossConfig(weights=(1, 0, 0))
        b = losses.combine({"time_l1": torch.tensor(0.37)}, cfg)
        assert b.total.item() == b.time_l1.item() == pytest.approx(0.37, abs=0)
        assert b.spec_l1.item() == 0 and b.mimic.item() == 0

    def test_unit_weights(self):
        cfg = LossConfig(use_specmag_l1=True, mimic="soft_l1")
        b = losses.combine({"time_l1": 0.2, "spec_l1": 0.3, "mimic": 0.5}, cfg)
        assert abs(b.total.item() - 1.0) <= 1e-12

    @settings(max_examples=50, deadline=None)
    @given(w=st.tuples(*[st.floats(0.01, 100)] * 3), v=st.tuples(*[st.floats(0, 10)] * 3))
    def test_independent_sum(self, w, v):
        cfg = LossConfig(use_specmag_l1=True, mimic="kd", weights=w)
        b = losses.combine(dict(zip(("time_l1", "spec_l1", "mimic"), map(torch.tensor, v))), cfg)
        assert abs(b.total.item() - math.fsum(wi * vi for wi, vi in zip(w, v))) <= 1e-12 * max(1, b.total.item())
        assert abs(b.total.item() - (b.time_l1 + b.spec_l1 + b.mimic).item()) <= 1e-9

    def test_all_zero_weights(self):
        with pytest.raises(ConfigError):
            LossConfig(weights=(0, 0, 0))

    def test_no_terms_enabled(self):
        with pytest.raises(ConfigError):
            LossConfig(use_time_l1=False)

    def test_missing_term(self):
        with pytest.raises(ValidationError):
            losses.combine({}, LossConfig())

    def test_bad_mimic_kind(self):
        with pytest.raises(ConfigError):
            LossConfig(mimic="l3")

    def test_to_dict_is_plain(self):
        b = losses.combine({"time_l1": torch.tensor(0.5, requires_grad=True) * 2}, LossConfig())
        assert b.to_dict() == {"total": 1.0, "time_l1": 1.0, "spec_l1": 0.0, "mimic": 0.0}


class TestRequirements:
    def test_flags(self):
        assert LossConfig(use_time_l1=False, mimic="hard_ce").needs_labels
        assert not LossConfig(use_time_l1=False, mimic="hard_ce").needs_clean
        assert LossConfig(use_time_l1=False, mimic="soft_l1").needs_clean
        assert LossConfig(use_time_l1=False, mimic="kd").needs_clean

    def test_missing_clean(self):
        cfg = LossConfig(use_time_l1=False, mimic="soft_l1")
        with pytest.raises(ValidationError):
            losses.compute_losses(rand(1, 1024), cfg, StftConfig(), am=lambda m: m)

    def test_missing_labels(self):
        cfg = LossConfig(use_time_l1=False, mimic="hard_ce")
        with pytest.raises(ValidationError):
            losses.compute_losses(rand(1, 1024), cfg, StftConfig(), am=lambda m: m)


def test_backward_through_frozen_am_leaves_it_unchanged():
    cfg = AmConfig(scale=1 / 16)
    torch.manual_seed(0)
    am = freeze(AcousticModel(cfg).double())
    before = fingerprint(am)
    x = rand(2, 4096, seed=1).requires_grad_()
    clean = rand(2, 4096, seed=2)
    labels = torch.as_tensor(np.random.default_rng(3).integers(0, 12, (2, 33)))
    for mimic in ("hard_ce", "soft_l1", "soft_l2", "kd"):
        lc = LossConfig(use_time_l1=False, mimic=mimic, kd_temperature=2.0)
        for _ in range(2):
            losses.compute_losses(x, lc, StftConfig(), clean=clean, labels=labels, am=am).total.backward()
    assert x.grad is not None and torch.count_nonzero(x.grad) > 0
    assert fingerprint(am) == before
