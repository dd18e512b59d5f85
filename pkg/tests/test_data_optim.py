import math

import numpy as np
import pytest

from moelab.config import GroupScale, ScheduleConfig
from moelab.data import TokenData, domain_regions, synth_corpus
from moelab.errors import ParameterError
from moelab.optim import SGD, AdamW, clip_grads, cosine_lr, group_scale, lr_at

from conftest import tiny_config


class TestCorpus:
    def test_deterministic(self):
        a = synth_corpus(5, 3, 2000, vocab_size=64)
        b = synth_corpus(5, 3, 2000, vocab_size=64)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, synth_corpus(6, 3, 2000, vocab_size=64))

    def test_splits_differ(self):
        assert not np.array_equal(synth_corpus(5, 3, 2000, vocab_size=64),
                                  synth_corpus(5, 3, 2000, vocab_size=64, split="eval"))

    def test_single_domain_stays_in_region(self):
        toks = synth_corpus(0, 1, 3000, vocab_size=40)
        assert toks.min() >= 0 and toks.max() < 40

    def test_tokens_stay_in_their_domain(self):
        toks, doms = synth_corpus(1, 3, 5000, vocab_size=90, return_domains=True)
        regions = domain_regions(90, 3)
        for d, (lo, hi) in enumerate(regions):
            sel = toks[doms == d]
            assert sel.min() >= lo and sel.max() < hi

    def test_mix_ratio(self):
        _, doms = synth_corpus(2, 3, 100_000, vocab_size=96, return_domains=True)
        share = np.bincount(doms, minlength=3) / doms.size
        np.testing.assert_allclose(share, [0.7, 0.2, 0.1], atol=0.01)

    def test_invalid(self):
        with pytest.raises(ParameterError):
            synth_corpus(0, 3, 10, vocab_size=2)
        with pytest.raises(ParameterError):
            synth_corpus(0, 2, 10, mix=[1.0, -1.0])

    def test_batches_depend_on_seed_and_step(self):
        cfg = tiny_config()
        data = TokenData(cfg.data, 32)
        a = data.train_batch(0, 3, 4, 8)
        assert a.shape == (4, 9)
        np.testing.assert_array_equal(a, data.train_batch(0, 3, 4, 8))
        assert not np.array_equal(a, data.train_batch(0, 4, 4, 8))


class TestSchedule:
    SCHED = ScheduleConfig(peak_lr=1e-3, min_lr=1e-4, warmup_tokens=100, total_tokens=1100)

    def test_boundaries(self):
        assert cosine_lr(0, self.SCHED) == 0.0
        assert cosine_lr(50, self.SCHED) == pytest.approx(5e-4)
        assert cosine_lr(100, self.SCHED) == pytest.approx(1e-3)
        assert cosine_lr(600, self.SCHED) == pytest.approx(5.5e-4)
        assert cosine_lr(1100, self.SCHED) == pytest.approx(1e-4)
        assert cosine_lr(5000, self.SCHED) == pytest.approx(1e-4)

    def test_matches_closed_form(self):
        for t in np.linspace(100, 1100, 37):
            want = 1e-4 + 0.5 * 9e-4 * (1 + math.cos(math.pi * (t - 100) / 1000))
            assert cosine_lr(t, self.SCHED) == pytest.approx(want, rel=1e-12)

    def test_non_increasing_after_warmup(self):
        vals = [cosine_lr(t, self.SCHED) for t in range(100, 1200, 10)]
        assert all(b <= a for a, b in zip(vals, vals[1:]))

    def test_other_shapes(self):
        assert lr_at(500, "constant", 1.0, 0.1, 1000) == 1.0
        assert lr_at(500, "linear", 1.0, 0.0, 1000) == pytest.approx(0.5)


class TestOptimizers:
    def test_sgd_step(self):
        p = {"w": np.array([1.0, 2.0])}
        SGD().step(p, {"w": np.array([0.5, -1.0])}, 0.1, {})
        np.testing.assert_allclose(p["w"], [0.95, 2.1])

    def test_sgd_group_scale_equals_scaled_lr(self):
        a = {"w": np.array([1.0, 2.0])}
        b = {"w": np.array([1.0, 2.0])}
        g = {"w": np.array([0.3, 0.7])}
        SGD().step(a, g, 0.1, {"w": 0.5})
        SGD().step(b, g, 0.05, {})
        np.testing.assert_array_equal(a["w"], b["w"])

    def test_adamw_first_step_is_sign(self):
        p = {"w": np.array([[1.0, -1.0]])}
        AdamW(weight_decay=0.0).step(p, {"w": np.array([[3.0, -0.01]])}, 0.1, {})
        np.testing.assert_allclose(p["w"], [[0.9, -0.9]], atol=1e-6)

    def test_adamw_decay_only_on_matrices(self):
        p = {"m": np.ones((2, 2)), "v": np.ones(2)}
        zero = {"m": np.zeros((2, 2)), "v": np.zeros(2)}
        AdamW(weight_decay=0.5).step(p, zero, 0.1, {})
        np.testing.assert_allclose(p["m"], 0.95)
        np.testing.assert_allclose(p["v"], 1.0)

    def test_adamw_state_round_trip(self):
        p = {"w": np.array([1.0, 2.0])}
        opt = AdamW()
        opt.step(p, {"w": np.array([0.1, 0.2])}, 0.01, {})
        twin = AdamW()
        twin.load_state_dict(opt.state_dict(), step=1)
        q = {"w": p["w"].copy()}
        g = {"w": np.array([-0.3, 0.4])}
        opt.step(p, g, 0.01, {})
        twin.step(q, g, 0.01, {})
        np.testing.assert_array_equal(p["w"], q["w"])

    def test_clip(self):
        g = {"a": np.array([3.0]), "b": np.array([4.0])}
        assert clip_grads(g, 1.0) == pytest.approx(5.0)
        assert math.hypot(g["a"][0], g["b"][0]) == pytest.approx(1.0, abs=1e-6)

    def test_group_scale_assignment(self):
        s = GroupScale(expert=0.5, non_expert=2.0)
        assert group_scale("layers.0.moe.experts.3.w_up", s) == 0.5
        assert group_scale("layers.0.moe.gate.W", s) == 2.0
        assert group_scale("embed.tok", s) == 2.0
