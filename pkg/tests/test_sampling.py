import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from multisample.dsp import Clip, Waveform
from multisample.sampling import (
    FeatureBank,
    SamplerConfig,
    SamplingError,
    draw_shift,
    neighborhood,
    plan_epoch,
    sample_batch,
)


def noise_clip(i, seconds=1.5):
    rng = np.random.default_rng(i)
    return Clip(f"clip{i}", Waveform(0.1 * rng.standard_normal(int(seconds * 16000))))


@pytest.fixture(scope="module")
def bank10():
    return FeatureBank([noise_clip(i) for i in range(10)])


class TestNeighborhood:
    def test_examples(self):
        assert neighborhood(1, 3, 0) == [1]
        assert neighborhood(0, 3, 1) == [0, 1]
        assert neighborhood(2, 5, 1) == [1, 2, 3]

    @given(n=st.integers(1, 40), data=st.data())
    def test_properties(self, n, data):
        t = data.draw(st.integers(0, n - 1))
        m = data.draw(st.integers(0, n // 2))
        hood = neighborhood(t, n, m)
        assert t in hood
        assert all(0 <= i < n for i in hood)
        assert len(hood) == min(t + m, n - 1) - max(t - m, 0) + 1


class TestDrawShift:
    def test_statistics(self):
        rng = np.random.default_rng(0)
        draws = np.array([draw_shift(rng) for _ in range(10_000)])
        assert draws.min() >= 0.8 and draws.max() <= 1.2
        assert abs(draws.mean() - 1.0) <= 0.01

    def test_epoch_mode_shares_shift(self):
        plan = plan_epoch(100, SamplerConfig(batch_size=8, shift_mode="epoch"), seed=3, epoch=0)
        assert len(set(plan.shifts)) == 1

    def test_batch_mode_draws_independently(self):
        plan = plan_epoch(100, SamplerConfig(batch_size=8, shift_mode="batch"), seed=3, epoch=0)
        assert len(set(plan.shifts)) == len(plan.shifts) > 1

    def test_bad_config(self):
        with pytest.raises(SamplingError):
            SamplerConfig(shift_range=(1.2, 0.8))
        with pytest.raises(SamplingError):
            SamplerConfig(shift_mode="step")


class TestSampleBatch:
    def test_invariants(self, bank10):
        batch = sample_batch(bank10, SamplerConfig(batch_size=4), np.random.default_rng(0))
        batch.validate()
        assert len(set(batch.clip_ids)) == 4
        x, xp, xs, a = batch.arrays()
        assert x.shape == xp.shape == xs.shape == (4, 64, 96)
        assert np.all(a == a[0])

    def test_determinism(self, bank10):
        cfg = SamplerConfig(batch_size=4)
        b1 = sample_batch(bank10, cfg, np.random.default_rng(7))
        b2 = sample_batch(bank10, cfg, np.random.default_rng(7))
        for u, v in zip(b1.arrays(), b2.arrays()):
            assert np.array_equal(u, v)
        assert [s.start_frame for s in b1.positives] == [s.start_frame for s in b2.positives]

    def test_too_few_clips(self):
        bank = FeatureBank([noise_clip(i) for i in range(3)])
        with pytest.raises(SamplingError):
            sample_batch(bank, SamplerConfig(batch_size=4), np.random.default_rng(0))

    def test_clip_too_short_is_named(self):
        clips = [noise_clip(0), noise_clip(1, seconds=0.9)]
        with pytest.raises(SamplingError, match="clip1"):
            FeatureBank(clips)

    def test_shifted_view_is_pitch_shifted_anchor(self, bank10):
        batch = sample_batch(bank10, SamplerConfig(batch_size=2), np.random.default_rng(1), shift=1.0)
        for x, xs in zip(batch.anchors, batch.shifted):
            assert np.allclose(x.values, xs.values)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_invariants_over_seeds(self, bank10, seed):
        rng = np.random.default_rng(seed)
        batch = sample_batch(bank10, SamplerConfig(batch_size=5, shift_mode="batch"), rng)
        batch.validate()


def test_plan_epoch_is_a_function_of_seed_and_epoch():
    cfg = SamplerConfig(batch_size=4)
    p1, p2 = plan_epoch(20, cfg, 1, 5), plan_epoch(20, cfg, 1, 5)
    assert all(np.array_equal(a, b) for a, b in zip(p1.batches, p2.batches))
    assert p1.shifts == p2.shifts
    p3 = plan_epoch(20, cfg, 1, 6)
    assert not all(np.array_equal(a, b) for a, b in zip(p1.batches, p3.batches))
    assert len(p1.batches) == 5
    assert sorted(np.concatenate(p1.batches)) == list(range(20))
