import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from codmine.data import AnnotatedImage
from codmine.errors import EmptySummaryError
from codmine.importance import (
    ActivationSummary,
    FreezePlan,
    LayerScore,
    collect_summaries,
    frozen_count,
    load_summaries,
    rank_and_plan,
    save_summaries,
    score_entropy,
    score_layers,
    score_mean,
    score_median,
    score_std,
    select_samples,
)
from codmine.model import build_detector


def summarize(values, bins=64, chunks=1, reservoir=1_000_000, seed=0):
    s = ActivationSummary("l", bins, reservoir)
    rng = np.random.default_rng(seed)
    parts = np.array_split(np.asarray(values).ravel(), chunks)
    for p in parts:
        s.update(p, rng)
    for p in parts:
        s.update_histogram(p)
    return s


def entropy_oracle(values, bins):
    """Recount with a plain Python loop over the same binning rule."""
    v = [float(x) for x in np.asarray(values, dtype=np.float64).ravel()]
    lo, hi = min(v), max(v)
    counts = [0] * bins
    for x in v:
        b = 0 if hi <= lo else min(max(math.floor((x - lo) / (hi - lo) * bins), 0), bins - 1)
        counts[b] += 1
    n = len(v)
    return -math.fsum(c / n * math.log2(c / n) for c in counts if c)


class TestStreamingOracles:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 100_000), st.integers(1, 7))
    def test_mean_std_match_materialized(self, seed, n, chunks):
        rng = np.random.default_rng(seed)
        x = rng.normal(rng.uniform(-5, 5), rng.uniform(0.1, 3), size=n).astype(np.float32)
        s = summarize(x, chunks=chunks)
        xd = x.astype(np.float64)
        mu = xd.sum() / n
        var = ((xd - mu) ** 2).sum() / n
        assert score_mean(s).value == pytest.approx(mu, rel=1e-6, abs=1e-12)
        assert score_std(s).value == pytest.approx(math.sqrt(var), rel=1e-6, abs=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 20_000), st.sampled_from([4, 16, 64]))
    def test_entropy_matches_recount(self, seed, n, bins):
        x = np.random.default_rng(seed).gamma(2.0, size=n).astype(np.float32)
        s = summarize(x, bins=bins, chunks=3)
        assert abs(score_entropy(s).value - entropy_oracle(x, bins)) <= 1e-9
        assert score_entropy(s).value <= math.log2(bins) + 1e-12

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 5000))
    def test_median_exact_unsampled(self, seed, n):
        x = np.random.default_rng(seed).normal(size=n).astype(np.float32)
        s = summarize(x, chunks=4)
        srt = np.sort(x.astype(np.float64))
        oracle = srt[n // 2] if n % 2 else (srt[n // 2 - 1] + srt[n // 2]) / 2
        assert score_median(s).value == oracle

    def test_hand_values(self):
        assert score_median(summarize([1.0, 2.0, 100.0])).value == 2.0
        assert score_std(summarize([0.0, 2.0] * 10)).value == 1.0
        assert score_mean(summarize(np.zeros(10))).value == 0.0
        assert score_mean(summarize(np.full(10, 2.0))).value == 2.0

    def test_constant_maps(self):
        s = summarize(np.full((3, 2, 4, 4), 1.5))
        assert score_std(s).value == 0.0
        assert score_entropy(s).value == 0.0
        assert score_median(s).value == 1.5

    def test_uniform_16_bins_is_4_bits(self):
        x = np.repeat(np.arange(16, dtype=np.float64) + 0.5, 7)
        s = summarize(x, bins=16)
        assert s.histogram.tolist() == [7] * 16
        assert score_entropy(s).value == 4.0

    def test_empty(self):
        s = ActivationSummary("l")
        for fn in (score_mean, score_std, score_entropy, score_median):
            with pytest.raises(EmptySummaryError):
                fn(s)

    def test_scale_equivariance(self, rng):
        x = rng.gamma(2.0, size=999)
        a, b = summarize(x), summarize(x * 4.0)
        for fn in (score_mean, score_median, score_std):
            assert fn(b).value == pytest.approx(4.0 * fn(a).value, rel=1e-12)
        # entropy uses the observed range, so a global rescaling leaves the occupancy unchanged
        assert score_entropy(b).value == pytest.approx(score_entropy(a).value, abs=1e-12)

    def test_merge_equals_single_stream(self, rng):
        x = rng.normal(size=3000)
        a, b, whole = ActivationSummary("l"), ActivationSummary("l"), ActivationSummary("l")
        a.update(x[:1000])
        b.update(x[1000:])
        whole.update(x)
        m = a.merge(b)
        assert m.count == 3000
        assert m.mean == pytest.approx(whole.mean, rel=1e-12)
        assert m.m2 == pytest.approx(whole.m2, rel=1e-10)


class TestReservoir:
    def test_capacity_and_uniformity(self):
        # inclusion frequency of each of 20 stream positions in a size-5 reservoir
        hits = np.zeros(20)
        for t in range(4000):
            s = ActivationSummary("l", reservoir_capacity=5)
            rng = np.random.default_rng(t)
            for chunk in np.array_split(np.arange(20, dtype=np.float64), 3):
                s.update(chunk, rng)
            assert s.reservoir.size == 5
            hits[s.reservoir.astype(int)] += 1
        freq = hits / 4000
        assert np.all(np.abs(freq - 0.25) < 0.035)

    def test_sampled_median_close(self, rng):
        x = rng.normal(size=50_000)
        s = summarize(x, reservoir=5000, chunks=10)
        assert s.reservoir.size == 5000
        assert abs(score_median(s).value - np.median(x)) < 0.1


class TestPlan:
    def _scores(self, vals, crit="mean"):
        return [LayerScore(n, crit, v) for n, v in vals]

    def test_top_half(self):
        plan = rank_and_plan(self._scores([("a", 3), ("b", 1), ("c", 2), ("d", 0)]), 50)
        assert set(plan.frozen_layers) == {"a", "c"}

    def test_zero_and_hundred(self):
        s = self._scores([("a", 3), ("b", 1), ("c", 2)])
        assert rank_and_plan(s, 0).frozen_layers == []
        assert set(rank_and_plan(s, 100).frozen_layers) == {"a", "b", "c"}

    @pytest.mark.parametrize("L,n,k", [(25, 7, 2), (25, 8, 2), (50, 8, 4), (75, 8, 6), (90, 8, 7),
                                       (10, 5, 1), (1, 8, 1), (12.5, 4, 1), (37.5, 4, 2)])
    def test_rounding(self, L, n, k):
        assert frozen_count(L, n) == k

    def test_ties_keep_canonical_order(self):
        plan = rank_and_plan(self._scores([("a", 1), ("b", 2), ("c", 2), ("d", 2)]), 50)
        assert plan.frozen_layers == ["b", "c"]

    def test_mixed_criteria(self):
        with pytest.raises(ValueError):
            rank_and_plan([LayerScore("a", "mean", 1), LayerScore("b", "std", 1)], 50)

    def test_bad_percentage(self):
        with pytest.raises(ValueError):
            rank_and_plan(self._scores([("a", 1)]), 101)

    def test_unknown_criterion(self):
        with pytest.raises(ValueError):
            score_layers({"a": summarize([1.0])}, "variance")

    def test_plan_roundtrip(self, tmp_path):
        p = FreezePlan("entropy", 25.0, ["neck.3", "head.cls"], 8)
        p.save(tmp_path / "plan.json")
        assert FreezePlan.load(tmp_path / "plan.json") == p


class TestCollection:
    def _images(self, n, size=32, seed=0):
        rng = np.random.default_rng(seed)
        return [AnnotatedImage(rng.random((size, size, 3), dtype=np.float32), [], [], f"i{k}") for k in range(n)]

    def test_per_sample_count(self, small_config):
        m = build_detector(small_config, 0)
        sums = collect_summaries(m, self._images(8), 1.0)
        assert all(s.per_sample_count == 8 for s in sums.values())
        assert set(sums) == set(m.layer_names()[3:])

    def test_fraction_uses_ceiling(self):
        assert len(select_samples(10, 0.25, 0)) == 3
        assert len(select_samples(10, 0.9, 0)) == 9
        assert len(select_samples(10, 0.3, 0)) == 3

    def test_deterministic(self, small_config):
        m = build_detector(small_config, 0)
        imgs = self._images(10)
        a = collect_summaries(m, imgs, 0.5, seed=4, reservoir_size=100)
        b = collect_summaries(m, imgs, 0.5, seed=4, reservoir_size=100)
        for k in a:
            assert a[k].count == b[k].count and a[k].mean == b[k].mean and a[k].m2 == b[k].m2
            assert np.array_equal(a[k].histogram, b[k].histogram)
            assert np.array_equal(a[k].reservoir, b[k].reservoir)

    def test_count_matches_feature_size(self, small_config):
        m = build_detector(small_config, 0)
        imgs = self._images(3)
        sums = collect_summaries(m, imgs, 1.0)
        _, feats = m(torch.zeros(1, 3, 32, 32), capture=list(sums))
        for name, s in sums.items():
            assert s.count == 3 * feats[name][0].numel()
            assert s.histogram.sum() == s.count

    def test_save_load(self, small_config, tmp_path):
        m = build_detector(small_config, 0)
        sums = collect_summaries(m, self._images(4), 1.0, reservoir_size=50)
        save_summaries(sums, tmp_path / "s.json")
        back = load_summaries(tmp_path / "s.json")
        for k in sums:
            for crit in (score_mean, score_median, score_std, score_entropy):
                assert crit(back[k]).value == crit(sums[k]).value
