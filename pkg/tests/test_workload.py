import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridserve.errors import ConfigError
from hybridserve.workload import (
    LengthDist,
    ServiceClass,
    WorkloadConfig,
    build_requests,
    dailymails_like,
    gen_dynamic_rate_arrivals,
    gen_poisson_arrivals,
    longbench_like,
    make_random_rate_schedule,
    sample_lengths,
)


class TestPoissonArrivals:
    def test_rate_zero_rejected(self):
        with pytest.raises(ConfigError):
            gen_poisson_arrivals(0, 100, 1)

    def test_horizon_zero_rejected(self):
        with pytest.raises(ConfigError):
            gen_poisson_arrivals(1.0, 0, 1)

    def test_sorted_within_horizon(self):
        times = gen_poisson_arrivals(5.0, 100.0, 42)
        assert times == sorted(times)
        assert all(0 <= t < 100.0 for t in times)

    def test_mean_interarrival(self):
        # rate 4/s over 600 s: sample mean inter-arrival within 0.25 +/- 0.02
        times = gen_poisson_arrivals(4.0, 600.0, 7)
        gaps = np.diff(times)
        assert abs(gaps.mean() - 0.25) <= 0.02

    def test_azure_like_rate_volume(self):
        # 182.6 requests/minute over 30 minutes -> ~5478 arrivals +/- 5%
        times = gen_poisson_arrivals(182.6 / 60.0, 1800.0, 0)
        assert abs(len(times) - 5478) <= 0.05 * 5478

    def test_deterministic_per_seed(self):
        a = gen_poisson_arrivals(3.0, 50.0, 9)
        b = gen_poisson_arrivals(3.0, 50.0, 9)
        c = gen_poisson_arrivals(3.0, 50.0, 10)
        assert a == b
        assert a != c

    def test_window_counts_within_3_sigma(self):
        # Fixed-seed corpus: counts in windows of width >= 100/rate stay
        # within 3 sigma of the Poisson mean.
        rate, horizon = 5.0, 400.0
        width = 100.0 / rate
        for seed in (0, 1, 3, 4, 5):
            times = np.array(gen_poisson_arrivals(rate, horizon, seed))
            mean = rate * width
            sigma = np.sqrt(mean)
            for lo in np.arange(0, horizon, width):
                count = np.sum((times >= lo) & (times < lo + width))
                assert abs(count - mean) <= 3 * sigma


class TestDynamicRateArrivals:
    def test_single_segment_matches_plain_poisson(self):
        plain = gen_poisson_arrivals(2.5, 120.0, 5)
        dynamic = gen_dynamic_rate_arrivals([(0.0, 2.5)], 120.0, 5)
        assert plain == dynamic

    def test_segment_counts(self):
        # segments (0,1) and (300,8) over 600 s -> ~300 and ~2400 +/- 10%
        times = np.array(gen_dynamic_rate_arrivals([(0, 1.0), (300, 8.0)], 600.0, 12))
        first = np.sum(times < 300)
        second = np.sum(times >= 300)
        assert abs(first - 300) <= 30
        assert abs(second - 2400) <= 240

    def test_overlapping_segments_rejected(self):
        with pytest.raises(ConfigError):
            gen_dynamic_rate_arrivals([(0, 1.0), (0, 2.0)], 10.0, 1)

    def test_bursty_schedule_shape(self):
        # 5 s change interval, rates uniform in [1, 8]
        schedule = make_random_rate_schedule(5.0, 1.0, 8.0, 60.0, 3)
        assert [t for t, _ in schedule] == [5.0 * i for i in range(12)]
        assert all(1.0 <= r <= 8.0 for _, r in schedule)
        times = gen_dynamic_rate_arrivals(schedule, 60.0, 3)
        assert times == sorted(times)


class TestSampleLengths:
    def test_fixed(self):
        assert sample_lengths(LengthDist(kind="fixed", prompt=1000, output=100), 5, 0) == [
            (1000, 100)
        ] * 5

    def test_empty_empirical_rejected(self):
        with pytest.raises(ConfigError):
            LengthDist(kind="empirical", pairs=())

    def test_uniform_bounds(self):
        dist = LengthDist(
            kind="uniform", prompt_min=10, prompt_max=20, output_min=1, output_max=4
        )
        pairs = sample_lengths(dist, 200, 3)
        assert all(10 <= p <= 20 and 1 <= o <= 4 for p, o in pairs)

    def test_longbench_means(self):
        dist = longbench_like(n=512, seed=1)
        prompts = [p for p, _ in dist.pairs]
        outputs = [o for _, o in dist.pairs]
        assert abs(np.mean(prompts) - 8952) <= 1
        assert abs(np.mean(outputs) - 136) <= 1
        assert max(prompts) <= 12000
        sampled = sample_lengths(dist, 512, 77)
        assert abs(np.mean([p for p, _ in sampled]) - 8952) <= 0.05 * 8952

    def test_dailymails_means(self):
        dist = dailymails_like(n=512, seed=2)
        assert abs(np.mean([p for p, _ in dist.pairs]) - 1964) <= 1
        assert abs(np.mean([o for _, o in dist.pairs]) - 397) <= 1

    def test_deterministic(self):
        dist = LengthDist(kind="uniform", prompt_min=1, prompt_max=9, output_min=1, output_max=9)
        assert sample_lengths(dist, 50, 4) == sample_lengths(dist, 50, 4)


class TestBuildRequests:
    def _config(self, **kw):
        defaults = dict(
            ls_rate=2.0,
            be_rate=1.0,
            ls_lengths=LengthDist(kind="fixed", prompt=100, output=10),
            be_lengths=LengthDist(kind="fixed", prompt=500, output=20),
            seed=8,
        )
        defaults.update(kw)
        return WorkloadConfig(**defaults)

    def test_reproducible(self):
        a = build_requests(self._config(), 60.0)
        b = build_requests(self._config(), 60.0)
        assert a == b

    def test_merge_preserves_per_stream_and_global_order(self):
        merged = build_requests(self._config(), 120.0)
        times = [r.arrival_time for r in merged]
        assert times == sorted(times)
        for cls in (ServiceClass.LS, ServiceClass.BE):
            stream = [r for r in merged if r.cls == cls]
            ids = [int(r.id.split("-")[1]) for r in stream]
            assert ids == sorted(ids)
            stream_times = [r.arrival_time for r in stream]
            assert stream_times == sorted(stream_times)

    def test_ids_unique(self):
        merged = build_requests(self._config(), 120.0)
        assert len({r.id for r in merged}) == len(merged)

    def test_be_trace_replay(self):
        cfg = self._config(be_rate=0.0, be_trace=(0.5, 1.5, 2.5, 200.0))
        merged = build_requests(cfg, 100.0)
        be_times = [r.arrival_time for r in merged if r.cls == ServiceClass.BE]
        assert be_times == [0.5, 1.5, 2.5]  # beyond-horizon timestamp dropped

    def test_missing_lengths_rejected(self):
        with pytest.raises(ConfigError):
            build_requests(self._config(ls_lengths=None), 10.0)


@settings(max_examples=25, deadline=None)
@given(
    rate=st.floats(min_value=0.5, max_value=20.0),
    horizon=st.floats(min_value=5.0, max_value=50.0),
    seed=st.integers(min_value=0, max_value=2**31),
)
def test_poisson_stream_properties(rate, horizon, seed):
    times = gen_poisson_arrivals(rate, horizon, seed)
    assert times == sorted(times)
    assert all(0 <= t < horizon for t in times)
