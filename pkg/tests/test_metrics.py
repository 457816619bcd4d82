"""Metric methodology tests with hand-computed fixtures."""

import numpy as np
import pytest

from dynfuse.metrics import (
    Stat,
    bandwidth_metric,
    fps_metric,
    grouped_bandwidth,
    latency_metric,
)


class TestLatency:
    def test_constant_gap(self):
        emissions = {k: k * 1_000_000 for k in range(10)}
        arrivals = {k: k * 1_000_000 + 100_000 for k in range(10)}
        stat, unmatched = latency_metric(emissions, arrivals)
        assert stat.mean == pytest.approx(0.100)
        assert stat.std == pytest.approx(0.0)
        assert unmatched == 0

    def test_two_gaps_mean_and_population_std(self):
        emissions = {0: 0, 1: 1_000_000}
        arrivals = {0: 100_000, 1: 1_200_000}
        stat, _ = latency_metric(emissions, arrivals)
        assert stat.mean == pytest.approx(0.15)
        assert stat.std == pytest.approx(0.05)

    def test_offsets_applied(self):
        emissions = {0: 0}
        arrivals = {0: 50_000}
        stat, _ = latency_metric(emissions, arrivals,
                                 emission_offset_us=10_000,
                                 arrival_offset_us=30_000)
        # (50000+30000) - (0+10000) = 70 ms
        assert stat.mean == pytest.approx(0.070)

    def test_unmatched_counted(self):
        stat, unmatched = latency_metric({0: 0, 1: 1, 5: 5}, {0: 10, 2: 2})
        assert stat.n == 1
        assert unmatched == 3

    def test_randomized_against_recomputation(self):
        rng = np.random.default_rng(5)
        emissions = {k: int(rng.integers(0, 10**9)) for k in range(50)}
        arrivals = {k: emissions[k] + int(rng.integers(10**4, 10**6))
                    for k in range(50)}
        stat, _ = latency_metric(emissions, arrivals)
        lat = [(arrivals[k] - emissions[k]) / 1e6 for k in sorted(arrivals)]
        assert stat.mean == pytest.approx(sum(lat) / len(lat))
        mean = sum(lat) / len(lat)
        var = sum((v - mean) ** 2 for v in lat) / len(lat)
        assert stat.std == pytest.approx(var ** 0.5)


class TestFps:
    def test_uniform_arrivals(self):
        stat = fps_metric([k * 50_000 for k in range(20)])
        assert stat.mean == pytest.approx(20.0)
        assert stat.std == pytest.approx(0.0, abs=1e-9)

    def test_example_three_arrivals(self):
        stat = fps_metric([0, 100_000, 300_000])
        assert stat.mean == pytest.approx(1.0 / 0.150)
        # deltas 0.1 / 0.2 -> population std 0.05; propagated: 0.05 / 0.15^2
        assert stat.std == pytest.approx(0.05 / 0.15**2)

    def test_fewer_than_two_undefined(self):
        assert fps_metric([]) is None
        assert fps_metric([123]) is None

    def test_randomized_against_recomputation(self):
        rng = np.random.default_rng(9)
        times = np.cumsum(rng.integers(20_000, 90_000, 40)).tolist()
        stat = fps_metric(times)
        deltas = np.diff(np.array(times)) / 1e6
        assert stat.mean == pytest.approx(1.0 / deltas.mean())
        assert stat.std == pytest.approx(deltas.std() / deltas.mean() ** 2)


class TestBandwidth:
    def test_one_megabyte_in_one_second(self):
        rows = [(0, "MC_BLOCKS", 500_000), (999_999, "MC_BLOCKS", 500_000)]
        out = bandwidth_metric(rows)
        assert out["MC_BLOCKS"].mean == pytest.approx(8.0)

    def test_zero_traffic_type_absent(self):
        rows = [(0, "MC_BLOCKS", 100)]
        out = bandwidth_metric(rows)
        assert "DYN_FRAME" not in out

    def test_grouped_report_zero_for_missing(self):
        groups = grouped_bandwidth([(0, "TSDF_BLOCKS", 125_000)], [])
        assert groups["TSDF"].mean == pytest.approx(1.0)
        assert groups["Dyn"] == Stat(0.0, 0.0, 0)
        assert groups["MC"] == Stat(0.0, 0.0, 0)

    def test_windows_and_std_match_oracle(self):
        rng = np.random.default_rng(3)
        rows = []
        for _ in range(300):
            rows.append((int(rng.integers(0, 5_000_000)), "DYN_FRAME",
                         int(rng.integers(100, 10_000))))
        out = bandwidth_metric(rows, wall_time_s=5.0)
        t0 = min(r[0] for r in rows)
        windows = np.zeros(5)
        for ts, _, nbytes in rows:
            w = min(int((ts - t0) / 1e6), 4)
            windows[w] += nbytes * 8
        assert out["DYN_FRAME"].mean == pytest.approx(windows.mean() / 1e6)
        assert out["DYN_FRAME"].std == pytest.approx(windows.std() / 1e6)

    def test_idle_tail_counts_as_zero_windows(self):
        rows = [(0, "MC_BLOCKS", 1_000_000)]
        out = bandwidth_metric(rows, wall_time_s=4.0)
        assert out["MC_BLOCKS"].n == 4
        assert out["MC_BLOCKS"].mean == pytest.approx(2.0)
