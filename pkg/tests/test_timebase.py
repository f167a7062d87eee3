import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from observa.errors import DegenerateInput, OutOfRange, UnsortedInput
from observa.model import ClockMapping, EventMarker, InteractionPrimitive, PrimitiveKind
from observa.model import device_ts, host_ts
from observa.timebase import (
    align_marker,
    detect_gaps,
    estimate_clock_mapping,
    map_to_host,
    map_to_host_array,
    resample_linear,
)

from conftest import chunk_stream, delete_samples, make_chunk, make_descriptor


class TestEstimateClockMapping:
    def test_identity_clocks(self):
        pairs = [(i * 1_000_000, i * 1_000_000) for i in range(100)]
        m = estimate_clock_mapping(pairs)
        assert m.slope_a == pytest.approx(1.0, abs=1e-15)
        assert m.intercept_b_ns == 0
        assert m.rms_residual_ns == pytest.approx(0.0, abs=1e-6)
        assert m.n_points == 100

    def test_noiseless_affine_recovery(self):
        # host = 1.00005 * device + 120 ms, 100 pairs over 60 s
        slope, b = 1.00005, 120_000_000
        dev = np.arange(100, dtype=np.int64) * 600_000_000
        pairs = [(int(d), int(round(slope * d + b))) for d in dev]
        m = estimate_clock_mapping(pairs)
        assert abs(m.slope_a - slope) / slope < 1e-9
        assert abs(m.intercept_b_ns - b) < 1_000  # 1 us
        assert m.rms_residual_ns < 1.0

    def test_epoch_sized_ticks_stay_accurate_in_span(self):
        # With device epochs around 1.7e18 ns the intercept extrapolates
        # ~60 s of slope uncertainty out to t=0, so the meaningful check is
        # that mapped values within the fitted span stay sub-us accurate.
        slope_eps, b = 5e-5, 120_000_000
        epoch = 1_700_000_000_000_000_000
        dev = epoch + np.arange(100, dtype=np.int64) * 600_000_000
        host = [int(d) + round(slope_eps * d) + b for d in dev]  # exact affine
        m = estimate_clock_mapping(list(zip((int(d) for d in dev), host)))
        assert abs(m.slope_a - (1 + slope_eps)) / (1 + slope_eps) < 1e-9
        for d, h in zip(dev.tolist(), host):
            assert abs(map_to_host(m, d).ticks - h) < 1_000

    def test_jittered_monte_carlo_error_bounds(self):
        # 1000 trials, uniform +/-0.5 ms receipt jitter over a 60 s span;
        # 99th-percentile recovery errors must stay within 5 ppm / 1 ms.
        rng = np.random.default_rng(20240811)
        slope, b = 1.00005, 120_000_000
        slope_err_ppm, b_err_ms = [], []
        for _ in range(1000):
            dev = np.sort(rng.uniform(0, 60e9, 100)).astype(np.int64)
            host = (slope * dev + b + rng.uniform(-0.5e6, 0.5e6, 100)).astype(np.int64)
            m = estimate_clock_mapping(list(zip(dev.tolist(), host.tolist())))
            slope_err_ppm.append(abs(m.slope_a - slope) * 1e6)
            b_err_ms.append(abs(m.intercept_b_ns - b) / 1e6)
        assert np.percentile(slope_err_ppm, 99) <= 5.0
        assert np.percentile(b_err_ms, 99) <= 1.0

    def test_robust_rejects_gross_outlier(self):
        slope, b = 1.0, 0
        dev = np.arange(200, dtype=np.int64) * 100_000_000
        host = dev.copy()
        host[77] += 50_000_000  # one 50 ms spike
        pairs = list(zip(dev.tolist(), host.tolist()))
        plain = estimate_clock_mapping(pairs, robust=False)
        robust = estimate_clock_mapping(pairs, robust=True)
        assert robust.n_points == 199
        assert abs(robust.intercept_b_ns - b) < 1_000
        assert abs(robust.intercept_b_ns) < abs(plain.intercept_b_ns)
        assert robust.rms_residual_ns < plain.rms_residual_ns

    def test_degenerate_inputs(self):
        with pytest.raises(DegenerateInput):
            estimate_clock_mapping([(0, 0)])
        with pytest.raises(DegenerateInput):
            estimate_clock_mapping([(5, 1), (5, 2), (5, 3)])

    def test_accepts_timestamp_objects(self):
        pairs = [(device_ts(0), host_ts(10)), (device_ts(100), host_ts(110))]
        m = estimate_clock_mapping(pairs)
        assert m.slope_a == pytest.approx(1.0)
        assert m.intercept_b_ns == 10


class TestMapToHost:
    def test_identity(self):
        m = ClockMapping(1.0, 0)
        assert map_to_host(m, device_ts(0)) == host_ts(0)
        assert map_to_host(m, device_ts(123456789)) == host_ts(123456789)

    def test_slope_one_offset(self):
        m = ClockMapping(1.0, 120_000_000)
        assert map_to_host(m, device_ts(1_000_000_000)) == host_ts(1_120_000_000)

    def test_matches_generating_formula_at_60s(self):
        slope, b = 1.00005, 120_000_000
        dev = np.arange(100, dtype=np.int64) * 600_000_000
        pairs = [(int(d), int(round(slope * d + b))) for d in dev]
        m = estimate_clock_mapping(pairs)
        t = 60_000_000_000
        expected = round(slope * t + b)
        assert abs(map_to_host(m, device_ts(t)).ticks - expected) < 1_000  # 1 us

    @given(
        slope_ppm=st.integers(min_value=-500, max_value=500),
        intercept=st.integers(min_value=-10**12, max_value=10**12),
        base=st.integers(min_value=-10**15, max_value=10**15),
        deltas=st.lists(st.integers(min_value=1_000, max_value=10**10), min_size=1, max_size=50),
    )
    @settings(max_examples=200, deadline=None)
    def test_strictly_monotone(self, slope_ppm, intercept, base, deltas):
        # Realistic mappings (slope within +/-500 ppm of 1) and ticks spaced
        # at least 1 us apart: mapped values must strictly increase.
        m = ClockMapping(1.0 + slope_ppm * 1e-6, intercept)
        ticks = [base]
        for d in deltas:
            ticks.append(ticks[-1] + d)
        mapped = [map_to_host(m, t).ticks for t in ticks]
        assert all(b > a for a, b in zip(mapped, mapped[1:]))

    def test_array_matches_scalar(self):
        m = ClockMapping(1.00005, 120_000_000)
        ticks = np.array([0, 4_000_000, 60_000_000_000], dtype=np.int64)
        arr = map_to_host_array(m, ticks)
        assert [int(x) for x in arr] == [map_to_host(m, int(t)).ticks for t in ticks]


class TestDetectGaps:
    def test_clean_periodic_stream(self):
        desc = make_descriptor(rate=250.0)
        chunks = chunk_stream(desc, 15000)
        assert detect_gaps(chunks, desc) == []

    def test_ten_deleted_samples_one_gap(self):
        desc = make_descriptor(rate=250.0)
        chunks = chunk_stream(desc, 15000)
        holed = delete_samples(chunks, desc, [(2500, 2510)])  # a 40 ms hole
        gaps = detect_gaps(holed, desc)
        assert len(gaps) == 1
        assert gaps[0].missing_sample_estimate == 10
        assert gaps[0].expected_next_device_ts.ticks == 2500 * desc.sample_period_ns
        assert gaps[0].observed_next_device_ts.ticks == 2510 * desc.sample_period_ns

    def test_sequence_jump_with_contiguous_timestamps(self):
        desc = make_descriptor(rate=250.0)
        a = make_chunk(desc, 7, 0, 25)
        b = make_chunk(desc, 9, 25 * desc.sample_period_ns, 25)  # no time hole
        gaps = detect_gaps([a, b], desc)
        assert len(gaps) == 1
        assert gaps[0].after_sequence_number == 7
        assert gaps[0].missing_sample_estimate == 1  # floor for a reported gap

    def test_unsorted_sequence_raises(self):
        desc = make_descriptor(rate=250.0)
        chunks = chunk_stream(desc, 100)
        with pytest.raises(UnsortedInput):
            detect_gaps([chunks[1], chunks[0]], desc)
        with pytest.raises(UnsortedInput):
            detect_gaps([chunks[0], chunks[0]], desc)

    def test_intra_chunk_gap_with_per_sample_ts(self):
        desc = make_descriptor(rate=250.0, n_channels=1)
        p = desc.sample_period_ns
        ts = np.array([0, p, 2 * p, 8 * p, 9 * p], dtype=np.int64)
        chunk = make_chunk(desc, 0, 0, 5)
        chunk = type(chunk)(
            stream_id=desc.stream_id,
            first_device_ts=device_ts(0),
            sample_period_ns=p,
            host_receipt_ts=host_ts(10 * p),
            samples=chunk.samples,
            sequence_number=0,
            per_sample_device_ts=ts,
        )
        gaps = detect_gaps([chunk], desc)
        assert len(gaps) == 1
        assert gaps[0].missing_sample_estimate == 5

    def test_random_deletions_found_exactly(self):
        # Property: k non-overlapping deletions of >= 2 samples are reported
        # exactly (count and sizes), with no false positives.
        desc = make_descriptor(rate=250.0)
        rng = np.random.default_rng(99)
        for trial in range(25):
            total = 5000
            chunks = chunk_stream(desc, total)
            k = int(rng.integers(1, 11))
            holes = []
            cursor = 100
            for _ in range(k):
                start = cursor + int(rng.integers(0, 300))
                size = int(rng.integers(2, 40))
                if start + size > total - 100:
                    break
                holes.append((start, start + size))
                cursor = start + size + 3  # >= 3 surviving samples between holes
            if not holes:
                continue
            holed = delete_samples(chunks, desc, holes)
            gaps = detect_gaps(holed, desc)
            assert [g.missing_sample_estimate for g in gaps] == [b - a for a, b in holes]


class TestResampleLinear:
    def test_constant_preserved(self):
        src = np.arange(10, dtype=np.int64) * 40_000_000
        vals = np.full((10, 3), 3.25)
        tgt = np.array([5_000_000, 123_456_789, 360_000_000], dtype=np.int64)
        out = resample_linear(src, vals, tgt)
        assert np.all(out == 3.25)

    def test_exact_at_nodes(self):
        rng = np.random.default_rng(1)
        src = np.cumsum(rng.integers(1, 10_000_000, 50)).astype(np.int64)
        vals = rng.normal(size=(50, 2)).astype(np.float32)
        out = resample_linear(src, vals, src)
        assert np.array_equal(out, vals.astype(np.float64))

    def test_sine_rmse_within_derived_bound(self):
        # 1 Hz sine at 25 Hz resampled to 250 Hz over 10 s. Oracle: the
        # closed-form sine. The piecewise-linear error is
        # e ~= (h^2/2) tau(1-tau) |f''|, so RMSE = (h^2/2)(2 pi f)^2
        # * sqrt(1/30) / sqrt(2) ~= 0.00408; frozen bound 0.0041.
        f, fs_src, fs_tgt, dur = 1.0, 25.0, 250.0, 10.0
        src = (np.arange(int(fs_src * dur)) * round(1e9 / fs_src)).astype(np.int64)
        vals = np.sin(2 * np.pi * f * src / 1e9)
        tgt = (np.arange(int(fs_tgt * dur)) * round(1e9 / fs_tgt)).astype(np.int64)
        tgt = tgt[tgt <= src[-1]]
        out = resample_linear(src, vals, tgt)
        rmse = float(np.sqrt(np.mean((out - np.sin(2 * np.pi * f * tgt / 1e9)) ** 2)))
        h = 1.0 / fs_src
        analytic = (h**2 / 2) * (2 * np.pi * f) ** 2 * math.sqrt(1 / 30) / math.sqrt(2)
        assert rmse <= 0.0041
        assert rmse == pytest.approx(analytic, rel=0.02)

    def test_no_extrapolation(self):
        src = np.array([0, 100], dtype=np.int64)
        vals = np.zeros((2, 1))
        with pytest.raises(OutOfRange):
            resample_linear(src, vals, np.array([-1], dtype=np.int64))
        with pytest.raises(OutOfRange):
            resample_linear(src, vals, np.array([101], dtype=np.int64))

    def test_idempotent_on_own_output(self):
        rng = np.random.default_rng(7)
        src = np.cumsum(rng.integers(1, 5_000_000, 100)).astype(np.int64)
        vals = rng.normal(size=100)
        subset = src[10:90:3]
        once = resample_linear(src, vals, subset)
        twice = resample_linear(subset, once, subset)
        assert np.array_equal(once, twice)

    def test_unsorted_source_rejected(self):
        with pytest.raises(ValueError):
            resample_linear(np.array([5, 4], dtype=np.int64), np.zeros(2), np.array([4]))


def _prim(label="m"):
    return InteractionPrimitive(PrimitiveKind.TIMING_EVENT, label, {})


def _marker(mid, host_ns):
    return EventMarker(marker_id=mid, primitive=_prim(), host_ts=host_ts(host_ns), source="t")


class TestAlignMarker:
    def setup_method(self):
        self.desc = make_descriptor(rate=250.0)
        self.chunks = chunk_stream(self.desc, 1000)
        self.mapping = ClockMapping(1.0, 0)
        self.p = self.desc.sample_period_ns

    def test_exactly_on_sample(self):
        a = align_marker(_marker(0, 100 * self.p), self.chunks, self.desc, self.mapping)
        assert (a.sample_index, a.fractional_offset) == (100, 0.0)

    def test_midway_between_samples(self):
        a = align_marker(_marker(0, 100 * self.p + self.p // 2), self.chunks, self.desc, self.mapping)
        assert a.sample_index == 100
        assert a.fractional_offset == pytest.approx(0.5)

    def test_out_of_range(self):
        with pytest.raises(OutOfRange):
            align_marker(_marker(0, -1), self.chunks, self.desc, self.mapping)
        with pytest.raises(OutOfRange):
            align_marker(_marker(0, 999 * self.p + 1), self.chunks, self.desc, self.mapping)

    def test_last_sample_is_alignable(self):
        a = align_marker(_marker(0, 999 * self.p), self.chunks, self.desc, self.mapping)
        assert (a.sample_index, a.fractional_offset) == (999, 0.0)

    def test_skewed_clock_round_trip_within_half_period(self):
        # Device clock = (1 + 50 ppm) * host + 120 ms; markers planted at
        # known sample schedule times must align within half a period.
        desc = make_descriptor(rate=250.0, n_channels=1)
        p = desc.sample_period_ns
        skew, off = 50e-6, 120_000_000
        chunks = []
        pairs = []
        for c in range(40):
            h_first = c * 25 * p
            dev_first = round((1 + skew) * h_first + off)
            chunk = make_chunk(desc, c, dev_first, 25)
            chunks.append(chunk)
            pairs.append((dev_first + 25 * p, h_first + 25 * p))
        mapping = estimate_clock_mapping(pairs)
        for k in (1, 137, 500, 999):
            aligned = align_marker(_marker(0, k * p), chunks, desc, mapping)
            err = aligned.sample_index + aligned.fractional_offset - k
            assert abs(err) <= 0.5

    @given(st.lists(st.integers(min_value=0, max_value=999 * 4_000_000), min_size=1, max_size=30))
    @settings(max_examples=100, deadline=None)
    def test_monotone_in_host_ts(self, times):
        times.sort()
        results = [
            align_marker(_marker(i, t), self.chunks, self.desc, self.mapping)
            for i, t in enumerate(times)
        ]
        keys = [(r.sample_index, r.fractional_offset) for r in results]
        assert keys == sorted(keys)

    def test_marker_inside_gap_clings_to_edge(self):
        holed = delete_samples(self.chunks, self.desc, [(500, 510)])
        a = align_marker(_marker(0, 505 * self.p), holed, self.desc, self.mapping)
        assert a.sample_index == 499  # last sample before the hole
        assert a.fractional_offset == pytest.approx(6.0)
