"""Clock mapping, drift correction, gap detection, resampling, and
marker-to-sample alignment.

Everything here is a pure function over immutable inputs; all functions are
safe to call concurrently. Timestamps are int64 nanoseconds. To keep ns
precision with epoch-sized tick values (~1e18, beyond float64's integer
range), fits and mapping application decompose the affine transform around
slope 1 and work in deltas.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .errors import DegenerateInput, OutOfRange, UnsortedInput
from .model import (
    Chunk,
    ClockDomain,
    ClockMapping,
    EventMarker,
    StreamDescriptor,
    Timestamp,
    device_ts,
    host_ts,
)

TsLike = Union[Timestamp, int]


def _ticks(t: TsLike, domain: Optional[ClockDomain] = None) -> int:
    if isinstance(t, Timestamp):
        if domain is not None and t.domain is not domain:
            raise ValueError(f"expected {domain.value} timestamp, got {t.domain.value}")
        return t.ticks
    return int(t)


@dataclass(frozen=True)
class Gap:
    """A detected discontinuity in a nominally periodic stream."""

    stream_id: str
    after_sequence_number: int
    expected_next_device_ts: Timestamp
    observed_next_device_ts: Timestamp
    missing_sample_estimate: int


@dataclass(frozen=True)
class AlignedMarker:
    """A marker located on a stream's sample axis.

    fractional_offset is the sub-sample position in [0, 1). It can exceed 1
    only when the marker falls inside a stream discontinuity, where it
    honestly measures periods past the gap-edge sample.
    """

    marker_id: int
    stream_id: str
    sample_index: int
    fractional_offset: float
    host_ts_used: Timestamp


def estimate_clock_mapping(
    pairs: Sequence[tuple[TsLike, TsLike]], robust: bool = False
) -> ClockMapping:
    """Least-squares affine fit host = a * device + b over (device, host) pairs.

    With robust=True, one pass of outlier rejection at 3x the RMS residual
    followed by a refit. Raises DegenerateInput when fewer than two distinct
    device timestamps are available.
    """
    if len(pairs) < 2:
        raise DegenerateInput(f"need >= 2 timestamp pairs, got {len(pairs)}")
    dev = np.array([_ticks(d, ClockDomain.DEVICE) for d, _ in pairs], dtype=np.int64)
    hst = np.array([_ticks(h, ClockDomain.HOST) for _, h in pairs], dtype=np.int64)
    if len(np.unique(dev)) < 2:
        raise DegenerateInput("need >= 2 distinct device timestamps to map clocks")

    slope, c, residuals = _fit_deltas(dev, hst)
    n_used = len(dev)
    if robust:
        rms = float(np.sqrt(np.mean(residuals**2)))
        keep = np.abs(residuals) <= 3.0 * rms
        if keep.sum() >= 2 and len(np.unique(dev[keep])) >= 2 and keep.sum() < len(dev):
            dev, hst = dev[keep], hst[keep]
            slope, c, residuals = _fit_deltas(dev, hst)
            n_used = int(keep.sum())

    rms = float(np.sqrt(np.mean(residuals**2)))
    # b = (host0 - dev0) + c + (1 - a) * dev0, assembled so the large epoch
    # cancellation happens in exact integer arithmetic.
    dev0, hst0 = int(dev[0]), int(hst[0])
    intercept = (hst0 - dev0) + round(float(c) + (1.0 - slope) * dev0)
    return ClockMapping(
        slope_a=float(slope), intercept_b_ns=int(intercept), rms_residual_ns=rms, n_points=n_used
    )


def _fit_deltas(dev: np.ndarray, hst: np.ndarray):
    """Centered least squares on deltas from the first pair.

    Returns (slope, c, residuals) where host - host0 ~= slope*(dev - dev0) + c.
    """
    dx = (dev - dev[0]).astype(np.float64)
    dy = (hst - hst[0]).astype(np.float64)
    mx, my = dx.mean(), dy.mean()
    sxx = float(np.dot(dx - mx, dx - mx))
    sxy = float(np.dot(dx - mx, dy - my))
    slope = sxy / sxx
    c = my - slope * mx
    residuals = dy - (slope * dx + c)
    return slope, c, residuals


def map_to_host(mapping: ClockMapping, ts: TsLike) -> Timestamp:
    """Apply the affine mapping to one device timestamp.

    Strictly monotone for any valid mapping at realistic tick spacings
    (>= 1/slope ns apart); computed as t + round((a-1)*t + b) so that
    epoch-sized ticks keep sub-ns precision.
    """
    t = _ticks(ts, ClockDomain.DEVICE)
    eps = mapping.slope_a - 1.0
    return host_ts(t + round(eps * t + mapping.intercept_b_ns))


def map_to_host_array(mapping: ClockMapping, ticks: np.ndarray) -> np.ndarray:
    """Vectorized map_to_host over an int64 ns array."""
    t = np.asarray(ticks, dtype=np.int64)
    eps = mapping.slope_a - 1.0
    adj = np.rint(eps * t.astype(np.float64) + mapping.intercept_b_ns).astype(np.int64)
    return t + adj


def map_to_device(mapping: ClockMapping, ts: TsLike) -> Timestamp:
    """Inverse mapping, host -> device (float inversion, rounded to ns)."""
    h = _ticks(ts, ClockDomain.HOST)
    # device = (host - b) / a = host + ((1-a)*host - b)/a
    eps = 1.0 - mapping.slope_a
    return device_ts(h + round((eps * h - mapping.intercept_b_ns) / mapping.slope_a))


def detect_gaps(
    chunks: Iterable[Chunk],
    descriptor: StreamDescriptor,
    tolerance_factor: float = 1.5,
) -> list[Gap]:
    """Find discontinuities in one stream's chunk sequence.

    A Gap is reported wherever the inter-sample device interval exceeds
    tolerance_factor * nominal period, or the sequence number jumps.
    missing_sample_estimate is the rounded count of absent sample slots,
    floored at 1. Raises UnsortedInput when sequence numbers do not
    strictly increase.
    """
    period = descriptor.sample_period_ns
    threshold = tolerance_factor * period
    gaps: list[Gap] = []
    prev_seq: Optional[int] = None
    prev_last: Optional[int] = None

    def note_gap(after_seq: int, prev_ts: int, observed: int, force: bool) -> None:
        interval = observed - prev_ts
        if force or interval > threshold:
            expected = prev_ts + period
            estimate = max(1, round((observed - expected) / period))
            gaps.append(
                Gap(
                    stream_id=descriptor.stream_id,
                    after_sequence_number=after_seq,
                    expected_next_device_ts=device_ts(expected),
                    observed_next_device_ts=device_ts(observed),
                    missing_sample_estimate=estimate,
                )
            )

    for chunk in chunks:
        seq = chunk.sequence_number
        if prev_seq is not None and seq <= prev_seq:
            raise UnsortedInput(
                f"chunks of stream {descriptor.stream_id!r} not sorted: "
                f"sequence {seq} after {prev_seq}"
            )
        if chunk.n_samples == 0:
            prev_seq = seq
            continue
        ts = chunk.device_ts_array()
        if prev_last is not None:
            seq_jumped = prev_seq is not None and seq > prev_seq + 1
            note_gap(prev_seq, prev_last, int(ts[0]), force=seq_jumped)
        if chunk.per_sample_device_ts is not None and len(ts) > 1:
            intervals = np.diff(ts)
            for i in np.nonzero(intervals > threshold)[0]:
                note_gap(seq, int(ts[i]), int(ts[i + 1]), force=True)
        prev_seq = seq
        prev_last = int(ts[-1])
    return gaps


def resample_linear(
    source_ts: np.ndarray,
    values: np.ndarray,
    target_ts: np.ndarray,
) -> np.ndarray:
    """Per-channel linear interpolation of (source_ts, values) at target_ts.

    source_ts must be strictly increasing; every target must fall inside
    [source_ts[0], source_ts[-1]] — no extrapolation, OutOfRange otherwise.
    Exact (bit-identical) at coincident timestamps. Returns float64 with one
    column per channel (1-D input gives 1-D output).
    """
    src = np.asarray(source_ts, dtype=np.int64)
    tgt = np.asarray(target_ts, dtype=np.int64)
    vals = np.asarray(values)
    if src.ndim != 1 or len(src) == 0:
        raise ValueError("source timestamps must be a non-empty 1-D array")
    if len(src) > 1 and not np.all(np.diff(src) > 0):
        raise ValueError("source timestamps must be strictly increasing")
    one_d = vals.ndim == 1
    if one_d:
        vals = vals[:, None]
    if vals.shape[0] != len(src):
        raise ValueError("values row count must equal source timestamp count")
    if len(tgt) and (tgt.min() < src[0] or tgt.max() > src[-1]):
        raise OutOfRange(
            f"target timestamps [{tgt.min()}, {tgt.max()}] exceed source span "
            f"[{src[0]}, {src[-1]}]; trim before resampling"
        )
    # Work in deltas from the first source stamp: keeps float64 exact for
    # epoch-sized int64 ns inputs.
    x = (src - src[0]).astype(np.float64)
    xi = (tgt - src[0]).astype(np.float64)
    out = np.empty((len(tgt), vals.shape[1]), dtype=np.float64)
    for ch in range(vals.shape[1]):
        out[:, ch] = np.interp(xi, x, vals[:, ch].astype(np.float64))
    return out[:, 0] if one_d else out


class _SampleAxis:
    """Random access to the device timestamp of any sample across chunks."""

    def __init__(self, chunks: Sequence[Chunk], period_ns: int):
        self.chunks = [c for c in chunks if c.n_samples > 0]
        if not self.chunks:
            raise DegenerateInput("stream has no samples")
        self.period_ns = period_ns
        counts = np.array([c.n_samples for c in self.chunks], dtype=np.int64)
        self.bases = np.concatenate(([0], np.cumsum(counts)))
        self.firsts = np.array([c.first_device_ts.ticks for c in self.chunks], dtype=np.int64)
        self.total = int(self.bases[-1])

    def device_ticks(self, index: int) -> int:
        ci = int(np.searchsorted(self.bases, index, side="right") - 1)
        chunk = self.chunks[ci]
        local = index - int(self.bases[ci])
        if chunk.per_sample_device_ts is not None:
            return int(chunk.per_sample_device_ts[local])
        return chunk.first_device_ts.ticks + local * chunk.sample_period_ns

    def nearest_index(self, ticks: float) -> int:
        ci = int(np.searchsorted(self.firsts, ticks, side="right") - 1)
        ci = max(ci, 0)
        chunk = self.chunks[ci]
        local = int((ticks - chunk.first_device_ts.ticks) // self.period_ns)
        local = min(max(local, 0), chunk.n_samples - 1)
        return int(self.bases[ci]) + local


def align_marker(
    marker: EventMarker,
    chunks: Sequence[Chunk],
    descriptor: StreamDescriptor,
    mapping: ClockMapping,
) -> AlignedMarker:
    """Locate a marker on a stream's sample axis via its host timestamp.

    Picks the sample whose mapped host timestamp is the greatest one at or
    before marker.host_ts; a marker exactly on a sample gets offset 0.
    Raises OutOfRange when the marker precedes the first or follows the
    last sample of the stream.
    """
    axis = _SampleAxis(chunks, descriptor.sample_period_ns)
    target = marker.host_ts.ticks

    def host_of(i: int) -> int:
        return map_to_host(mapping, axis.device_ticks(i)).ticks

    first_h, last_h = host_of(0), host_of(axis.total - 1)
    if target < first_h or target > last_h:
        raise OutOfRange(
            f"marker {marker.marker_id} host_ts {target} outside stream span "
            f"[{first_h}, {last_h}] of {descriptor.stream_id!r}"
        )
    # Initial guess by inverting the mapping, then local refinement: the
    # inversion is float so the guess can be off by a sample near edges.
    guess = axis.nearest_index(map_to_device(mapping, marker.host_ts).ticks)
    i = min(max(guess, 0), axis.total - 1)
    while i + 1 < axis.total and host_of(i + 1) <= target:
        i += 1
    while i > 0 and host_of(i) > target:
        i -= 1
    host_period = mapping.slope_a * descriptor.sample_period_ns
    offset = (target - host_of(i)) / host_period
    return AlignedMarker(
        marker_id=marker.marker_id,
        stream_id=descriptor.stream_id,
        sample_index=i,
        fractional_offset=offset,
        host_ts_used=marker.host_ts,
    )
