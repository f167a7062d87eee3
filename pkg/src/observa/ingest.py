"""Acquisition sources and the buffered acquisition loop.

Three source kinds feed the pipeline: NETWORK (an OWP/1 connection to a
device or simulator), SYNTHETIC (deterministic signal generators), and
REPLAY (a previously recorded session). run_acquisition decouples them
from storage with one bounded queue per source and a single sink consumer,
so a slow disk never stalls acquisition and a stalled source never delays
the other streams.
"""

from __future__ import annotations

import math
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Sequence, Union

import numpy as np

from . import owp
from .errors import (
    ConnectionFailed,
    CorruptSession,
    HandshakeMismatch,
    IntegrityFailure,
    ParseError,
    PolicyViolation,
    SinkFailure,
)
from .markers import parse_marker_line
from .model import Chunk, EventMarker, StreamDescriptor, device_ts, host_ts
from .pacing import sleep_until
from .store import SessionReader, open_session

BLOCK = "block"
DROP_OLDEST = "drop_oldest"
FAIL = "fail"
OVERFLOW_POLICIES = (BLOCK, DROP_OLDEST, FAIL)

IDLE = "IDLE"
RUNNING = "RUNNING"
STOPPED = "STOPPED"
FAILED = "FAILED"

DEFAULT_CHUNK_LEN = 25  # 100 ms at 250 Hz


# --- signal specs for the synthetic source ----------------------------------


@dataclass(frozen=True)
class Sine:
    freq_hz: float
    amplitude: float = 1.0
    phase_rad: float = 0.0


@dataclass(frozen=True)
class GaussianNoise:
    sigma: float = 1.0


@dataclass(frozen=True)
class Constant:
    value: float = 0.0


@dataclass(frozen=True)
class Ramp:
    rate_per_s: float = 1.0


SignalSpec = Union[Sine, GaussianNoise, Constant, Ramp]


def _eval_signal(spec: SignalSpec, t_s: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if isinstance(spec, Sine):
        return spec.amplitude * np.sin(2.0 * np.pi * spec.freq_hz * t_s + spec.phase_rad)
    if isinstance(spec, GaussianNoise):
        return rng.normal(0.0, spec.sigma, len(t_s))
    if isinstance(spec, Constant):
        return np.full(len(t_s), spec.value)
    if isinstance(spec, Ramp):
        return spec.rate_per_s * t_s
    raise ValueError(f"unknown signal spec {spec!r}")


def synth_source(
    descriptor: StreamDescriptor,
    signal_spec: Union[SignalSpec, Sequence[SignalSpec], dict, None] = None,
    duration_s: float = 1.0,
    chunk_len: int = DEFAULT_CHUNK_LEN,
    seed: int = 0,
    start_device_ts_ns: int = 0,
    start_sequence: int = 0,
) -> Iterator[Chunk]:
    """Deterministic synthetic chunk generator for one stream.

    Emits ceil(duration*rate/chunk_len) chunks with exactly periodic device
    timestamps and contiguous sequence numbers. Generation is a pure
    function of the seed: two runs yield byte-identical chunk sequences.
    Host receipt stamps are synthesized as the chunk-end device time under
    an identity clock, keeping the generator deterministic.

    signal_spec is one spec for all channels, a sequence aligned with the
    channel list, or a dict keyed by channel label; default is unit
    gaussian noise.
    """
    if chunk_len < 1:
        raise ValueError("chunk_len must be >= 1")
    if duration_s <= 0:
        raise ValueError("duration_s must be positive")
    rate = descriptor.nominal_rate_hz
    if not rate or rate <= 0:
        raise ValueError(f"descriptor {descriptor.stream_id!r} has no positive nominal rate")
    period = descriptor.sample_period_ns
    total = round(duration_s * rate)
    labels = descriptor.channel_labels
    if signal_spec is None:
        specs = [GaussianNoise(1.0)] * len(labels)
    elif isinstance(signal_spec, dict):
        specs = [signal_spec[label] for label in labels]
    elif isinstance(signal_spec, (list, tuple)):
        if len(signal_spec) != len(labels):
            raise ValueError(f"need {len(labels)} channel specs, got {len(signal_spec)}")
        specs = list(signal_spec)
    else:
        specs = [signal_spec] * len(labels)
    rng = np.random.default_rng(seed)
    dtype = descriptor.dtype

    emitted = 0
    seq = start_sequence
    while emitted < total:
        n = min(chunk_len, total - emitted)
        idx = emitted + np.arange(n, dtype=np.int64)
        t_s = (idx * period).astype(np.float64) * 1e-9
        cols = [_eval_signal(spec, t_s, rng) for spec in specs]
        samples = np.stack(cols, axis=1).astype(dtype)
        first = start_device_ts_ns + emitted * period
        yield Chunk(
            stream_id=descriptor.stream_id,
            first_device_ts=device_ts(first),
            sample_period_ns=period,
            host_receipt_ts=host_ts(first + n * period),
            samples=samples,
            sequence_number=seq,
        )
        emitted += n
        seq += 1


# --- network source ----------------------------------------------------------


class NetworkSource:
    """One OWP/1 stream connection in RUNNING state."""

    kind = "NETWORK"

    def __init__(self, sock: socket.socket, descriptor: StreamDescriptor, silence_timeout_s: float):
        self.descriptor = descriptor
        self.state = RUNNING
        self.error: Optional[str] = None
        self.policy_rejections = 0
        self._sock = sock
        self._reader = owp.FrameReader(sock, descriptor)
        sock.settimeout(silence_timeout_s)

    def frames(self) -> Iterator[Union[Chunk, EventMarker]]:
        """Yield chunks and markers; heartbeats are consumed internally.

        Marks the source STOPPED on clean EOF and FAILED after the silence
        timeout or a protocol violation. Markers with policy-violating
        payloads are dropped and counted, not fatal.
        """
        desc = self.descriptor
        n_channels = desc.n_channels
        while True:
            try:
                ftype, seq, first_ts, n_samples, payload = self._reader.next_frame()
            except EOFError:
                if self.state == RUNNING:
                    self.state = STOPPED
                return
            except socket.timeout:
                self.state = FAILED
                self.error = f"no frames or heartbeats within silence timeout on {desc.stream_id!r}"
                return
            except (ParseError, OSError) as e:
                if self.state == RUNNING:
                    self.state = FAILED
                    self.error = str(e)
                return
            stamp = time.time_ns()
            if ftype == owp.FRAME_HEARTBEAT:
                continue
            if ftype == owp.FRAME_CHUNK:
                samples = np.frombuffer(payload, dtype=desc.dtype)
                yield Chunk(
                    stream_id=desc.stream_id,
                    first_device_ts=device_ts(first_ts),
                    sample_period_ns=desc.sample_period_ns,
                    host_receipt_ts=host_ts(stamp),
                    samples=samples.reshape(n_samples, n_channels),
                    sequence_number=seq,
                )
            else:
                try:
                    yield parse_marker_line(
                        payload.decode(), marker_id=seq, source=desc.stream_id, now_ns=stamp
                    )
                except PolicyViolation:
                    self.policy_rejections += 1
                except ParseError as e:
                    self.state = FAILED
                    self.error = f"bad marker frame on {desc.stream_id!r}: {e}"
                    return

    def close(self) -> None:
        if self.state == RUNNING:
            self.state = STOPPED
        try:
            self._sock.close()
        except OSError:
            pass


def open_network_source(
    endpoint: str,
    descriptor: StreamDescriptor,
    connect_timeout_s: float = owp.CONNECT_TIMEOUT_S,
    silence_timeout_s: float = owp.SILENCE_TIMEOUT_S,
) -> NetworkSource:
    """Connect to an OWP/1 endpoint ("host:port") and validate its handshake.

    Returns a RUNNING source. Raises ConnectionFailed when the endpoint is
    unreachable and HandshakeMismatch when the remote's descriptor differs
    from the locally expected one (the remote is NAKed with the reasons).
    """
    host, _, port_text = endpoint.rpartition(":")
    try:
        port = int(port_text)
    except ValueError:
        raise ConnectionFailed(f"endpoint {endpoint!r} is not host:port") from None
    try:
        sock = socket.create_connection((host or "127.0.0.1", port), timeout=connect_timeout_s)
    except OSError as e:
        raise ConnectionFailed(f"cannot connect to {endpoint}: {e}") from e
    try:
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.settimeout(connect_timeout_s)
        remote = owp.read_handshake(sock)
        problems = owp.descriptor_mismatches(descriptor, remote)
        if problems:
            try:
                owp.send_nak(sock, "; ".join(problems))
            finally:
                sock.close()
            raise HandshakeMismatch(
                f"remote descriptor for {endpoint} differs: " + "; ".join(problems)
            )
        owp.send_ack(sock)
    except (OSError, EOFError) as e:
        sock.close()
        raise ConnectionFailed(f"handshake with {endpoint} failed: {e}") from e
    return NetworkSource(sock, descriptor, silence_timeout_s)


# --- replay source -----------------------------------------------------------


class ReplaySource:
    """Re-emits a recorded session's chunks and markers in original order."""

    kind = "REPLAY"

    def __init__(self, reader: SessionReader, speed: Union[float, str], finalized: bool):
        self.reader = reader
        self.speed = speed
        self.state = IDLE
        self._finalized = finalized
        # Original interleaving == file offset order.
        entries: list[tuple[int, str, Optional[str]]] = []
        for sid, idx in reader.manifest.chunk_index.items():
            entries.extend((e.offset, "chunk", sid) for e in idx)
        entries.extend((off, "marker", None) for off in reader._raw_manifest.get("marker_index", ()))
        self._entries = sorted(entries)

    @property
    def descriptors(self) -> tuple[StreamDescriptor, ...]:
        return self.reader.descriptors

    def frames(self) -> Iterator[Union[Chunk, EventMarker]]:
        """Yield records in original order, paced at speed x original timing.

        A truncated (unfinalized) session yields every salvageable record,
        then raises CorruptSession.
        """
        from .store import REC_CHUNK, REC_MARKER, decode_chunk_payload, decode_marker_payload, read_record

        self.state = RUNNING
        pace = None if self.speed == "unpaced" else float(self.speed)
        if pace is not None and pace <= 0:
            raise ValueError("replay speed must be positive or 'unpaced'")
        t0 = time.perf_counter()
        base_ns: Optional[int] = None
        for offset, kind, sid in self._entries:
            rtype, payload, ok, _ = read_record(self.reader._file, offset)
            if not ok or (kind == "chunk") != (rtype == REC_CHUNK):
                self.state = FAILED
                raise CorruptSession(f"record at offset {offset} is damaged")
            if rtype == REC_CHUNK:
                item: Union[Chunk, EventMarker] = decode_chunk_payload(payload, self.descriptors)
                stamp = item.host_receipt_ts.ticks
            else:
                item = decode_marker_payload(payload)
                stamp = item.host_ts.ticks
            if pace is not None:
                if base_ns is None:
                    base_ns = stamp
                sleep_until(t0 + (stamp - base_ns) / 1e9 / pace)
            yield item
        if not self._finalized:
            self.state = FAILED
            raise CorruptSession(
                "session was never finalized; replay delivered only the salvageable records"
            )
        self.state = STOPPED

    def close(self) -> None:
        self.reader.close()
        if self.state == RUNNING:
            self.state = STOPPED


def replay_source(session_path: str, speed: Union[float, str] = "unpaced") -> ReplaySource:
    """Open a session for replay after verifying its integrity.

    Raises IntegrityFailure when the stored digests do not reproduce, and
    leaves truncated sessions replayable up to the damage (iteration then
    raises CorruptSession).
    """
    from .verify import verify_integrity

    finalized = True
    try:
        reader = open_session(session_path)
    except CorruptSession:
        reader = open_session(session_path, recover=True)
        finalized = False
    if finalized:
        section = verify_integrity(session_path)
        if section.status != "PASS":
            reader.close()
            raise IntegrityFailure(
                f"session {session_path!r} failed integrity verification: {section.detail}"
            )
    return ReplaySource(reader, speed, finalized)


# --- acquisition loop ----------------------------------------------------------


@dataclass
class StreamStats:
    chunks_received: int = 0
    samples_received: int = 0
    chunks_written: int = 0
    markers_received: int = 0
    overflow_drops: int = 0
    max_queue_depth: int = 0
    first_host_receipt_ts_ns: Optional[int] = None
    last_host_receipt_ts_ns: Optional[int] = None


@dataclass
class AcquisitionStats:
    per_stream: dict[str, StreamStats] = field(default_factory=dict)
    source_states: dict[str, str] = field(default_factory=dict)
    errors: list[str] = field(default_factory=list)
    policy_rejections: int = 0
    wall_seconds: float = 0.0

    def stream(self, stream_id: str) -> StreamStats:
        return self.per_stream.setdefault(stream_id, StreamStats())

    def total_samples(self) -> int:
        return sum(s.samples_received for s in self.per_stream.values())


class _OverflowAbort(Exception):
    pass


class _SourceQueue:
    """Bounded per-source queue shared between one producer and the consumer."""

    def __init__(self, name: str, capacity: int, policy: str, cond: threading.Condition):
        self.name = name
        self.capacity = capacity
        self.policy = policy
        self.cond = cond  # shared: one lock serializes all queue state
        self.items: deque = deque()
        self.done = False
        self.dropped: list = []
        self.max_depth = 0
        self.stream_name: Optional[str] = None

    def put(self, item, stop_flag: threading.Event) -> bool:
        """Enqueue per policy; returns False when the run is stopping."""
        with self.cond:
            if self.policy == BLOCK:
                while len(self.items) >= self.capacity and not stop_flag.is_set():
                    self.cond.wait(0.1)
            if stop_flag.is_set():
                return False
            if len(self.items) >= self.capacity:
                if self.policy == DROP_OLDEST:
                    self.dropped.append(self.items.popleft())
                else:  # FAIL
                    raise _OverflowAbort(self.name)
            self.items.append(item)
            self.max_depth = max(self.max_depth, len(self.items))
            self.cond.notify_all()
        return True

    def mark_done(self) -> None:
        with self.cond:
            self.done = True
            self.cond.notify_all()


def _normalize_source(src, index: int):
    """Accept SourceHandles or bare chunk iterators."""
    if hasattr(src, "frames"):
        name = getattr(getattr(src, "descriptor", None), "stream_id", None) or (
            f"{getattr(src, 'kind', 'source').lower()}{index}"
        )
        return name, src, src.frames()
    return f"source{index}", None, iter(src)


def run_acquisition(
    sources: Iterable,
    sink,
    queue_capacity: int = 64,
    overflow_policy: str = BLOCK,
    stop_event: Optional[threading.Event] = None,
) -> AcquisitionStats:
    """Pump every source into the sink through bounded per-source queues.

    Each source runs in its own producer thread; the calling thread is the
    single sink consumer. Every chunk that enters a queue is either written
    to the sink or counted in overflow_drops — never silently lost. A sink
    exception aborts the run (all sources closed) and raises SinkFailure;
    the FAIL overflow policy turns the first overflow into the same abort.
    KeyboardInterrupt and stop_event both request a graceful stop: sources
    are wound down, queues drained to the sink, and stats returned so the
    caller can finalize the session.
    """
    if queue_capacity < 1:
        raise ValueError("queue_capacity must be >= 1")
    if overflow_policy not in OVERFLOW_POLICIES:
        raise ValueError(f"overflow_policy must be one of {OVERFLOW_POLICIES}")

    stats = AcquisitionStats()
    stop_flag = threading.Event()
    external_stop = stop_event or threading.Event()
    cond = threading.Condition()
    normalized = [_normalize_source(s, i) for i, s in enumerate(sources)]
    queues = [
        _SourceQueue(name, queue_capacity, overflow_policy, cond) for name, _, _ in normalized
    ]
    abort: list[BaseException] = []
    t_start = time.perf_counter()

    def produce(q: _SourceQueue, iterator) -> None:
        try:
            for item in iterator:
                if external_stop.is_set() or stop_flag.is_set():
                    break
                if not q.put(item, stop_flag):
                    break
                _note_received(stats, q, item, cond)
        except _OverflowAbort:
            with cond:
                abort.append(
                    SinkFailure(
                        f"overflow on source {q.name!r} with FAIL policy aborted the run"
                    )
                )
            stop_flag.set()
        except Exception as e:  # a failed source must not take down the run
            with cond:
                stats.errors.append(f"source {q.name}: {type(e).__name__}: {e}")
        finally:
            q.mark_done()

    threads = []
    for (name, handle, iterator), q in zip(normalized, queues):
        t = threading.Thread(target=produce, args=(q, iterator), name=f"acq-{name}", daemon=True)
        threads.append(t)
        t.start()

    interrupted = False
    try:
        rr = 0
        while True:
            item = None
            with cond:
                while item is None:
                    if (external_stop.is_set() or abort) and not stop_flag.is_set():
                        stop_flag.set()
                        cond.notify_all()
                    if abort:
                        break
                    pending = [q for q in queues if q.items]
                    if pending:
                        q = pending[rr % len(pending)]
                        rr += 1
                        item = q.items.popleft()
                        cond.notify_all()
                    elif all(q.done for q in queues):
                        break
                    else:
                        cond.wait(0.05)
            if item is None:
                break
            try:
                _write_item(sink, item, stats)
            except Exception as e:
                with cond:
                    abort.append(SinkFailure(f"sink failed: {type(e).__name__}: {e}"))
                break
    except KeyboardInterrupt:
        interrupted = True
    finally:
        stop_flag.set()
        with cond:
            cond.notify_all()
        for _, handle, _ in normalized:
            if handle is not None and hasattr(handle, "close"):
                try:
                    handle.close()
                except Exception:
                    pass
        for t in threads:
            t.join(timeout=6.0)
        if interrupted or external_stop.is_set():
            _drain_remaining(queues, sink, stats, cond)
        with cond:
            for q in queues:
                for item in q.dropped:
                    _note_dropped(stats, item)
                depth_key = q.stream_name or q.name
                if q.max_depth:
                    entry = stats.stream(depth_key)
                    entry.max_queue_depth = max(entry.max_queue_depth, q.max_depth)
            for _, handle, _ in normalized:
                if handle is None:
                    continue
                stats.policy_rejections += getattr(handle, "policy_rejections", 0)
                name = getattr(getattr(handle, "descriptor", None), "stream_id", None)
                stats.source_states[name or getattr(handle, "kind", "source")] = getattr(
                    handle, "state", STOPPED
                )
                err = getattr(handle, "error", None)
                if err:
                    stats.errors.append(err)
        stats.wall_seconds = time.perf_counter() - t_start

    if abort:
        raise abort[0]
    return stats


def _drain_remaining(queues, sink, stats, cond) -> None:
    """After a graceful stop, push everything already queued into the sink."""
    for q in queues:
        with cond:
            items = list(q.items)
            q.items.clear()
        for item in items:
            try:
                _write_item(sink, item, stats)
            except Exception:
                return


def _note_received(stats: AcquisitionStats, q: _SourceQueue, item, cond: threading.Condition) -> None:
    with cond:
        if isinstance(item, Chunk):
            if q.stream_name is None:
                q.stream_name = item.stream_id
            s = stats.stream(item.stream_id)
            s.chunks_received += 1
            s.samples_received += item.n_samples
            stamp = item.host_receipt_ts.ticks
            if s.first_host_receipt_ts_ns is None:
                s.first_host_receipt_ts_ns = stamp
            s.last_host_receipt_ts_ns = stamp
        elif isinstance(item, EventMarker):
            stats.stream(item.source).markers_received += 1


def _note_dropped(stats: AcquisitionStats, item) -> None:
    if isinstance(item, Chunk):
        stats.stream(item.stream_id).overflow_drops += 1
    elif isinstance(item, EventMarker):
        stats.stream(item.source).overflow_drops += 1


def _write_item(sink, item, stats: AcquisitionStats) -> None:
    if isinstance(item, Chunk):
        sink.append_chunk(item)
        stats.stream(item.stream_id).chunks_written += 1
    elif isinstance(item, EventMarker):
        sink.append_marker(item)
    else:
        raise TypeError(f"sources must yield Chunk or EventMarker, got {type(item).__name__}")
