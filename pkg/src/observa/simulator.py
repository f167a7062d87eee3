"""Device emulator: serves fault-injected multimodal streams over OWP/1.

The emulator precomputes, per stream, a deterministic schedule of frames
(chunks, planted markers, idle heartbeats) from a seed and a fault spec:
clock skew/offset/jitter on device timestamps and dropout windows that
suppress samples while — in the default "drop" mode — still advancing
sequence numbers, producing true gaps. Serving then either paces emission
against the wall clock or blasts the schedule unpaced.

The same schedule can be written straight into a session file without
sockets (write_session), which gives bulk verification tests a noiseless
virtual host timeline. The exit report carries the planted-marker ground
truth used by alignment verification.
"""

from __future__ import annotations

import json
import math
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import owp
from .errors import BindFailure, ConfigInvalid
from .model import (
    Chunk,
    EventMarker,
    InteractionPrimitive,
    Modality,
    PrimitiveKind,
    StreamDescriptor,
    device_ts,
    galea_beta_descriptors,
    host_ts,
)
from .pacing import sleep_until

DROP = "drop"  # sensor-side loss: sequence numbers advance over the hole
STALL = "stall"  # transport stall: sequence numbers stay dense


@dataclass(frozen=True)
class FaultSpec:
    """Clock and continuity faults applied to every served stream."""

    clock_skew_ppm: float = 0.0
    clock_offset_ms: float = 0.0
    timestamp_jitter_ms: float = 0.0
    dropout_windows: tuple[tuple[float, float], ...] = ()
    seed: int = 0
    dropout_mode: str = DROP
    dropout_streams: Optional[tuple[str, ...]] = None  # None = all sample streams

    def validate(self, duration_s: float) -> None:
        if self.timestamp_jitter_ms < 0:
            raise ConfigInvalid("timestamp_jitter_ms must be non-negative")
        if self.dropout_mode not in (DROP, STALL):
            raise ConfigInvalid(f"dropout_mode must be {DROP!r} or {STALL!r}")
        windows = sorted(self.dropout_windows)
        for start, dur in windows:
            if dur <= 0 or start < 0:
                raise ConfigInvalid(f"dropout window ({start}, {dur}) is malformed")
            if start + dur > duration_s:
                raise ConfigInvalid(
                    f"dropout window ({start}, {dur}) extends past the {duration_s}s session"
                )
        for (s1, d1), (s2, _) in zip(windows, windows[1:]):
            if s1 + d1 > s2:
                raise ConfigInvalid(f"dropout windows overlap at {s2}s")


@dataclass
class _Event:
    sched_ns: int  # ideal host-clock emission time, ns from session start
    kind: str  # "chunk" | "marker" | "hb"
    seq: int = 0
    device_ts_ns: int = 0
    n_samples: int = 0
    samples: Optional[np.ndarray] = None
    marker: Optional[dict] = None  # kind/label/payload for marker events


@dataclass
class _StreamPlan:
    descriptor: StreamDescriptor
    events: list[_Event]
    samples_planned: int
    suppressed_samples: int
    windows: list[dict]
    markers: list[dict]


@dataclass
class StreamReport:
    stream_id: str
    endpoint: str
    served: bool
    frames_sent: int
    samples_emitted: int
    markers_emitted: int
    suppressed_samples: int
    dropout_windows: list[dict]

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class SimulationReport:
    """Exit report: what was served plus the alignment ground truth."""

    profile: str
    duration_s: float
    seed: int
    paced: bool
    clock_skew_ppm: float
    clock_offset_ms: float
    timestamp_jitter_ms: float
    dropout_mode: str
    streams: list[StreamReport] = field(default_factory=list)
    markers: list[dict] = field(default_factory=list)
    base_endpoint: str = ""
    # Wall-clock ns at schedule time zero; 0 for the direct write_session
    # path whose host timeline starts at zero. Needed to recover the
    # configured clock offset from a recorded session.
    t0_wall_ns: int = 0

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["streams"] = [s.to_dict() for s in self.streams]
        return d

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @staticmethod
    def load(path: str) -> dict:
        with open(path) as f:
            return json.load(f)


def default_chunk_len(rate_hz: float) -> int:
    """100 ms frames for fast streams, 200 ms for slow ones."""
    return 25 if rate_hz >= 100 else max(1, round(rate_hz / 5))


def _surviving_segments(
    total: int, rate: float, windows: Sequence[tuple[float, float]]
) -> tuple[list[tuple[int, int]], list[dict]]:
    """Split [0, total) into surviving index segments around dropout holes."""
    holes = []
    for start, dur in sorted(windows):
        i0 = max(0, math.ceil(start * rate - 1e-9))
        i1 = min(total, math.ceil((start + dur) * rate - 1e-9))
        if i1 > i0:
            holes.append((i0, i1, start, dur))
    segments = []
    cursor = 0
    for i0, i1, _, _ in holes:
        if i0 > cursor:
            segments.append((cursor, i0))
        cursor = max(cursor, i1)
    if cursor < total:
        segments.append((cursor, total))
    window_info = [
        {"start_s": start, "duration_s": dur, "first_index": i0, "suppressed": i1 - i0}
        for i0, i1, start, dur in holes
    ]
    return segments, window_info


def _device_stamp(h_ns: int, skew_ppm: float, offset_ms: float, jitter_ns: float) -> int:
    return h_ns + round(skew_ppm * 1e-6 * h_ns + offset_ms * 1e6 + jitter_ns)


def _signal_block(desc: StreamDescriptor, idx: np.ndarray, rng: np.random.Generator, state: dict) -> np.ndarray:
    """Deterministic per-modality content; realism is a non-goal."""
    rate = desc.nominal_rate_hz
    t = idx.astype(np.float64) / rate
    n, ch = len(idx), desc.n_channels
    out = np.empty((n, ch))
    if desc.modality in (Modality.EEG, Modality.ExG, Modality.EMG, Modality.EOG):
        noise = rng.normal(0.0, 3.0, (n, ch))
        # 3-tap smoothing with carry state keeps the noise band-limited-ish
        # and chunk boundaries seamless.
        prev = state.setdefault("tail", np.zeros((2, ch)))
        padded = np.vstack([prev, noise])
        smoothed = (padded[2:] + padded[1:-1] + padded[:-2]) / 3.0
        state["tail"] = padded[-2:]
        for c in range(ch):
            out[:, c] = 10.0 * np.sin(2.0 * np.pi * (6.0 + 2.0 * c) * t + c) + smoothed[:, c]
    elif desc.modality is Modality.PPG:
        pulse = np.maximum(0.0, np.sin(2.0 * np.pi * 1.2 * t)) ** 3
        for c in range(ch):
            out[:, c] = 50.0 + 100.0 * pulse + rng.normal(0.0, 0.5, n)
    elif desc.modality is Modality.IMU:
        out[:, :] = rng.normal(0.0, 0.02, (n, ch))
        out[:, 2] += 1.0  # gravity on ACC_Z
        out[:, 3:] += rng.normal(0.0, 0.3, (n, max(0, ch - 3)))
    elif desc.modality is Modality.MAG:
        base = np.array([20.0, 5.0, 42.0])[:ch]
        out[:, :] = base + rng.normal(0.0, 0.1, (n, ch))
    else:
        out[:, :] = rng.normal(0.0, 1.0, (n, ch))
    return out.astype(desc.dtype)


def build_stream_plan(
    descriptor: StreamDescriptor,
    faults: FaultSpec,
    duration_s: float,
    stream_index: int,
    chunk_len: Optional[int] = None,
    marker_sample_indices: Sequence[int] = (),
) -> _StreamPlan:
    """Precompute one stream's deterministic frame/marker schedule."""
    rate = descriptor.nominal_rate_hz
    period = descriptor.sample_period_ns
    total = round(duration_s * rate)
    length = chunk_len or default_chunk_len(rate)
    rng = np.random.default_rng([faults.seed, stream_index])
    jitter_ns = faults.timestamp_jitter_ms * 1e6

    apply_dropouts = faults.dropout_streams is None or descriptor.stream_id in faults.dropout_streams
    windows = faults.dropout_windows if apply_dropouts else ()
    segments, window_info = _surviving_segments(total, rate, windows)
    suppressed = sum(w["suppressed"] for w in window_info)

    events: list[_Event] = []
    sig_state: dict = {}
    last_seq = -1
    for seg_start, seg_end in segments:
        pos = seg_start
        while pos < seg_end:
            n = min(length, seg_end - pos)
            idx = pos + np.arange(n, dtype=np.int64)
            samples = _signal_block(descriptor, idx, rng, sig_state)
            h_first = pos * period
            jit = rng.uniform(-jitter_ns, jitter_ns) if jitter_ns else 0.0
            dev_first = _device_stamp(h_first, faults.clock_skew_ppm, faults.clock_offset_ms, jit)
            if faults.dropout_mode == DROP:
                seq = max(last_seq + 1, pos // length)
            else:
                seq = last_seq + 1
            last_seq = seq
            events.append(
                _Event(
                    sched_ns=(pos + n) * period,
                    kind="chunk",
                    seq=seq,
                    device_ts_ns=dev_first,
                    n_samples=n,
                    samples=samples,
                )
            )
            pos += n

    surviving = {i for s, e in segments for i in range(s, e)} if windows else None

    def stream_position(schedule_index: int) -> int:
        # Position among the recorded (surviving) samples: what alignment
        # against the recorded stream should recover.
        before = sum(
            min(w["first_index"] + w["suppressed"], schedule_index) - w["first_index"]
            for w in window_info
            if w["first_index"] < schedule_index
        )
        return schedule_index - before

    markers: list[dict] = []
    for sample_index in marker_sample_indices:
        if sample_index >= total or (surviving is not None and sample_index not in surviving):
            continue
        h_ns = sample_index * period
        jit = rng.uniform(-jitter_ns, jitter_ns) if jitter_ns else 0.0
        dev = _device_stamp(h_ns, faults.clock_skew_ppm, faults.clock_offset_ms, jit)
        marker_id = len(markers)
        body = {
            "kind": PrimitiveKind.TIMING_EVENT.value,
            "label": f"sync_{sample_index}",
            "payload": {"index": int(sample_index)},
        }
        events.append(
            _Event(sched_ns=h_ns, kind="marker", seq=marker_id, device_ts_ns=dev, marker=body)
        )
        markers.append(
            {
                "stream_id": descriptor.stream_id,
                "marker_id": marker_id,
                "sample_index": int(sample_index),
                "stream_position": stream_position(int(sample_index)),
                "device_ts_ns": dev,
                "sched_host_ts_ns": h_ns,
                "label": body["label"],
            }
        )

    events.sort(key=lambda e: (e.sched_ns, 0 if e.kind == "marker" else 1, e.seq))
    # Idle heartbeats at 1 s cadence keep receivers from declaring silence
    # during long dropout windows.
    hb_gap = round(owp.HEARTBEAT_IDLE_S * 1e9)
    with_hb: list[_Event] = []
    prev_ns = 0
    for ev in events:
        t = prev_ns + hb_gap
        while t < ev.sched_ns:
            with_hb.append(_Event(sched_ns=t, kind="hb"))
            t += hb_gap
        with_hb.append(ev)
        prev_ns = ev.sched_ns
    return _StreamPlan(
        descriptor=descriptor,
        events=with_hb,
        samples_planned=total,
        suppressed_samples=suppressed,
        windows=window_info,
        markers=markers,
    )


def plan_session(
    descriptors: Sequence[StreamDescriptor],
    faults: FaultSpec,
    duration_s: float,
    chunk_len: Optional[int] = None,
    marker_interval_s: Optional[float] = 1.0,
    marker_stream_index: int = 0,
) -> list[_StreamPlan]:
    """Plans for every stream; markers planted on one stream at a fixed cadence."""
    if duration_s <= 0:
        raise ConfigInvalid("duration_s must be positive")
    faults.validate(duration_s)
    plans = []
    for i, desc in enumerate(descriptors):
        marker_indices: list[int] = []
        if marker_interval_s and i == marker_stream_index:
            rate = desc.nominal_rate_hz
            k = 1
            while True:
                target = round(k * marker_interval_s * rate)
                if target >= round(duration_s * rate):
                    break
                marker_indices.append(target)
                k += 1
        plans.append(
            build_stream_plan(desc, faults, duration_s, i, chunk_len, marker_indices)
        )
    return plans


def _frame_bytes(plan: _StreamPlan) -> list[bytes]:
    frames = []
    for ev in plan.events:
        if ev.kind == "chunk":
            frames.append(
                owp.encode_chunk_frame(
                    ev.seq, ev.device_ts_ns, ev.n_samples, np.ascontiguousarray(ev.samples).tobytes()
                )
            )
        elif ev.kind == "marker":
            body = owp.marker_body(
                ev.marker["kind"], ev.marker["label"], ev.marker["payload"], ev.device_ts_ns
            )
            frames.append(owp.encode_marker_frame(ev.seq, ev.device_ts_ns, body))
        else:
            frames.append(owp.encode_heartbeat())
    return frames


def stream_frame_bytes(
    descriptor: StreamDescriptor,
    faults: FaultSpec,
    duration_s: float,
    stream_index: int = 0,
    chunk_len: Optional[int] = None,
    marker_sample_indices: Sequence[int] = (),
) -> bytes:
    """Concatenated wire bytes of one stream's schedule (determinism checks)."""
    plan = build_stream_plan(
        descriptor, faults, duration_s, stream_index, chunk_len, marker_sample_indices
    )
    return b"".join(_frame_bytes(plan))


def _resolve_profile(profile, descriptors) -> tuple[str, tuple[StreamDescriptor, ...]]:
    if descriptors is not None:
        return (profile or "custom"), tuple(descriptors)
    if profile == "galea-beta":
        return profile, galea_beta_descriptors()
    raise ConfigInvalid(f"unknown profile {profile!r} and no custom descriptors given")


def write_session(
    path: str,
    profile: str = "galea-beta",
    faults: FaultSpec = FaultSpec(),
    duration_s: float = 60.0,
    descriptors: Optional[Sequence[StreamDescriptor]] = None,
    chunk_len: Optional[int] = None,
    marker_interval_s: Optional[float] = 1.0,
    session_id: Optional[str] = None,
    metadata: Optional[dict] = None,
) -> SimulationReport:
    """Write the planned session straight to disk, no sockets involved.

    Host receipt stamps are the ideal schedule times, i.e. a noiseless
    virtual host clock; the device timestamps still carry the configured
    faults. This is the deterministic path bulk verification runs use.
    """
    from .store import create_session

    profile, descs = _resolve_profile(profile, descriptors)
    plans = plan_session(descs, faults, duration_s, chunk_len, marker_interval_s)
    report = _new_report(profile, faults, duration_s, paced=False)
    writer = create_session(
        descs,
        marker_sources=[d.stream_id for d in descs],
        metadata=metadata or {},
        path=path,
        session_id=session_id,
    )
    merged = []
    for plan in plans:
        merged.extend((ev.sched_ns, i, ev, plan) for i, ev in enumerate(plan.events))
    merged.sort(key=lambda item: (item[0], item[3].descriptor.stream_id, item[1]))
    for sched_ns, _, ev, plan in merged:
        desc = plan.descriptor
        if ev.kind == "chunk":
            writer.append_chunk(
                Chunk(
                    stream_id=desc.stream_id,
                    first_device_ts=device_ts(ev.device_ts_ns),
                    sample_period_ns=desc.sample_period_ns,
                    host_receipt_ts=host_ts(sched_ns),
                    samples=ev.samples,
                    sequence_number=ev.seq,
                )
            )
        elif ev.kind == "marker":
            writer.append_marker(
                EventMarker(
                    marker_id=ev.seq,
                    primitive=InteractionPrimitive(
                        PrimitiveKind(ev.marker["kind"]), ev.marker["label"], ev.marker["payload"]
                    ),
                    host_ts=host_ts(sched_ns),
                    device_ts=device_ts(ev.device_ts_ns),
                    source=desc.stream_id,
                )
            )
    writer.finalize()
    _fill_report(report, plans, [True] * len(plans), base_endpoint="")
    return report


def _new_report(profile: str, faults: FaultSpec, duration_s: float, paced: bool) -> SimulationReport:
    return SimulationReport(
        profile=profile,
        duration_s=duration_s,
        seed=faults.seed,
        paced=paced,
        clock_skew_ppm=faults.clock_skew_ppm,
        clock_offset_ms=faults.clock_offset_ms,
        timestamp_jitter_ms=faults.timestamp_jitter_ms,
        dropout_mode=faults.dropout_mode,
    )


def _fill_report(
    report: SimulationReport,
    plans: Sequence[_StreamPlan],
    served: Sequence[bool],
    base_endpoint: str,
    frames_sent: Optional[Sequence[int]] = None,
    endpoints: Optional[Sequence[str]] = None,
) -> None:
    report.base_endpoint = base_endpoint
    for i, plan in enumerate(plans):
        n_frames = frames_sent[i] if frames_sent is not None else sum(
            1 for e in plan.events if e.kind == "chunk"
        )
        report.streams.append(
            StreamReport(
                stream_id=plan.descriptor.stream_id,
                endpoint=endpoints[i] if endpoints else "",
                served=bool(served[i]),
                frames_sent=n_frames,
                samples_emitted=plan.samples_planned - plan.suppressed_samples,
                markers_emitted=len(plan.markers),
                suppressed_samples=plan.suppressed_samples,
                dropout_windows=plan.windows,
            )
        )
        report.markers.extend(plan.markers)


def simulate_device(
    profile: str = "galea-beta",
    faults: FaultSpec = FaultSpec(),
    duration_s: float = 60.0,
    endpoint: str = "127.0.0.1:9000",
    paced: bool = True,
    descriptors: Optional[Sequence[StreamDescriptor]] = None,
    chunk_len: Optional[int] = None,
    marker_interval_s: Optional[float] = 1.0,
    accept_timeout_s: float = 15.0,
    report_path: Optional[str] = None,
    on_listening=None,
) -> SimulationReport:
    """Serve one OWP/1 connection per stream and return the exit report.

    Stream i listens at base port + i in descriptor order (the mapping is
    printed by the CLI and recorded in the report). All connected streams
    start from a common time zero once every listener has either accepted
    a peer or timed out. Paced mode sleeps each frame to its schedule
    time; unpaced mode emits as fast as the sockets accept.
    """
    host, _, port_text = endpoint.rpartition(":")
    host = host or "127.0.0.1"
    try:
        base_port = int(port_text)
    except ValueError:
        raise ConfigInvalid(f"endpoint {endpoint!r} is not host:port") from None
    profile, descs = _resolve_profile(profile, descriptors)
    plans = plan_session(descs, faults, duration_s, chunk_len, marker_interval_s)
    report = _new_report(profile, faults, duration_s, paced=paced)

    listeners = []
    try:
        for i in range(len(descs)):
            s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            try:
                s.bind((host, base_port + i))
            except OSError as e:
                s.close()
                raise BindFailure(f"cannot bind {host}:{base_port + i}: {e}") from e
            s.listen(1)
            s.settimeout(accept_timeout_s)
            listeners.append(s)
    except BindFailure:
        for s in listeners:
            s.close()
        raise
    if on_listening is not None:
        on_listening([f"{host}:{base_port + i}" for i in range(len(descs))])

    conns: list[Optional[socket.socket]] = [None] * len(descs)

    def accept_one(i: int) -> None:
        try:
            conn, _ = listeners[i].accept()
        except (socket.timeout, OSError):
            return
        try:
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn.settimeout(accept_timeout_s)
            owp.send_handshake(conn, descs[i])
            owp.read_handshake_reply(conn)
        except Exception:
            conn.close()
            return
        conns[i] = conn

    accept_threads = [threading.Thread(target=accept_one, args=(i,)) for i in range(len(descs))]
    for t in accept_threads:
        t.start()
    for t in accept_threads:
        t.join()
    for s in listeners:
        s.close()

    encoded = [_frame_bytes(p) for p in plans]
    frames_sent = [0] * len(descs)
    t0 = time.perf_counter()
    report.t0_wall_ns = time.time_ns()

    def serve(i: int) -> None:
        conn = conns[i]
        if conn is None:
            return
        conn.settimeout(None)
        try:
            for ev, frame in zip(plans[i].events, encoded[i]):
                if paced:
                    sleep_until(t0 + ev.sched_ns / 1e9)
                conn.sendall(frame)
                if ev.kind == "chunk":
                    frames_sent[i] += 1
        except OSError:
            pass  # receiver left; report reflects frames actually sent
        finally:
            try:
                conn.shutdown(socket.SHUT_WR)
            except OSError:
                pass
            conn.close()

    serve_threads = [threading.Thread(target=serve, args=(i,)) for i in range(len(descs))]
    for t in serve_threads:
        t.start()
    for t in serve_threads:
        t.join()

    _fill_report(
        report,
        plans,
        served=[c is not None for c in conns],
        base_endpoint=f"{host}:{base_port}",
        frames_sent=frames_sent,
        endpoints=[f"{host}:{base_port + i}" for i in range(len(descs))],
    )
    if report_path:
        report.save(report_path)
    return report
