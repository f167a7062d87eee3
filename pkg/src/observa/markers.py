"""Interaction-primitive markers: line protocol, task scripts, harness.

The line protocol is UTF-8 newline-delimited JSON objects
{kind, label, payload, device_ts_ns?, host_ts_ns?} that any external
process (a game hook, a pipe writer) can speak. The scripted task harness
is the deterministic in-repo stand-in for a real game adapter: it replays
a schedule of primitives against a marker sink, either in real time or
unpaced with synthesized timestamps.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

from .errors import ParseError, PolicyViolation, SinkFailure, ValidationError
from .pacing import sleep_until
from .model import (
    DEFAULT_DENY_TERMS,
    EventMarker,
    InteractionPrimitive,
    PrimitiveKind,
    Timestamp,
    check_payload_policy,
    device_ts,
    host_ts,
)

MarkerSink = Callable[[EventMarker], None]

_KIND_BY_VALUE = {k.value: k for k in PrimitiveKind}


def parse_marker_line(
    text: str,
    marker_id: int = 0,
    source: str = "pipe",
    deny_terms: Sequence[str] = DEFAULT_DENY_TERMS,
    now_ns: Optional[int] = None,
) -> EventMarker:
    """Parse one marker line into an EventMarker.

    host_ts is stamped at parse time unless the line carries host_ts_ns.
    Raises ParseError for malformed lines and PolicyViolation when the
    payload contains an interpretative key.
    """
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"marker line is not valid JSON: {e}") from e
    if not isinstance(obj, dict):
        raise ParseError(f"marker line must be a JSON object, got {type(obj).__name__}")
    kind_value = obj.get("kind")
    kind = _KIND_BY_VALUE.get(kind_value)
    if kind is None:
        raise ParseError(
            f"unknown primitive kind {kind_value!r}; expected one of {sorted(_KIND_BY_VALUE)}"
        )
    label = obj.get("label")
    if not isinstance(label, str):
        raise ParseError("marker line needs a string 'label'")
    payload = obj.get("payload", {})
    if not isinstance(payload, dict):
        raise ParseError("'payload' must be a flat JSON object")
    for k, v in payload.items():
        if isinstance(v, (dict, list)):
            raise ParseError(f"payload must be flat; key {k!r} holds a nested value")
    denied = check_payload_policy(payload, deny_terms)
    if denied:
        raise PolicyViolation(f"payload keys {denied} match the interpretative-term deny list")

    dev = obj.get("device_ts_ns")
    if dev is not None and not isinstance(dev, int):
        raise ParseError("'device_ts_ns' must be an integer")
    host_ns = obj.get("host_ts_ns")
    if host_ns is not None and not isinstance(host_ns, int):
        raise ParseError("'host_ts_ns' must be an integer")
    if host_ns is None:
        host_ns = now_ns if now_ns is not None else time.time_ns()
    return EventMarker(
        marker_id=marker_id,
        primitive=InteractionPrimitive(kind=kind, label=label, payload=payload),
        host_ts=host_ts(host_ns),
        device_ts=device_ts(dev) if dev is not None else None,
        source=source,
    )


def marker_to_line(marker: EventMarker, include_host_ts: bool = True) -> str:
    """Serialize a marker back to the line protocol (inverse of parsing)."""
    obj = {
        "kind": marker.primitive.kind.value,
        "label": marker.primitive.label,
        "payload": dict(marker.primitive.payload),
    }
    if marker.device_ts is not None:
        obj["device_ts_ns"] = marker.device_ts.ticks
    if include_host_ts:
        obj["host_ts_ns"] = marker.host_ts.ticks
    return json.dumps(obj, separators=(",", ":"), sort_keys=True)


@dataclass(frozen=True)
class TaskScript:
    """A schedule of interaction primitives over a fixed task duration."""

    events: tuple[tuple[float, InteractionPrimitive], ...]
    total_duration_s: float

    def __post_init__(self):
        last = 0.0
        for at_s, primitive in self.events:
            if at_s < last:
                raise ValidationError(f"script times must be nondecreasing; {at_s} after {last}")
            if not 0.0 <= at_s <= self.total_duration_s:
                raise ValidationError(
                    f"event at {at_s}s lies outside [0, {self.total_duration_s}]s"
                )
            last = at_s

    def __len__(self) -> int:
        return len(self.events)


def load_task_script(path: str, deny_terms: Sequence[str] = DEFAULT_DENY_TERMS) -> TaskScript:
    """Load and validate a JSON task script.

    Format: {"total_duration_s": s, "events": [{"at_s", "kind", "label",
    "payload"?}, ...]}. Raises ParseError for malformed files and
    ValidationError for schedule violations.
    """
    try:
        with open(path) as f:
            doc = json.load(f)
    except OSError as e:
        raise ParseError(f"cannot read task script {path!r}: {e}") from e
    except json.JSONDecodeError as e:
        raise ParseError(f"task script {path!r} is not valid JSON: {e}") from e
    if not isinstance(doc, dict) or "total_duration_s" not in doc or "events" not in doc:
        raise ParseError("task script needs 'total_duration_s' and 'events'")
    events = []
    for i, entry in enumerate(doc["events"]):
        kind = _KIND_BY_VALUE.get(entry.get("kind"))
        if kind is None:
            raise ParseError(f"event {i}: unknown kind {entry.get('kind')!r}")
        if "at_s" not in entry or not isinstance(entry["at_s"], (int, float)):
            raise ParseError(f"event {i}: needs a numeric 'at_s'")
        label = entry.get("label")
        if not isinstance(label, str):
            raise ParseError(f"event {i}: needs a string 'label'")
        payload = entry.get("payload", {})
        denied = check_payload_policy(payload, deny_terms)
        if denied:
            raise PolicyViolation(f"event {i}: payload keys {denied} are denied by policy")
        events.append((float(entry["at_s"]), InteractionPrimitive(kind, label, payload)))
    return TaskScript(events=tuple(events), total_duration_s=float(doc["total_duration_s"]))


def run_task_harness(
    script: TaskScript,
    sink: MarkerSink,
    pacing: str = "unpaced",
    source: str = "task-harness",
    start_host_ts: Optional[Timestamp] = None,
    first_marker_id: int = 0,
) -> int:
    """Emit every scripted primitive into *sink*; returns the emitted count.

    pacing="realtime" sleeps to each event's schedule time and stamps the
    actual emission time; pacing="unpaced" emits immediately with host
    timestamps synthesized exactly from the schedule. Marker ids are dense
    and strictly increasing. Sink exceptions surface as SinkFailure.
    """
    if pacing not in ("realtime", "unpaced"):
        raise ValueError(f"pacing must be 'realtime' or 'unpaced', got {pacing!r}")
    start_ns = start_host_ts.ticks if start_host_ts is not None else time.time_ns()
    t0 = time.perf_counter()
    emitted = 0
    for i, (at_s, primitive) in enumerate(script.events):
        if pacing == "realtime":
            sleep_until(t0 + at_s)
            stamp = time.time_ns()
        else:
            stamp = start_ns + round(at_s * 1e9)
        marker = EventMarker(
            marker_id=first_marker_id + i,
            primitive=primitive,
            host_ts=host_ts(stamp),
            source=source,
        )
        try:
            sink(marker)
        except Exception as e:
            raise SinkFailure(f"marker sink failed at event {i}: {e}") from e
        emitted += 1
    return emitted


def check_marker_ids(markers: Sequence[EventMarker]) -> list[str]:
    """Post-session check: per-source marker ids strictly increasing and dense."""
    by_source: dict[str, list[int]] = {}
    for m in markers:
        by_source.setdefault(m.source, []).append(m.marker_id)
    problems = []
    for source, ids in by_source.items():
        for prev, cur in zip(ids, ids[1:]):
            if cur <= prev:
                problems.append(f"source {source!r}: id {cur} not above {prev}")
            elif cur != prev + 1:
                problems.append(f"source {source!r}: hole between ids {prev} and {cur}")
    return problems
