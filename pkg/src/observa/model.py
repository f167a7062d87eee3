"""Domain types shared by every observa module.

All types are immutable values after construction and safe to share across
threads. Validation that can meaningfully fail on user data is expressed as
report-returning functions (violations are data, not exceptions); hard
structural contracts (e.g. mixing clock domains) raise immediately.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np


class Modality(enum.Enum):
    """Sensed signal classes plus the framework's own event channel."""

    EEG = "EEG"
    ExG = "ExG"
    EMG = "EMG"
    EOG = "EOG"
    PPG = "PPG"
    IMU = "IMU"
    MAG = "MAG"
    MARKER = "MARKER"


class ClockDomain(enum.Enum):
    DEVICE = "DEVICE"
    HOST = "HOST"


VALUE_ENCODINGS = {
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
    "int32": np.dtype("<i4"),
}


@dataclass(frozen=True, order=False)
class Timestamp:
    """Integer nanoseconds in one clock domain.

    Arithmetic and comparison are defined only between timestamps of the
    same domain; crossing domains requires a ClockMapping.
    """

    ticks: int
    domain: ClockDomain

    def _check_domain(self, other: "Timestamp") -> None:
        if not isinstance(other, Timestamp):
            raise TypeError(f"expected Timestamp, got {type(other).__name__}")
        if other.domain is not self.domain:
            raise ValueError(
                f"clock domain mismatch: {self.domain.value} vs {other.domain.value}; "
                "map through a ClockMapping first"
            )

    def __sub__(self, other: "Timestamp") -> int:
        self._check_domain(other)
        return self.ticks - other.ticks

    def __lt__(self, other: "Timestamp") -> bool:
        self._check_domain(other)
        return self.ticks < other.ticks

    def __le__(self, other: "Timestamp") -> bool:
        self._check_domain(other)
        return self.ticks <= other.ticks

    def __gt__(self, other: "Timestamp") -> bool:
        self._check_domain(other)
        return self.ticks > other.ticks

    def __ge__(self, other: "Timestamp") -> bool:
        self._check_domain(other)
        return self.ticks >= other.ticks

    def offset(self, delta_ns: int) -> "Timestamp":
        return Timestamp(self.ticks + int(delta_ns), self.domain)


def device_ts(ticks: int) -> Timestamp:
    return Timestamp(int(ticks), ClockDomain.DEVICE)


def host_ts(ticks: int) -> Timestamp:
    return Timestamp(int(ticks), ClockDomain.HOST)


def host_now() -> Timestamp:
    return Timestamp(time.time_ns(), ClockDomain.HOST)


@dataclass(frozen=True)
class StreamDescriptor:
    """Identity and physics of one sensor stream.

    MARKER streams carry structured payloads rather than samples: they have
    no channel labels and no nominal rate. Descriptors are plain data and
    deliberately constructible in invalid states; use validate_descriptor
    to obtain a violation report.
    """

    stream_id: str
    modality: Modality
    channel_labels: tuple[str, ...]
    nominal_rate_hz: Optional[float]
    unit: str
    value_encoding: str = "float32"

    def __init__(
        self,
        stream_id: str,
        modality: Modality,
        channel_labels: Sequence[str] = (),
        nominal_rate_hz: Optional[float] = None,
        unit: str = "dimensionless",
        value_encoding: str = "float32",
    ):
        object.__setattr__(self, "stream_id", stream_id)
        object.__setattr__(self, "modality", modality)
        object.__setattr__(self, "channel_labels", tuple(channel_labels))
        object.__setattr__(self, "nominal_rate_hz", nominal_rate_hz)
        object.__setattr__(self, "unit", unit)
        object.__setattr__(self, "value_encoding", value_encoding)

    @property
    def n_channels(self) -> int:
        return len(self.channel_labels)

    @property
    def dtype(self) -> np.dtype:
        return VALUE_ENCODINGS[self.value_encoding]

    @property
    def sample_period_ns(self) -> int:
        if not self.nominal_rate_hz or self.nominal_rate_hz <= 0:
            raise ValueError(f"stream {self.stream_id!r} has no nominal rate")
        return round(1e9 / self.nominal_rate_hz)

    def to_dict(self) -> dict:
        return {
            "stream_id": self.stream_id,
            "modality": self.modality.value,
            "channel_labels": list(self.channel_labels),
            "nominal_rate_hz": self.nominal_rate_hz,
            "unit": self.unit,
            "value_encoding": self.value_encoding,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "StreamDescriptor":
        return cls(
            stream_id=d["stream_id"],
            modality=Modality(d["modality"]),
            channel_labels=tuple(d.get("channel_labels") or ()),
            nominal_rate_hz=d.get("nominal_rate_hz"),
            unit=d.get("unit", "dimensionless"),
            value_encoding=d.get("value_encoding", "float32"),
        )


@dataclass(frozen=True)
class ClockMapping:
    """Affine device->host clock model: host_ns = slope_a * device_ns + intercept_b_ns."""

    slope_a: float
    intercept_b_ns: int
    rms_residual_ns: float = 0.0
    n_points: int = 0

    def __post_init__(self):
        if not self.slope_a > 0:
            raise ValueError(f"clock mapping slope must be positive, got {self.slope_a}")
        if self.rms_residual_ns < 0:
            raise ValueError("rms_residual_ns must be non-negative")


IDENTITY_MAPPING = ClockMapping(slope_a=1.0, intercept_b_ns=0, rms_residual_ns=0.0, n_points=0)


class Chunk:
    """A contiguous block of samples from one stream.

    samples is a read-only row-major [n_samples x n_channels] array in the
    stream's value encoding. Device timestamps are reconstructed from
    first_device_ts + i * sample_period_ns unless per_sample_device_ts is
    present. host_receipt_ts is stamped once per chunk at transport dequeue.
    """

    __slots__ = (
        "stream_id",
        "first_device_ts",
        "sample_period_ns",
        "per_sample_device_ts",
        "host_receipt_ts",
        "samples",
        "sequence_number",
    )

    def __init__(
        self,
        stream_id: str,
        first_device_ts: Timestamp,
        sample_period_ns: int,
        host_receipt_ts: Timestamp,
        samples: np.ndarray,
        sequence_number: int,
        per_sample_device_ts: Optional[np.ndarray] = None,
    ):
        if first_device_ts.domain is not ClockDomain.DEVICE:
            raise ValueError("first_device_ts must be a DEVICE timestamp")
        if host_receipt_ts.domain is not ClockDomain.HOST:
            raise ValueError("host_receipt_ts must be a HOST timestamp")
        if sample_period_ns <= 0:
            raise ValueError("sample_period_ns must be positive")
        if sequence_number < 0:
            raise ValueError("sequence_number must be non-negative")
        samples = np.asarray(samples)
        if samples.ndim != 2:
            raise ValueError(f"samples must be 2-D [n_samples x n_channels], got shape {samples.shape}")
        if samples.flags.writeable:
            samples = samples.copy()
            samples.flags.writeable = False
        if per_sample_device_ts is not None:
            per_sample_device_ts = np.asarray(per_sample_device_ts, dtype=np.int64)
            if len(per_sample_device_ts) != len(samples):
                raise ValueError("per_sample_device_ts length must equal n_samples")
            if len(per_sample_device_ts) > 1 and not np.all(np.diff(per_sample_device_ts) > 0):
                raise ValueError("per_sample_device_ts must be strictly increasing")
            if per_sample_device_ts.flags.writeable:
                per_sample_device_ts = per_sample_device_ts.copy()
                per_sample_device_ts.flags.writeable = False
        self.stream_id = stream_id
        self.first_device_ts = first_device_ts
        self.sample_period_ns = int(sample_period_ns)
        self.per_sample_device_ts = per_sample_device_ts
        self.host_receipt_ts = host_receipt_ts
        self.samples = samples
        self.sequence_number = int(sequence_number)

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def n_channels(self) -> int:
        return self.samples.shape[1]

    def device_ts_array(self) -> np.ndarray:
        """Device timestamps of every sample, as int64 ns."""
        if self.per_sample_device_ts is not None:
            return self.per_sample_device_ts
        base = self.first_device_ts.ticks
        return base + np.arange(self.n_samples, dtype=np.int64) * self.sample_period_ns

    @property
    def last_device_ts(self) -> Timestamp:
        if self.n_samples == 0:
            return self.first_device_ts
        if self.per_sample_device_ts is not None:
            return device_ts(int(self.per_sample_device_ts[-1]))
        return device_ts(self.first_device_ts.ticks + (self.n_samples - 1) * self.sample_period_ns)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Chunk):
            return NotImplemented
        if (
            self.stream_id != other.stream_id
            or self.sequence_number != other.sequence_number
            or self.first_device_ts != other.first_device_ts
            or self.sample_period_ns != other.sample_period_ns
            or self.host_receipt_ts != other.host_receipt_ts
            or self.samples.dtype != other.samples.dtype
            or not np.array_equal(self.samples, other.samples)
        ):
            return False
        a, b = self.per_sample_device_ts, other.per_sample_device_ts
        if (a is None) != (b is None):
            return False
        return a is None or np.array_equal(a, b)

    def __repr__(self) -> str:
        return (
            f"Chunk({self.stream_id!r}, seq={self.sequence_number}, "
            f"n={self.n_samples}x{self.n_channels}, t0={self.first_device_ts.ticks})"
        )


class PrimitiveKind(enum.Enum):
    """Closed taxonomy of neutral interaction descriptors."""

    MOVEMENT_SEQUENCE = "MOVEMENT_SEQUENCE"
    TIMING_EVENT = "TIMING_EVENT"
    TASK_PROGRESSION = "TASK_PROGRESSION"
    ERROR_RECOVERY = "ERROR_RECOVERY"


# Interpretative terms denied in marker payloads. Substring match, case
# insensitive, so e.g. "affect_score" is caught by "affect". Configurable
# per call site but never empty.
DEFAULT_DENY_TERMS = (
    "affect",
    "emotion",
    "stress",
    "engagement",
    "performance",
    "cognitive",
    "diagnosis",
    "state",
)

# Participant-identifying metadata keys refused by the session store.
METADATA_DENY_TERMS = ("name", "dob", "id_number")


def find_denied_keys(payload: Mapping[str, object], terms: Sequence[str]) -> list[str]:
    """Keys of *payload* containing any deny term (case-insensitive substring)."""
    if not terms:
        raise ValueError("deny term list must not be empty")
    lowered = [t.lower() for t in terms]
    bad = []
    for key in payload:
        k = str(key).lower()
        if any(t in k for t in lowered):
            bad.append(str(key))
    return bad


@dataclass(frozen=True)
class InteractionPrimitive:
    """One neutral task-event descriptor: a kind, a label, and a flat payload.

    The payload maps unique string keys to scalars or strings and must not
    carry interpretative fields; enforce with check_payload_policy at every
    boundary that accepts external data.
    """

    kind: PrimitiveKind
    label: str
    payload: Mapping[str, Union[str, int, float, bool]] = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.kind, PrimitiveKind):
            raise ValueError(f"kind must be a PrimitiveKind, got {self.kind!r}")
        for k, v in self.payload.items():
            if not isinstance(k, str):
                raise ValueError(f"payload keys must be strings, got {k!r}")
            if not isinstance(v, (str, int, float, bool)):
                raise ValueError(f"payload values must be scalars or strings, got {v!r} for {k!r}")


def check_payload_policy(
    payload: Mapping[str, object], deny_terms: Sequence[str] = DEFAULT_DENY_TERMS
) -> list[str]:
    """Return the payload keys that violate the interpretative-term policy."""
    return find_denied_keys(payload, deny_terms)


@dataclass(frozen=True)
class EventMarker:
    """One interaction-primitive occurrence anchored on the host timeline."""

    marker_id: int
    primitive: InteractionPrimitive
    host_ts: Timestamp
    device_ts: Optional[Timestamp] = None
    source: str = ""

    def __post_init__(self):
        if self.host_ts.domain is not ClockDomain.HOST:
            raise ValueError("host_ts must be a HOST timestamp")
        if self.device_ts is not None and self.device_ts.domain is not ClockDomain.DEVICE:
            raise ValueError("device_ts must be a DEVICE timestamp")
        if self.marker_id < 0:
            raise ValueError("marker_id must be non-negative")


@dataclass(frozen=True)
class ChunkIndexEntry:
    """Location of one chunk record inside a session file."""

    offset: int
    sequence_number: int
    first_device_ts_ns: int
    n_samples: int


@dataclass(frozen=True)
class SessionManifest:
    """Durable description of a recorded session."""

    session_id: str
    created_host_ts: Timestamp
    descriptors: tuple[StreamDescriptor, ...]
    marker_sources: tuple[str, ...]
    chunk_index: Mapping[str, tuple[ChunkIndexEntry, ...]]
    stream_crc32c: Mapping[str, int]
    file_sha256: str
    metadata: Mapping[str, str]
    marker_count: int = 0

    def descriptor_for(self, stream_id: str) -> StreamDescriptor:
        for d in self.descriptors:
            if d.stream_id == stream_id:
                return d
        raise KeyError(stream_id)


# --- descriptor validation -------------------------------------------------

# Channel-count / rate / label constraints of the "galea-beta" hardware
# profile, one entry per modality the headset exposes. Counts are
# (min, max) inclusive; labels, when fixed, must match exactly in order.
_GALEA_BETA_RULES = {
    Modality.EEG: {
        "rate": 250.0,
        "channels": (10, 10),
        "labels": ("F1", "F2", "C3", "Cz", "C4", "P3", "Pz", "P4", "O1", "O2"),
    },
    Modality.ExG: {"rate": 250.0, "channels": (1, 2), "label_pool": ("Fp1", "Fp2")},
    Modality.EMG: {"rate": 250.0, "channels": (4, 6)},
    Modality.EOG: {"rate": 250.0, "channels": (2, 2)},
    Modality.PPG: {"rate": 250.0, "channels": (2, 2), "labels": ("Red", "IR")},
    Modality.IMU: {"rate": 250.0, "channels": (6, 6)},
    Modality.MAG: {"rate": 25.0, "channels": (3, 3)},
}

PROFILES = ("galea-beta",)


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    violations: tuple[str, ...]

    def __bool__(self) -> bool:
        return self.ok


def validate_descriptor(desc: StreamDescriptor, profile: Optional[str] = None) -> ValidationReport:
    """Check a descriptor's own invariants and, optionally, a hardware profile.

    Pure and deterministic: identical inputs always produce the identical
    report. Violations are returned as data, never raised.
    """
    v: list[str] = []
    if not desc.stream_id:
        v.append("stream_id must be non-empty")
    labels = desc.channel_labels
    if len(set(labels)) != len(labels):
        v.append("channel labels must be unique within a descriptor")
    if desc.modality is Modality.MARKER:
        if labels:
            v.append("MARKER streams carry structured payloads and have no channel labels")
        if desc.nominal_rate_hz is not None:
            v.append("MARKER streams have no nominal rate")
    else:
        if len(labels) < 1:
            v.append("sample streams need at least one channel label")
        if desc.nominal_rate_hz is None or not desc.nominal_rate_hz > 0:
            v.append(f"nominal_rate_hz must be positive, got {desc.nominal_rate_hz}")
    if desc.value_encoding not in VALUE_ENCODINGS:
        v.append(
            f"value_encoding must be one of {sorted(VALUE_ENCODINGS)}, got {desc.value_encoding!r}"
        )

    if profile is not None:
        if profile not in PROFILES:
            v.append(f"unknown profile {profile!r}")
        elif desc.modality is not Modality.MARKER:
            rule = _GALEA_BETA_RULES.get(desc.modality)
            if rule is None:
                v.append(f"modality {desc.modality.value} is not part of profile {profile}")
            else:
                lo, hi = rule["channels"]
                if not lo <= len(labels) <= hi:
                    v.append(
                        f"profile {profile}: {desc.modality.value} expects "
                        f"{lo if lo == hi else f'{lo}-{hi}'} channels, got {len(labels)}"
                    )
                if desc.nominal_rate_hz is not None and abs(desc.nominal_rate_hz - rule["rate"]) > 1e-9:
                    v.append(
                        f"profile {profile}: {desc.modality.value} expects "
                        f"{rule['rate']:g} Hz, got {desc.nominal_rate_hz:g}"
                    )
                if "labels" in rule and labels != rule["labels"]:
                    v.append(f"channel labels mismatch for profile {profile}")
                if "label_pool" in rule and not set(labels) <= set(rule["label_pool"]):
                    v.append(
                        f"profile {profile}: {desc.modality.value} labels must come from "
                        f"{rule['label_pool']}"
                    )
    return ValidationReport(ok=not v, violations=tuple(v))


def galea_beta_descriptors() -> tuple[StreamDescriptor, ...]:
    """Canonical six-stream descriptor set served by the device simulator.

    Order is load-bearing: network endpoints are assigned per stream in this
    order (base port + index).
    """
    return (
        StreamDescriptor(
            "eeg",
            Modality.EEG,
            ("F1", "F2", "C3", "Cz", "C4", "P3", "Pz", "P4", "O1", "O2"),
            250.0,
            "microvolts",
        ),
        StreamDescriptor("emg", Modality.EMG, ("EMG1", "EMG2", "EMG3", "EMG4"), 250.0, "microvolts"),
        StreamDescriptor("eog", Modality.EOG, ("EOG1", "EOG2"), 250.0, "microvolts"),
        StreamDescriptor("ppg", Modality.PPG, ("Red", "IR"), 250.0, "dimensionless"),
        StreamDescriptor(
            "imu",
            Modality.IMU,
            ("ACC_X", "ACC_Y", "ACC_Z", "GYRO_X", "GYRO_Y", "GYRO_Z"),
            250.0,
            "g,degrees/second",
        ),
        StreamDescriptor("mag", Modality.MAG, ("MAG_X", "MAG_Y", "MAG_Z"), 25.0, "microtesla"),
    )
