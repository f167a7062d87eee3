"""OSF1 — the durable single-file session container.

Layout (all integers little-endian):

    magic "OSF1" | u16 version
    record*                     one per manifest/chunk/marker, append order
    footer: u64 manifest_offset | magic "OSFE"

Each record is: u8 record_type | u32 length | payload | u32 crc32c, where
the CRC covers record_type, length and payload so that a flip of any byte
of the record is detectable. Record types: 0x01 chunk, 0x02 marker,
0x03 manifest (JSON). A provisional manifest record directly follows the
header so a crash-interrupted session can still be decoded; finalize
appends the authoritative manifest (with the chunk index, per-stream
CRC-32C rollups and a whole-file SHA-256 over every byte before it) and
the footer, making the session readable by default.

One writer, exclusive; any number of concurrent readers of a finalized
session. No compression: the full six-stream profile produces ~25 KB/s.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import time
import uuid
from typing import BinaryIO, Iterator, Mapping, Optional, Sequence, Union

import numpy as np

from .checksums import crc32c
from .errors import (
    CorruptSession,
    IoFailure,
    PolicyViolation,
    SequenceRegression,
    UnknownStream,
    ValidationError,
)
from .model import (
    METADATA_DENY_TERMS,
    Chunk,
    ChunkIndexEntry,
    EventMarker,
    InteractionPrimitive,
    PrimitiveKind,
    SessionManifest,
    StreamDescriptor,
    Timestamp,
    device_ts,
    find_denied_keys,
    host_ts,
)

MAGIC = b"OSF1"
FOOTER_MAGIC = b"OSFE"
VERSION = 1

REC_CHUNK = 0x01
REC_MARKER = 0x02
REC_MANIFEST = 0x03

_HEADER = struct.Struct("<4sH")
_REC_HEAD = struct.Struct("<BI")
_FOOTER = struct.Struct("<Q4s")
_CHUNK_FIXED = struct.Struct("<HQqqIIB")  # stream_idx, seq, dev_ts, host_ts, period, n, flags
_MARKER_FIXED = struct.Struct("<QBqq")  # marker_id, flags, device_ts, host_ts
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")

HEADER_SIZE = _HEADER.size
FOOTER_SIZE = _FOOTER.size

FLUSH_EVERY_CHUNKS = 64
FLUSH_INTERVAL_S = 0.25

_KIND_VALUES = {k.value for k in PrimitiveKind}


def encode_record(rtype: int, payload: bytes) -> bytes:
    head = _REC_HEAD.pack(rtype, len(payload))
    return head + payload + _U32.pack(crc32c(payload, crc32c(head)))


def encode_chunk_payload(stream_index: int, chunk: Chunk) -> bytes:
    flags = 1 if chunk.per_sample_device_ts is not None else 0
    parts = [
        _CHUNK_FIXED.pack(
            stream_index,
            chunk.sequence_number,
            chunk.first_device_ts.ticks,
            chunk.host_receipt_ts.ticks,
            chunk.sample_period_ns,
            chunk.n_samples,
            flags,
        )
    ]
    if flags & 1:
        parts.append(chunk.per_sample_device_ts.astype("<i8").tobytes())
    parts.append(np.ascontiguousarray(chunk.samples).tobytes())
    return b"".join(parts)


def decode_chunk_payload(payload: bytes, descriptors: Sequence[StreamDescriptor]) -> Chunk:
    stream_idx, seq, dev_ns, host_ns, period, n, flags = _CHUNK_FIXED.unpack_from(payload, 0)
    if stream_idx >= len(descriptors):
        raise CorruptSession(f"chunk record references unknown stream index {stream_idx}")
    desc = descriptors[stream_idx]
    pos = _CHUNK_FIXED.size
    per_sample = None
    if flags & 1:
        per_sample = np.frombuffer(payload, dtype="<i8", count=n, offset=pos)
        pos += 8 * n
    expected = n * desc.n_channels * desc.dtype.itemsize
    if len(payload) - pos != expected:
        raise CorruptSession(
            f"chunk payload length mismatch on {desc.stream_id!r} seq {seq}: "
            f"{len(payload) - pos} sample bytes, expected {expected}"
        )
    samples = np.frombuffer(payload, dtype=desc.dtype, count=n * desc.n_channels, offset=pos)
    return Chunk(
        stream_id=desc.stream_id,
        first_device_ts=device_ts(dev_ns),
        sample_period_ns=period,
        host_receipt_ts=host_ts(host_ns),
        samples=samples.reshape(n, desc.n_channels),
        sequence_number=seq,
        per_sample_device_ts=per_sample,
    )


def encode_marker_payload(marker: EventMarker) -> bytes:
    flags = 1 if marker.device_ts is not None else 0
    source = marker.source.encode()
    body = json.dumps(
        {
            "kind": marker.primitive.kind.value,
            "label": marker.primitive.label,
            "payload": dict(marker.primitive.payload),
        },
        separators=(",", ":"),
        sort_keys=True,
    ).encode()
    return (
        _MARKER_FIXED.pack(
            marker.marker_id,
            flags,
            marker.device_ts.ticks if marker.device_ts is not None else 0,
            marker.host_ts.ticks,
        )
        + _U16.pack(len(source))
        + source
        + _U32.pack(len(body))
        + body
    )


def decode_marker_payload(payload: bytes) -> EventMarker:
    marker_id, flags, dev_ns, host_ns = _MARKER_FIXED.unpack_from(payload, 0)
    pos = _MARKER_FIXED.size
    (source_len,) = _U16.unpack_from(payload, pos)
    pos += _U16.size
    source = payload[pos : pos + source_len].decode()
    pos += source_len
    (body_len,) = _U32.unpack_from(payload, pos)
    pos += _U32.size
    try:
        body = json.loads(payload[pos : pos + body_len].decode())
        kind = body["kind"]
        if kind not in _KIND_VALUES:
            raise CorruptSession(f"marker record carries unknown kind {kind!r}")
        primitive = InteractionPrimitive(
            kind=PrimitiveKind(kind), label=body["label"], payload=body.get("payload") or {}
        )
    except (KeyError, ValueError, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptSession(f"undecodable marker record: {e}") from e
    return EventMarker(
        marker_id=marker_id,
        primitive=primitive,
        host_ts=host_ts(host_ns),
        device_ts=device_ts(dev_ns) if flags & 1 else None,
        source=source,
    )


def read_record(f: BinaryIO, offset: int) -> tuple[int, bytes, bool, int]:
    """Read one record at *offset*.

    Returns (record_type, payload, crc_ok, end_offset). Raises
    CorruptSession when the file ends inside the record.
    """
    f.seek(offset)
    head = f.read(_REC_HEAD.size)
    if len(head) < _REC_HEAD.size:
        raise CorruptSession(f"truncated record header at offset {offset}")
    rtype, length = _REC_HEAD.unpack(head)
    body = f.read(length + _U32.size)
    if len(body) < length + _U32.size:
        raise CorruptSession(f"truncated record body at offset {offset}")
    payload, crc_bytes = body[:length], body[length:]
    (stored,) = _U32.unpack(crc_bytes)
    ok = crc32c(payload, crc32c(head)) == stored
    return rtype, payload, ok, offset + _REC_HEAD.size + length + _U32.size


def read_header(f: BinaryIO) -> None:
    f.seek(0)
    head = f.read(HEADER_SIZE)
    if len(head) < HEADER_SIZE:
        raise CorruptSession("file too short for a session header")
    magic, version = _HEADER.unpack(head)
    if magic != MAGIC:
        raise CorruptSession(f"bad magic {magic!r}, not a session file")
    if version != VERSION:
        raise CorruptSession(f"unsupported container version {version}")


def read_footer(f: BinaryIO) -> int:
    """Return the manifest offset from the footer, or raise CorruptSession."""
    f.seek(0, io.SEEK_END)
    size = f.tell()
    if size < HEADER_SIZE + FOOTER_SIZE:
        raise CorruptSession("file too short to be finalized")
    f.seek(size - FOOTER_SIZE)
    manifest_offset, magic = _FOOTER.unpack(f.read(FOOTER_SIZE))
    if magic != FOOTER_MAGIC:
        raise CorruptSession("missing footer: session was not finalized")
    if not HEADER_SIZE <= manifest_offset < size - FOOTER_SIZE:
        raise CorruptSession(f"footer manifest offset {manifest_offset} out of bounds")
    return manifest_offset


def _manifest_from_dict(raw: Mapping) -> SessionManifest:
    descriptors = tuple(StreamDescriptor.from_dict(d) for d in raw["descriptors"])
    index = {
        sid: tuple(ChunkIndexEntry(*entry) for entry in entries)
        for sid, entries in raw.get("chunk_index", {}).items()
    }
    return SessionManifest(
        session_id=raw["session_id"],
        created_host_ts=host_ts(raw["created_host_ts_ns"]),
        descriptors=descriptors,
        marker_sources=tuple(raw.get("marker_sources", ())),
        chunk_index=index,
        stream_crc32c=dict(raw.get("stream_crc32c", {})),
        file_sha256=raw.get("file_sha256", ""),
        metadata=dict(raw.get("metadata", {})),
        marker_count=raw.get("marker_count", 0),
    )


class SessionWriter:
    """Appends chunks and markers to a session file; finalizes exactly once."""

    def __init__(
        self,
        path: str,
        descriptors: Sequence[StreamDescriptor],
        marker_sources: Sequence[str],
        metadata: Mapping[str, str],
        session_id: Optional[str] = None,
        flush_every: int = FLUSH_EVERY_CHUNKS,
        flush_interval_s: float = FLUSH_INTERVAL_S,
    ):
        bad = find_denied_keys(metadata, METADATA_DENY_TERMS)
        if bad:
            raise PolicyViolation(
                f"metadata keys {bad} are participant-identifying and refused by policy"
            )
        self.path = path
        self.session_id = session_id or f"ses-{uuid.uuid4().hex[:12]}"
        self.descriptors = tuple(descriptors)
        self.marker_sources = tuple(marker_sources)
        self.metadata = dict(metadata)
        self.created_host_ts_ns = time.time_ns()
        self._index: dict[str, list[list[int]]] = {d.stream_id: [] for d in self.descriptors}
        self._marker_index: list[int] = []
        self._stream_crc: dict[str, int] = {d.stream_id: 0 for d in self.descriptors}
        self._stream_pos = {d.stream_id: i for i, d in enumerate(self.descriptors)}
        self._last_seq: dict[str, Optional[int]] = {d.stream_id: None for d in self.descriptors}
        self._offset = 0
        self._pending: list[bytes] = []
        self._appends_since_flush = 0
        self._last_flush = time.monotonic()
        self._flush_every = max(1, flush_every)
        self._flush_interval = flush_interval_s
        self.finalized = False
        self._closed = False
        if len({d.stream_id for d in self.descriptors}) != len(self.descriptors):
            raise ValidationError("duplicate stream_id in descriptor list")
        try:
            self._file = open(path, "wb")
        except OSError as e:
            raise IoFailure(f"cannot create session at {path!r}: {e}") from e
        self._write(_HEADER.pack(MAGIC, VERSION))
        self._write(encode_record(REC_MANIFEST, self._manifest_bytes(final=False)))
        self._flush()

    # -- low level ---------------------------------------------------------

    def _write(self, data: bytes) -> int:
        """Queue bytes; returns the file offset they will occupy."""
        at = self._offset
        self._pending.append(data)
        self._offset += len(data)
        return at

    def _flush(self) -> None:
        if self._pending:
            try:
                self._file.write(b"".join(self._pending))
                self._file.flush()
            except OSError as e:
                raise IoFailure(f"write to {self.path!r} failed: {e}") from e
            self._pending.clear()
        self._appends_since_flush = 0
        self._last_flush = time.monotonic()

    def _maybe_flush(self) -> None:
        self._appends_since_flush += 1
        if (
            self._appends_since_flush >= self._flush_every
            or time.monotonic() - self._last_flush >= self._flush_interval
        ):
            self._flush()

    def _manifest_bytes(self, final: bool, file_sha256: str = "") -> bytes:
        doc = {
            "session_id": self.session_id,
            "created_host_ts_ns": self.created_host_ts_ns,
            "finalized": final,
            "descriptors": [d.to_dict() for d in self.descriptors],
            "marker_sources": list(self.marker_sources),
            "metadata": self.metadata,
        }
        if final:
            doc["chunk_index"] = self._index
            doc["marker_index"] = self._marker_index
            doc["marker_count"] = len(self._marker_index)
            doc["stream_crc32c"] = self._stream_crc
            doc["file_sha256"] = file_sha256
        return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()

    # -- public API ----------------------------------------------------------

    def append_chunk(self, chunk: Chunk) -> int:
        """Write one chunk record; returns its file offset."""
        if self.finalized or self._closed:
            raise IoFailure("writer is closed")
        pos = self._stream_pos.get(chunk.stream_id)
        if pos is None:
            raise UnknownStream(f"stream {chunk.stream_id!r} not declared in this session")
        desc = self.descriptors[pos]
        if chunk.n_channels != desc.n_channels:
            raise ValidationError(
                f"chunk for {chunk.stream_id!r} has {chunk.n_channels} channels, "
                f"descriptor declares {desc.n_channels}"
            )
        if chunk.samples.dtype != desc.dtype:
            raise ValidationError(
                f"chunk dtype {chunk.samples.dtype} does not match descriptor "
                f"encoding {desc.value_encoding}"
            )
        last = self._last_seq[chunk.stream_id]
        if last is not None and chunk.sequence_number <= last:
            raise SequenceRegression(
                f"stream {chunk.stream_id!r}: sequence {chunk.sequence_number} "
                f"not above last written {last}"
            )
        payload = encode_chunk_payload(pos, chunk)
        offset = self._write(encode_record(REC_CHUNK, payload))
        self._index[chunk.stream_id].append(
            [offset, chunk.sequence_number, chunk.first_device_ts.ticks, chunk.n_samples]
        )
        self._stream_crc[chunk.stream_id] = crc32c(payload, self._stream_crc[chunk.stream_id])
        self._last_seq[chunk.stream_id] = chunk.sequence_number
        self._maybe_flush()
        return offset

    def append_marker(self, marker: EventMarker) -> int:
        if self.finalized or self._closed:
            raise IoFailure("writer is closed")
        offset = self._write(encode_record(REC_MARKER, encode_marker_payload(marker)))
        self._marker_index.append(offset)
        self._maybe_flush()
        return offset

    def finalize(self) -> SessionManifest:
        """Write the authoritative manifest and footer; close the writer."""
        if self.finalized:
            raise IoFailure("session already finalized (finalize is single-shot)")
        if self._closed:
            raise IoFailure("writer is closed")
        self._flush()
        # Digest the bytes actually on disk, not what we believe we wrote:
        # the whole-file SHA-256 covers [0, manifest_offset). The manifest
        # and footer are protected by their record CRC and magic instead.
        sha = hashlib.sha256()
        try:
            with open(self.path, "rb") as rf:
                while block := rf.read(1 << 20):
                    sha.update(block)
        except OSError as e:
            raise IoFailure(f"finalize of {self.path!r} failed: {e}") from e
        manifest_payload = self._manifest_bytes(final=True, file_sha256=sha.hexdigest())
        manifest_offset = self._offset
        self._pending.append(encode_record(REC_MANIFEST, manifest_payload))
        self._pending.append(_FOOTER.pack(manifest_offset, FOOTER_MAGIC))
        try:
            self._file.write(b"".join(self._pending))
            self._pending.clear()
            self._file.flush()
            os.fsync(self._file.fileno())
            self._file.close()
        except OSError as e:
            raise IoFailure(f"finalize of {self.path!r} failed: {e}") from e
        self.finalized = True
        self._closed = True
        return _manifest_from_dict(json.loads(manifest_payload.decode()))

    def close(self) -> None:
        """Close without finalizing, leaving a recoverable session."""
        if not self._closed:
            self._flush()
            self._file.close()
            self._closed = True

    def __enter__(self) -> "SessionWriter":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if not self._closed:
            self.close()


def create_session(
    descriptors: Sequence[StreamDescriptor],
    marker_sources: Sequence[str],
    metadata: Mapping[str, str],
    path: str,
    **kwargs,
) -> SessionWriter:
    """Create the on-disk session skeleton and return an open writer."""
    return SessionWriter(path, descriptors, marker_sources, metadata, **kwargs)


class SessionReader:
    """Random-access reader over a finalized (or recovered) session."""

    def __init__(self, path: Union[str, BinaryIO], recover: bool = False):
        self.path = path if isinstance(path, str) else getattr(path, "name", "<memory>")
        if isinstance(path, str):
            try:
                self._file = open(path, "rb")
            except OSError as e:
                raise IoFailure(f"cannot open session {path!r}: {e}") from e
        else:
            self._file = path
        self.recovered = False
        try:
            read_header(self._file)
            if recover:
                self._open_recovering()
            else:
                self._open_finalized()
        except Exception:
            self._file.close()
            raise

    def _open_finalized(self) -> None:
        manifest_offset = read_footer(self._file)
        rtype, payload, ok, _ = read_record(self._file, manifest_offset)
        if rtype != REC_MANIFEST or not ok:
            raise CorruptSession("manifest record is damaged")
        raw = json.loads(payload.decode())
        if not raw.get("finalized"):
            raise CorruptSession("footer points at a non-final manifest")
        self._raw_manifest = raw
        self.manifest = _manifest_from_dict(raw)

    def _open_recovering(self) -> None:
        """Salvage a crashed session: walk records up to the first damage."""
        self.recovered = True
        f = self._file
        f.seek(0, io.SEEK_END)
        size = f.tell()
        offset = HEADER_SIZE
        provisional: Optional[dict] = None
        index: dict[str, list[list[int]]] = {}
        markers: list[int] = []
        crcs: dict[str, int] = {}
        while offset < size:
            try:
                rtype, payload, ok, end = read_record(f, offset)
            except CorruptSession:
                break
            if not ok:
                break
            if rtype == REC_MANIFEST:
                provisional = json.loads(payload.decode())
            elif rtype == REC_CHUNK:
                if provisional is None:
                    raise CorruptSession("no manifest before data records; cannot recover")
                descs = [StreamDescriptor.from_dict(d) for d in provisional["descriptors"]]
                chunk = decode_chunk_payload(payload, descs)
                index.setdefault(chunk.stream_id, []).append(
                    [offset, chunk.sequence_number, chunk.first_device_ts.ticks, chunk.n_samples]
                )
                crcs[chunk.stream_id] = crc32c(payload, crcs.get(chunk.stream_id, 0))
            elif rtype == REC_MARKER:
                markers.append(offset)
            offset = end
        if provisional is None:
            raise CorruptSession("no readable manifest; cannot recover")
        raw = dict(provisional)
        raw["chunk_index"] = index
        raw["marker_index"] = markers
        raw["marker_count"] = len(markers)
        raw["stream_crc32c"] = crcs
        self._raw_manifest = raw
        self.manifest = _manifest_from_dict(raw)

    # -- queries -------------------------------------------------------------

    @property
    def descriptors(self) -> tuple[StreamDescriptor, ...]:
        return self.manifest.descriptors

    def descriptor_for(self, stream_id: str) -> StreamDescriptor:
        try:
            return self.manifest.descriptor_for(stream_id)
        except KeyError:
            raise UnknownStream(f"stream {stream_id!r} not in session") from None

    def read_chunks(
        self, stream_id: str, seq_range: Optional[tuple[int, int]] = None
    ) -> Iterator[Chunk]:
        """Chunks of one stream in sequence order, optionally seq in [lo, hi)."""
        self.descriptor_for(stream_id)
        entries = self.manifest.chunk_index.get(stream_id, ())
        for entry in entries:
            if seq_range is not None and not seq_range[0] <= entry.sequence_number < seq_range[1]:
                continue
            rtype, payload, ok, _ = read_record(self._file, entry.offset)
            if rtype != REC_CHUNK or not ok:
                raise CorruptSession(
                    f"chunk record at offset {entry.offset} (stream {stream_id!r}, "
                    f"seq {entry.sequence_number}) is damaged"
                )
            yield decode_chunk_payload(payload, self.descriptors)

    def read_markers(self) -> list[EventMarker]:
        markers = []
        for offset in self._raw_manifest.get("marker_index", ()):
            rtype, payload, ok, _ = read_record(self._file, offset)
            if rtype != REC_MARKER or not ok:
                raise CorruptSession(f"marker record at offset {offset} is damaged")
            markers.append(decode_marker_payload(payload))
        return markers

    def close(self) -> None:
        self._file.close()

    def __enter__(self) -> "SessionReader":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close()


def open_session(path: Union[str, BinaryIO], recover: bool = False) -> SessionReader:
    """Open a finalized session; recover=True salvages an unfinalized one."""
    return SessionReader(path, recover=recover)


def export_csv(
    reader: SessionReader,
    stream_id: str,
    out_path: str,
    clock: str = "device",
    mapping=None,
) -> int:
    """Write one stream as RFC-4180 CSV; returns the number of sample rows.

    Header is timestamp_ns,<channel labels>. clock="host" maps every device
    timestamp through the supplied ClockMapping.
    """
    import csv

    from .timebase import map_to_host_array

    desc = reader.descriptor_for(stream_id)
    if clock not in ("device", "host"):
        raise ValueError(f"clock must be 'device' or 'host', got {clock!r}")
    if clock == "host" and mapping is None:
        raise ValueError("a ClockMapping is required for host-clock export")
    rows = 0
    with open(out_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["timestamp_ns", *desc.channel_labels])
        for chunk in reader.read_chunks(stream_id):
            ts = chunk.device_ts_array()
            if clock == "host":
                ts = map_to_host_array(mapping, ts)
            for t, row in zip(ts.tolist(), chunk.samples.tolist()):
                w.writerow([t, *row])
                rows += 1
    return rows


def export_markers_csv(
    reader: SessionReader,
    out_path: str,
    stream_id: Optional[str] = None,
    mapping=None,
) -> int:
    """Write session markers as CSV; returns the number of marker rows.

    When a stream and its ClockMapping are supplied, each marker also gets
    its aligned sample_index and fractional_offset on that stream.
    """
    import csv

    from .errors import OutOfRange
    from .timebase import align_marker

    chunks = desc = None
    if stream_id is not None:
        if mapping is None:
            raise ValueError("aligned marker export needs a ClockMapping")
        desc = reader.descriptor_for(stream_id)
        chunks = list(reader.read_chunks(stream_id))
    rows = 0
    with open(out_path, "w", newline="") as f:
        w = csv.writer(f)
        header = ["marker_id", "source", "kind", "label", "host_ts_ns", "device_ts_ns", "payload_json"]
        if stream_id is not None:
            header += ["sample_index", "fractional_offset"]
        w.writerow(header)
        for m in sorted(reader.read_markers(), key=lambda m: (m.host_ts.ticks, m.source, m.marker_id)):
            row = [
                m.marker_id,
                m.source,
                m.primitive.kind.value,
                m.primitive.label,
                m.host_ts.ticks,
                m.device_ts.ticks if m.device_ts is not None else "",
                json.dumps(dict(m.primitive.payload), sort_keys=True),
            ]
            if stream_id is not None:
                try:
                    aligned = align_marker(m, chunks, desc, mapping)
                    row += [aligned.sample_index, aligned.fractional_offset]
                except OutOfRange:
                    row += ["", ""]
            w.writerow(row)
            rows += 1
    return rows
