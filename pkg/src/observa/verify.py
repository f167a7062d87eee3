"""Automated session verification: integrity, continuity, temporal alignment.

Everything here is read-only over finalized session files and deterministic:
verifying the same file twice produces byte-identical JSON reports. The
verdict rule is explicit and configurable: FAIL on integrity damage or
completeness below the fail threshold; WARN on any gap, sub-warn-threshold
completeness, or an empty stream; PASS otherwise. Alignment findings never
change the verdict — they are reported for the caller to judge.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field
from typing import BinaryIO, Optional, Union

from .checksums import crc32c
from .errors import CorruptSession, DegenerateInput, IoFailure
from . import store
from .model import ClockMapping
from .timebase import align_marker, detect_gaps, estimate_clock_mapping, Gap

PASS = "PASS"
WARN = "WARN"
FAIL = "FAIL"

_VERDICT_EXIT = {PASS: 0, WARN: 1, FAIL: 2}

WARN_COMPLETENESS = 0.999
FAIL_COMPLETENESS = 0.95


@dataclass
class IntegritySection:
    status: str
    bad_chunks: list[dict] = field(default_factory=list)
    detail: str = ""

    def to_dict(self) -> dict:
        return {"status": self.status, "bad_chunks": self.bad_chunks, "detail": self.detail}


@dataclass
class StreamContinuity:
    stream_id: str
    expected_samples: int
    actual_samples: int
    completeness_ratio: float
    gaps: list[Gap] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "stream_id": self.stream_id,
            "expected_samples": self.expected_samples,
            "actual_samples": self.actual_samples,
            "completeness_ratio": self.completeness_ratio,
            "gaps": [
                {
                    "after_sequence_number": g.after_sequence_number,
                    "expected_next_device_ts_ns": g.expected_next_device_ts.ticks,
                    "observed_next_device_ts_ns": g.observed_next_device_ts.ticks,
                    "missing_sample_estimate": g.missing_sample_estimate,
                }
                for g in self.gaps
            ],
            "notes": self.notes,
        }


@dataclass
class StreamAlignment:
    stream_id: str
    slope_a: Optional[float] = None
    intercept_b_ns: Optional[int] = None
    rms_residual_ns: Optional[float] = None
    n_points: int = 0
    notes: list[str] = field(default_factory=list)
    skew_est_ppm: Optional[float] = None
    offset_est_ms: Optional[float] = None
    skew_err_ppm: Optional[float] = None
    offset_err_ms: Optional[float] = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class AlignmentSection:
    streams: list[StreamAlignment] = field(default_factory=list)
    marker_errors_periods: list[dict] = field(default_factory=list)
    max_marker_error_periods: Optional[float] = None
    markers_within_half_period: Optional[int] = None
    markers_checked: int = 0

    def to_dict(self) -> dict:
        return {
            "streams": [s.to_dict() for s in self.streams],
            "marker_errors_periods": self.marker_errors_periods,
            "max_marker_error_periods": self.max_marker_error_periods,
            "markers_within_half_period": self.markers_within_half_period,
            "markers_checked": self.markers_checked,
        }


@dataclass
class VerificationReport:
    session_id: str
    integrity: IntegritySection
    continuity: dict[str, StreamContinuity]
    alignment: AlignmentSection
    verdict: str

    @property
    def exit_code(self) -> int:
        return _VERDICT_EXIT[self.verdict]

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "integrity": self.integrity.to_dict(),
            "continuity": {sid: c.to_dict() for sid, c in sorted(self.continuity.items())},
            "alignment": self.alignment.to_dict(),
            "verdict": self.verdict,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def one_line(self) -> str:
        completeness = (
            min((c.completeness_ratio for c in self.continuity.values()), default=1.0)
            if self.continuity
            else 1.0
        )
        gaps = sum(len(c.gaps) for c in self.continuity.values())
        return (
            f"{self.verdict} session={self.session_id} integrity={self.integrity.status} "
            f"min_completeness={completeness:.6f} gaps={gaps}"
        )


def _open_file(session: Union[str, BinaryIO]) -> tuple[BinaryIO, bool]:
    if isinstance(session, (str,)):
        try:
            return open(session, "rb"), True
        except OSError as e:
            raise IoFailure(f"cannot open session {session!r}: {e}") from e
    session.seek(0)
    return session, False


def verify_integrity(session: Union[str, BinaryIO]) -> IntegritySection:
    """Walk the whole container and reproduce every stored digest.

    Detection is layered so any single corrupt byte is caught somewhere:
    header magic/version, per-record CRC-32C (covering type, length and
    payload), index/offset coherence, per-stream CRC rollups, and the
    whole-file SHA-256 over everything before the final manifest. A FAIL
    pinpoints the first damaged chunk when the damage lies in one.
    """
    f, owns = _open_file(session)
    try:
        return _verify_integrity_inner(f)
    finally:
        if owns:
            f.close()


def _verify_integrity_inner(f: BinaryIO) -> IntegritySection:
    try:
        store.read_header(f)
    except CorruptSession as e:
        return IntegritySection(FAIL, detail=f"header: {e}")
    try:
        manifest_offset = store.read_footer(f)
    except CorruptSession as e:
        return IntegritySection(FAIL, detail=f"unfinalized or damaged footer: {e}")
    try:
        rtype, payload, ok, _ = store.read_record(f, manifest_offset)
    except CorruptSession as e:
        return IntegritySection(FAIL, detail=f"manifest: {e}")
    if rtype != store.REC_MANIFEST or not ok:
        return IntegritySection(FAIL, detail="manifest record is damaged")
    try:
        manifest = json.loads(payload.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        return IntegritySection(FAIL, detail=f"manifest undecodable: {e}")
    if not manifest.get("finalized"):
        return IntegritySection(FAIL, detail="unfinalized: footer points at provisional manifest")

    chunk_at: dict[int, tuple[str, int]] = {}
    for sid, entries in manifest.get("chunk_index", {}).items():
        for offset, seq, _, _ in entries:
            chunk_at[offset] = (sid, seq)
    marker_at = {off: i for i, off in enumerate(manifest.get("marker_index", []))}

    bad: list[dict] = []
    detail = ""

    def note_bad(offset: int, why: str) -> None:
        entry: dict = {"offset": offset, "why": why}
        if offset in chunk_at:
            sid, seq = chunk_at[offset]
            entry.update({"stream_id": sid, "sequence_number": seq})
        elif offset in marker_at:
            entry["marker_ordinal"] = marker_at[offset]
        bad.append(entry)

    # Sequential walk: every byte in [0, manifest_offset) is covered by the
    # header or exactly one record, so a flip anywhere lands in a check.
    offset = store.HEADER_SIZE
    seen_chunks: dict[str, list[int]] = {}
    rollups: dict[str, int] = {}
    structural = False
    while offset < manifest_offset:
        try:
            rtype, payload, ok, end = store.read_record(f, offset)
        except CorruptSession as e:
            note_bad(offset, f"structure: {e}")
            structural = True
            break
        if end > manifest_offset:
            note_bad(offset, "record overruns the manifest offset")
            structural = True
            break
        if not ok:
            note_bad(offset, "record CRC-32C mismatch")
            offset = end
            continue
        if rtype == store.REC_CHUNK:
            if offset not in chunk_at:
                note_bad(offset, "chunk record missing from the manifest index")
            else:
                sid, seq = chunk_at[offset]
                seen_chunks.setdefault(sid, []).append(seq)
                rollups[sid] = crc32c(payload, rollups.get(sid, 0))
        elif rtype == store.REC_MARKER:
            if offset not in marker_at:
                note_bad(offset, "marker record missing from the manifest index")
        elif rtype != store.REC_MANIFEST:
            note_bad(offset, f"unknown record type 0x{rtype:02X}")
        offset = end

    if not structural:
        for sid, entries in manifest.get("chunk_index", {}).items():
            expected = [e[1] for e in entries]
            if seen_chunks.get(sid, []) != expected:
                detail = detail or f"index of stream {sid!r} disagrees with walked records"
        for sid, crc in manifest.get("stream_crc32c", {}).items():
            if rollups.get(sid, 0) != crc:
                detail = detail or f"stream {sid!r} CRC-32C rollup mismatch"

    sha = hashlib.sha256()
    f.seek(0)
    remaining = manifest_offset
    while remaining > 0:
        block = f.read(min(1 << 20, remaining))
        if not block:
            break
        sha.update(block)
        remaining -= len(block)
    if sha.hexdigest() != manifest.get("file_sha256"):
        detail = detail or "whole-file SHA-256 mismatch"

    if bad or detail:
        return IntegritySection(FAIL, bad_chunks=bad, detail=detail or "damaged records found")
    return IntegritySection(PASS, detail="all digests reproduced")


def verify_continuity(
    reader: store.SessionReader,
    tolerance_factor: float = 1.5,
) -> dict[str, StreamContinuity]:
    """Per-stream expected vs actual sample counts and detected gaps.

    expected_samples = round(nominal_rate * observed device span) + 1; the
    span is measured on the device clock, so a skew of s ppm shifts the
    count by about s * actual. Empty streams get completeness 1.0
    (vacuously) plus a "no data" note.
    """
    out: dict[str, StreamContinuity] = {}
    for desc in reader.descriptors:
        chunks = list(reader.read_chunks(desc.stream_id))
        actual = sum(c.n_samples for c in chunks)
        if actual == 0:
            out[desc.stream_id] = StreamContinuity(
                stream_id=desc.stream_id,
                expected_samples=0,
                actual_samples=0,
                completeness_ratio=1.0,
                notes=["no data"],
            )
            continue
        first = chunks[0].first_device_ts.ticks
        last = chunks[-1].last_device_ts.ticks
        span_ns = last - first
        expected = round(desc.nominal_rate_hz * span_ns / 1e9) + 1
        gaps = detect_gaps(chunks, desc, tolerance_factor)
        out[desc.stream_id] = StreamContinuity(
            stream_id=desc.stream_id,
            expected_samples=expected,
            actual_samples=actual,
            completeness_ratio=min(1.0, actual / expected) if expected else 1.0,
            gaps=gaps,
        )
    return out


def fit_stream_mapping(reader: store.SessionReader, stream_id: str) -> ClockMapping:
    """Fit the device->host mapping of one stream from its chunk index.

    Pairs are (chunk-end device time, host receipt time): a chunk is
    received when its last sample completes, so pairing the receipt stamp
    with the chunk END removes the one-chunk-duration bias that pairing
    with the first sample would bake into the intercept.
    """
    reader.descriptor_for(stream_id)  # UnknownStream early for absent ids
    pairs = []
    for ch in reader.read_chunks(stream_id):
        if ch.n_samples == 0:
            continue
        end_dev = ch.first_device_ts.ticks + ch.n_samples * ch.sample_period_ns
        pairs.append((end_dev, ch.host_receipt_ts.ticks))
    if len(pairs) < 2:
        raise DegenerateInput(
            f"stream {stream_id!r} has {len(pairs)} chunks; need >= 2 to fit a mapping"
        )
    return estimate_clock_mapping(pairs, robust=True)


def verify_alignment(
    reader: store.SessionReader,
    ground_truth: Optional[dict] = None,
) -> AlignmentSection:
    """Fit per-stream clock mappings; with simulator ground truth, also
    score skew/offset recovery and planted-marker round-trip errors in
    sample periods."""
    section = AlignmentSection()
    mappings: dict[str, ClockMapping] = {}
    truth_skew = truth_offset_ms = t0_wall_ns = None
    if ground_truth is not None:
        truth_skew = ground_truth.get("clock_skew_ppm", 0.0)
        truth_offset_ms = ground_truth.get("clock_offset_ms", 0.0)
        t0_wall_ns = ground_truth.get("t0_wall_ns", 0)

    for desc in reader.descriptors:
        sa = StreamAlignment(stream_id=desc.stream_id)
        try:
            mapping = fit_stream_mapping(reader, desc.stream_id)
        except DegenerateInput as e:
            sa.notes.append(str(e))
            section.streams.append(sa)
            continue
        mappings[desc.stream_id] = mapping
        sa.slope_a = mapping.slope_a
        sa.intercept_b_ns = mapping.intercept_b_ns
        sa.rms_residual_ns = mapping.rms_residual_ns
        sa.n_points = mapping.n_points
        # truth: device = (1+s)(host - T0) + o  =>  host = a*device + b with
        # a = 1/(1+s), b = T0 - o*a; invert to estimate s and o.
        sa.skew_est_ppm = (1.0 / mapping.slope_a - 1.0) * 1e6
        if t0_wall_ns is not None:
            sa.offset_est_ms = (t0_wall_ns - mapping.intercept_b_ns) / mapping.slope_a / 1e6
            sa.skew_err_ppm = abs(sa.skew_est_ppm - truth_skew)
            sa.offset_err_ms = abs(sa.offset_est_ms - truth_offset_ms)
        section.streams.append(sa)

    if ground_truth is not None:
        planted = {
            (m["stream_id"], m["marker_id"]): m for m in ground_truth.get("markers", [])
        }
        if planted:
            recorded = reader.read_markers()
            chunks_cache: dict[str, list] = {}
            within = 0
            errors: list[dict] = []
            for m in recorded:
                key = (m.source, m.marker_id)
                truth = planted.get(key)
                if truth is None or m.source not in mappings:
                    continue
                desc = reader.descriptor_for(m.source)
                chunks = chunks_cache.setdefault(m.source, list(reader.read_chunks(m.source)))
                aligned = align_marker(m, chunks, desc, mappings[m.source])
                expected_pos = truth.get("stream_position", truth["sample_index"])
                err = aligned.sample_index + aligned.fractional_offset - expected_pos
                errors.append(
                    {
                        "stream_id": m.source,
                        "marker_id": m.marker_id,
                        "planted_index": expected_pos,
                        "aligned_index": aligned.sample_index,
                        "fractional_offset": aligned.fractional_offset,
                        "error_periods": err,
                    }
                )
                if abs(err) <= 0.5:
                    within += 1
            section.marker_errors_periods = errors
            section.markers_checked = len(errors)
            section.markers_within_half_period = within
            if errors:
                section.max_marker_error_periods = max(abs(e["error_periods"]) for e in errors)
    return section


def verify_session(
    session: Union[str, BinaryIO],
    tolerance_factor: float = 1.5,
    warn_completeness: float = WARN_COMPLETENESS,
    fail_completeness: float = FAIL_COMPLETENESS,
    ground_truth: Optional[dict] = None,
) -> VerificationReport:
    """Full verification: integrity, then continuity and alignment."""
    integrity = verify_integrity(session)
    if integrity.status != PASS:
        return VerificationReport(
            session_id=_best_effort_session_id(session),
            integrity=integrity,
            continuity={},
            alignment=AlignmentSection(),
            verdict=FAIL,
        )
    reader = store.open_session(session)
    try:
        continuity = verify_continuity(reader, tolerance_factor)
        alignment = verify_alignment(reader, ground_truth)
        session_id = reader.manifest.session_id
    finally:
        reader.close()

    verdict = PASS
    for c in continuity.values():
        if c.completeness_ratio < fail_completeness:
            verdict = FAIL
            break
        if c.gaps or c.notes or c.completeness_ratio < warn_completeness:
            verdict = WARN
    return VerificationReport(
        session_id=session_id,
        integrity=integrity,
        continuity=continuity,
        alignment=alignment,
        verdict=verdict,
    )


def _best_effort_session_id(session: Union[str, BinaryIO]) -> str:
    try:
        f, owns = _open_file(session)
    except IoFailure:
        return "<unreadable>"
    try:
        offset = store.HEADER_SIZE
        store.read_header(f)
        rtype, payload, ok, _ = store.read_record(f, offset)
        if rtype == store.REC_MANIFEST and ok:
            return json.loads(payload.decode()).get("session_id", "<unknown>")
    except (CorruptSession, json.JSONDecodeError, UnicodeDecodeError):
        pass
    finally:
        if owns:
            f.close()
    return "<unknown>"
