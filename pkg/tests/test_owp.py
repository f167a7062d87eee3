import socket
import struct
import threading

import numpy as np
import pytest

from observa import owp
from observa.errors import ConnectionFailed, HandshakeMismatch, ParseError
from observa.model import Modality, StreamDescriptor

from conftest import make_descriptor


def test_frame_header_layout():
    frame = owp.encode_chunk_frame(seq=7, first_device_ts_ns=-5, n_samples=2, sample_bytes=b"\x01" * 16)
    assert len(frame) == owp.HEADER_SIZE + 16
    ftype, seq, ts, n, crc = struct.unpack("<BQqII", frame[: owp.HEADER_SIZE])
    assert (ftype, seq, ts, n) == (owp.FRAME_CHUNK, 7, -5, 2)


def test_chunk_frame_round_trip():
    desc = make_descriptor(n_channels=2, encoding="float32")
    samples = np.arange(10, dtype=np.float32).reshape(5, 2)
    frame = owp.encode_chunk_frame(3, 1_000_000, 5, samples.tobytes())
    a, b = socket.socketpair()
    try:
        a.sendall(frame)
        reader = owp.FrameReader(b, desc)
        ftype, seq, ts, n, payload = reader.next_frame()
        assert (ftype, seq, ts, n) == (owp.FRAME_CHUNK, 3, 1_000_000, 5)
        assert np.array_equal(np.frombuffer(payload, dtype=np.float32).reshape(5, 2), samples)
    finally:
        a.close()
        b.close()


def test_marker_and_heartbeat_frames():
    desc = make_descriptor(n_channels=2)
    body = owp.marker_body("TIMING_EVENT", "x", {"k": 1}, device_ts_ns=42)
    a, b = socket.socketpair()
    try:
        a.sendall(owp.encode_heartbeat())
        a.sendall(owp.encode_marker_frame(9, 42, body))
        reader = owp.FrameReader(b, desc)
        assert reader.next_frame()[0] == owp.FRAME_HEARTBEAT
        ftype, seq, ts, n, payload = reader.next_frame()
        assert (ftype, seq, ts) == (owp.FRAME_MARKER, 9, 42)
        assert n == len(body)
        assert payload == body
    finally:
        a.close()
        b.close()


def test_corrupt_payload_crc_detected():
    desc = make_descriptor(n_channels=1)
    samples = np.zeros((4, 1), dtype=np.float32)
    frame = bytearray(owp.encode_chunk_frame(0, 0, 4, samples.tobytes()))
    frame[owp.HEADER_SIZE + 3] ^= 0xFF
    a, b = socket.socketpair()
    try:
        a.sendall(bytes(frame))
        reader = owp.FrameReader(b, desc)
        with pytest.raises(ParseError, match="CRC"):
            reader.next_frame()
    finally:
        a.close()
        b.close()


def test_unknown_frame_type_rejected():
    desc = make_descriptor(n_channels=1)
    a, b = socket.socketpair()
    try:
        a.sendall(owp.encode_frame(0x7F, 0, 0, 0, b""))
        with pytest.raises(ParseError, match="unknown frame type"):
            owp.FrameReader(b, desc).next_frame()
    finally:
        a.close()
        b.close()


def test_handshake_ack_flow():
    desc = make_descriptor()
    a, b = socket.socketpair()
    try:
        owp.send_handshake(a, desc)
        remote = owp.read_handshake(b)
        assert owp.descriptor_mismatches(desc, remote) == []
        owp.send_ack(b)
        owp.read_handshake_reply(a)  # no exception
    finally:
        a.close()
        b.close()


def test_handshake_nak_carries_reason():
    eeg10 = make_descriptor(stream_id="eeg", n_channels=10)
    eeg8 = make_descriptor(stream_id="eeg", n_channels=8)
    a, b = socket.socketpair()
    try:
        owp.send_handshake(a, eeg8)
        remote = owp.read_handshake(b)
        problems = owp.descriptor_mismatches(eeg10, remote)
        assert problems
        owp.send_nak(b, "; ".join(problems))
        b.close()
        with pytest.raises(HandshakeMismatch, match="channel_labels"):
            owp.read_handshake_reply(a)
    finally:
        a.close()


def test_bad_magic_fails_connection():
    desc = make_descriptor()
    a, b = socket.socketpair()
    try:
        a.sendall(b"NOPE" + b"\x00" * 4)
        with pytest.raises(ConnectionFailed, match="magic"):
            owp.read_handshake(b)
    finally:
        a.close()
        b.close()


def test_descriptor_mismatch_fields():
    local = StreamDescriptor("eeg", Modality.EEG, ("a", "b"), 250.0, "uV", "float32")
    remote = {
        "stream_id": "eeg",
        "modality": "EMG",
        "channel_labels": ["a", "b"],
        "nominal_rate_hz": 200.0,
        "value_encoding": "float64",
    }
    problems = owp.descriptor_mismatches(local, remote)
    assert len(problems) == 3  # modality, rate, encoding
