"""OWP/1 — the framed TCP wire protocol spoken between devices and recorders.

All integers little-endian. One TCP connection carries one stream.

Handshake (sender of data speaks first):
    magic "OWP1" | u32 descriptor-JSON length | descriptor JSON
The descriptor JSON carries stream_id, modality, channel_labels,
nominal_rate_hz and value_encoding. The receiver validates it against its
locally expected descriptor and replies "ACK\\0", or "NAK\\0" followed by a
UTF-8 reason and a close.

Data frames:
    u8 frame_type | u64 sequence_number | i64 first_device_ts_ns
    | u32 n_samples | u32 crc32(payload) | payload
frame_type 0x01 = chunk (payload: samples row-major in the declared
encoding; length is n_samples * n_channels * itemsize), 0x02 = marker
(payload: UTF-8 JSON {kind, label, payload, device_ts_ns?}; n_samples
doubles as the payload byte length), 0x03 = heartbeat (no payload).

Senders emit a heartbeat after 1 s of idling; receivers treat 5 s of
silence as a failed source.
"""

from __future__ import annotations

import json
import socket
import struct
import zlib
from typing import Optional

from .errors import ConnectionFailed, HandshakeMismatch, ParseError
from .model import StreamDescriptor

MAGIC = b"OWP1"
ACK = b"ACK\x00"
NAK = b"NAK\x00"

FRAME_CHUNK = 0x01
FRAME_MARKER = 0x02
FRAME_HEARTBEAT = 0x03

_HEADER = struct.Struct("<BQqII")  # type, seq, first_device_ts_ns, n_samples, crc32
HEADER_SIZE = _HEADER.size
_U32 = struct.Struct("<I")

HEARTBEAT_IDLE_S = 1.0
SILENCE_TIMEOUT_S = 5.0
CONNECT_TIMEOUT_S = 2.0


def recv_exact(sock: socket.socket, n: int) -> bytes:
    """Read exactly n bytes or raise EOFError on a clean shutdown."""
    buf = bytearray()
    while len(buf) < n:
        part = sock.recv(n - len(buf))
        if not part:
            raise EOFError(f"connection closed after {len(buf)}/{n} bytes")
        buf += part
    return bytes(buf)


def handshake_bytes(desc: StreamDescriptor) -> bytes:
    body = json.dumps(
        {
            "stream_id": desc.stream_id,
            "modality": desc.modality.value,
            "channel_labels": list(desc.channel_labels),
            "nominal_rate_hz": desc.nominal_rate_hz,
            "value_encoding": desc.value_encoding,
        },
        separators=(",", ":"),
    ).encode()
    return MAGIC + _U32.pack(len(body)) + body


def send_handshake(sock: socket.socket, desc: StreamDescriptor) -> None:
    sock.sendall(handshake_bytes(desc))


def read_handshake(sock: socket.socket) -> dict:
    """Read and parse the sender's handshake; returns the descriptor fields."""
    magic = recv_exact(sock, 4)
    if magic != MAGIC:
        raise ConnectionFailed(f"bad handshake magic {magic!r}, expected {MAGIC!r}")
    (length,) = _U32.unpack(recv_exact(sock, 4))
    if length > 1 << 20:
        raise ConnectionFailed(f"implausible handshake descriptor length {length}")
    try:
        fields = json.loads(recv_exact(sock, length).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ConnectionFailed(f"undecodable handshake descriptor: {e}") from e
    if not isinstance(fields, dict):
        raise ConnectionFailed("handshake descriptor must be a JSON object")
    return fields


def descriptor_mismatches(local: StreamDescriptor, remote: dict) -> list[str]:
    """Field-by-field comparison of the remote's announced descriptor."""
    problems = []
    if remote.get("stream_id") != local.stream_id:
        problems.append(f"stream_id {remote.get('stream_id')!r} != {local.stream_id!r}")
    if remote.get("modality") != local.modality.value:
        problems.append(f"modality {remote.get('modality')!r} != {local.modality.value!r}")
    labels = tuple(remote.get("channel_labels") or ())
    if labels != local.channel_labels:
        problems.append(f"channel_labels {len(labels)} ch != {len(local.channel_labels)} ch or reordered")
    rate = remote.get("nominal_rate_hz")
    if (rate is None) != (local.nominal_rate_hz is None) or (
        rate is not None and abs(rate - local.nominal_rate_hz) > 1e-9
    ):
        problems.append(f"nominal_rate_hz {rate!r} != {local.nominal_rate_hz!r}")
    if remote.get("value_encoding") != local.value_encoding:
        problems.append(f"value_encoding {remote.get('value_encoding')!r} != {local.value_encoding!r}")
    return problems


def send_ack(sock: socket.socket) -> None:
    sock.sendall(ACK)


def send_nak(sock: socket.socket, reason: str) -> None:
    sock.sendall(NAK + reason.encode())


def read_handshake_reply(sock: socket.socket) -> None:
    """Sender side: wait for ACK, raise HandshakeMismatch with the NAK reason."""
    reply = recv_exact(sock, 4)
    if reply == ACK:
        return
    if reply == NAK:
        reason = b""
        try:
            while True:
                part = sock.recv(4096)
                if not part:
                    break
                reason += part
        except OSError:
            pass
        raise HandshakeMismatch(reason.decode(errors="replace") or "remote rejected descriptor")
    raise ConnectionFailed(f"unexpected handshake reply {reply!r}")


def encode_frame(frame_type: int, seq: int, first_device_ts_ns: int, n_samples: int, payload: bytes) -> bytes:
    return _HEADER.pack(frame_type, seq, first_device_ts_ns, n_samples, zlib.crc32(payload)) + payload


def encode_chunk_frame(seq: int, first_device_ts_ns: int, n_samples: int, sample_bytes: bytes) -> bytes:
    return encode_frame(FRAME_CHUNK, seq, first_device_ts_ns, n_samples, sample_bytes)


def encode_marker_frame(marker_id: int, device_ts_ns: Optional[int], body: bytes) -> bytes:
    return encode_frame(FRAME_MARKER, marker_id, device_ts_ns or 0, len(body), body)


def encode_heartbeat(seq: int = 0) -> bytes:
    return encode_frame(FRAME_HEARTBEAT, seq, 0, 0, b"")


def marker_body(kind: str, label: str, payload: dict, device_ts_ns: Optional[int] = None) -> bytes:
    fields = {"kind": kind, "label": label, "payload": payload}
    if device_ts_ns is not None:
        fields["device_ts_ns"] = device_ts_ns
    return json.dumps(fields, separators=(",", ":")).encode()


class FrameReader:
    """Reads and CRC-checks OWP/1 frames for one stream connection."""

    def __init__(self, sock: socket.socket, descriptor: StreamDescriptor):
        self.sock = sock
        self.descriptor = descriptor
        self._row_bytes = descriptor.n_channels * descriptor.dtype.itemsize

    def next_frame(self) -> tuple[int, int, int, int, bytes]:
        """Return (frame_type, seq, first_device_ts_ns, n_samples, payload).

        Raises EOFError on clean close, socket.timeout on silence, and
        ParseError on framing/CRC violations.
        """
        header = recv_exact(self.sock, HEADER_SIZE)
        frame_type, seq, first_ts, n_samples, crc = _HEADER.unpack(header)
        if frame_type == FRAME_CHUNK:
            length = n_samples * self._row_bytes
        elif frame_type == FRAME_MARKER:
            length = n_samples
        elif frame_type == FRAME_HEARTBEAT:
            length = 0
        else:
            raise ParseError(f"unknown frame type 0x{frame_type:02X}")
        payload = recv_exact(self.sock, length) if length else b""
        if zlib.crc32(payload) != crc:
            raise ParseError(
                f"frame CRC mismatch on {self.descriptor.stream_id!r} seq {seq}"
            )
        return frame_type, seq, first_ts, n_samples, payload
