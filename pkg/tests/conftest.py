import random
import socket

import numpy as np
import pytest

from observa.model import StreamDescriptor, Modality, device_ts, host_ts
from observa.model import Chunk


def find_free_base_port(count: int = 6, tries: int = 60) -> int:
    """A base port such that base..base+count-1 are all currently bindable."""
    for _ in range(tries):
        base = random.randint(20000, 55000)
        socks = []
        try:
            for i in range(count):
                s = socket.socket()
                s.bind(("127.0.0.1", base + i))
                socks.append(s)
            return base
        except OSError:
            continue
        finally:
            for s in socks:
                s.close()
    raise RuntimeError("could not find a free port range")


@pytest.fixture
def base_port():
    return find_free_base_port()


def make_descriptor(
    stream_id="test",
    modality=Modality.EEG,
    n_channels=2,
    rate=250.0,
    encoding="float32",
) -> StreamDescriptor:
    return StreamDescriptor(
        stream_id=stream_id,
        modality=modality,
        channel_labels=tuple(f"ch{i}" for i in range(n_channels)),
        nominal_rate_hz=rate,
        unit="microvolts",
        value_encoding=encoding,
    )


def make_chunk(desc: StreamDescriptor, seq: int, first_ns: int, n: int, fill=None, rng=None):
    if fill is not None:
        samples = np.full((n, desc.n_channels), fill, dtype=desc.dtype)
    else:
        rng = rng or np.random.default_rng(seq)
        samples = rng.normal(size=(n, desc.n_channels)).astype(desc.dtype)
    period = desc.sample_period_ns
    return Chunk(
        stream_id=desc.stream_id,
        first_device_ts=device_ts(first_ns),
        sample_period_ns=period,
        host_receipt_ts=host_ts(first_ns + n * period),
        samples=samples,
        sequence_number=seq,
    )


def chunk_stream(desc: StreamDescriptor, n_samples: int, chunk_len: int = 25, start_ns: int = 0):
    """Contiguous, gap-free chunk list covering n_samples."""
    chunks = []
    period = desc.sample_period_ns
    pos, seq = 0, 0
    while pos < n_samples:
        n = min(chunk_len, n_samples - pos)
        chunks.append(make_chunk(desc, seq, start_ns + pos * period, n))
        pos += n
        seq += 1
    return chunks


def delete_samples(chunks, desc, holes):
    """Remove schedule-index ranges [start, stop) and re-chunk the survivors.

    Independent re-chunking oracle: rebuilds the chunk list from the full
    sample matrix, assigning sequence numbers by schedule slot so that whole
    missing slots produce sequence jumps.
    """
    period = desc.sample_period_ns
    all_samples = np.concatenate([c.samples for c in chunks])
    total = len(all_samples)
    chunk_len = chunks[0].n_samples
    start0 = chunks[0].first_device_ts.ticks
    suppressed = set()
    for start, stop in holes:
        suppressed.update(range(start, stop))
    surviving = [i for i in range(total) if i not in suppressed]
    out = []
    last_seq = -1
    run_start = None
    prev = None
    runs = []
    for i in surviving:
        if prev is None or i != prev + 1:
            if run_start is not None:
                runs.append((run_start, prev + 1))
            run_start = i
        prev = i
    if run_start is not None:
        runs.append((run_start, prev + 1))
    for seg_start, seg_end in runs:
        pos = seg_start
        while pos < seg_end:
            n = min(chunk_len, seg_end - pos)
            seq = max(last_seq + 1, pos // chunk_len)
            last_seq = seq
            out.append(
                Chunk(
                    stream_id=desc.stream_id,
                    first_device_ts=device_ts(start0 + pos * period),
                    sample_period_ns=period,
                    host_receipt_ts=host_ts(start0 + (pos + n) * period),
                    samples=all_samples[pos : pos + n],
                    sequence_number=seq,
                )
            )
            pos += n
    return out
