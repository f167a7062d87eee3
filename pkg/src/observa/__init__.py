"""observa: multimodal biosignal acquisition, synchronization, recording,
and verification toolkit.

The package is organized by pipeline stage: model (shared domain types),
timebase (clock mapping and alignment), owp (wire protocol), ingest
(sources and the buffered acquisition loop), simulator (fault-injecting
device emulator), markers (interaction primitives and the task harness),
store (the OSF1 session container), verify (integrity/continuity/alignment
reports), and cli (the observa command).
"""

from .model import (
    Chunk,
    ClockDomain,
    ClockMapping,
    EventMarker,
    InteractionPrimitive,
    Modality,
    PrimitiveKind,
    SessionManifest,
    StreamDescriptor,
    Timestamp,
    galea_beta_descriptors,
    validate_descriptor,
)
from .timebase import (
    AlignedMarker,
    Gap,
    align_marker,
    detect_gaps,
    estimate_clock_mapping,
    map_to_host,
    resample_linear,
)
from .ingest import open_network_source, replay_source, run_acquisition, synth_source
from .markers import load_task_script, parse_marker_line, run_task_harness
from .simulator import FaultSpec, simulate_device
from .store import create_session, export_csv, open_session
from .verify import verify_session

__version__ = "0.1.0"

__all__ = [
    "AlignedMarker",
    "Chunk",
    "ClockDomain",
    "ClockMapping",
    "EventMarker",
    "FaultSpec",
    "Gap",
    "InteractionPrimitive",
    "Modality",
    "PrimitiveKind",
    "SessionManifest",
    "StreamDescriptor",
    "Timestamp",
    "align_marker",
    "create_session",
    "detect_gaps",
    "estimate_clock_mapping",
    "export_csv",
    "galea_beta_descriptors",
    "load_task_script",
    "map_to_host",
    "open_network_source",
    "open_session",
    "parse_marker_line",
    "replay_source",
    "resample_linear",
    "run_acquisition",
    "run_task_harness",
    "simulate_device",
    "synth_source",
    "validate_descriptor",
    "verify_session",
]
