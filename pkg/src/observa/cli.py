"""observa — operator entry point.

Subcommands: record, simulate, replay, verify, export, task-run.
Configuration precedence is flags > --config JSON file > built-in
defaults; the effective configuration is printed to stderr at startup so
a run can be reproduced from its log. Every failure path prints a single
structured "error: <Type>: <message>" line and exits nonzero; verify maps
its verdict to exit codes 0/1/2 (PASS/WARN/FAIL).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
import time

from . import ingest, simulator, store, verify
from .errors import ObservaError
from .markers import load_task_script, marker_to_line, run_task_harness
from .model import galea_beta_descriptors
from .verify import verify_session

log = logging.getLogger("observa")

DEFAULTS = {
    "record": {
        "profile": "galea-beta",
        "connect": None,
        "synth": False,
        "duration": 10.0,
        "out": "session.osf",
        "session_id": None,
        "queue_capacity": 64,
        "overflow": ingest.BLOCK,
        "chunk_len": ingest.DEFAULT_CHUNK_LEN,
        "seed": 0,
        "meta": [],
    },
    "simulate": {
        "profile": "galea-beta",
        "duration": 60.0,
        "skew_ppm": 0.0,
        "offset_ms": 0.0,
        "jitter_ms": 0.0,
        "dropout": [],
        "listen": "127.0.0.1:9000",
        "seed": 42,
        "report": None,
        "unpaced": False,
        "stall_dropouts": False,
        "marker_interval": 1.0,
        "chunk_len": None,
        "accept_timeout": 15.0,
    },
    "replay": {"speed": "unpaced"},
    "verify": {
        "tolerance_factor": 1.5,
        "warn_completeness": verify.WARN_COMPLETENESS,
        "fail_completeness": verify.FAIL_COMPLETENESS,
        "ground_truth": None,
        "json_out": None,
    },
    "export": {"stream": None, "clock": "device", "out": None, "markers_out": None},
    "task-run": {"pacing": "unpaced", "source": "task-harness"},
}


def _setup_logging() -> None:
    level = os.environ.get("OBSERVA_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )


def _effective_config(command: str, args: argparse.Namespace) -> dict:
    config = dict(DEFAULTS[command])
    path = getattr(args, "config", None)
    if path:
        with open(path) as f:
            loaded = json.load(f)
        for key, value in loaded.items():
            if key in config:
                config[key] = value
    for key in config:
        flag_value = getattr(args, key.replace("-", "_"), None)
        if flag_value is not None:
            config[key] = flag_value
    print(f"config {command}: {json.dumps(config, sort_keys=True)}", file=sys.stderr)
    return config


def _parse_meta(pairs) -> dict:
    meta = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ValueError(f"--meta expects key=value, got {pair!r}")
        meta[key] = value
    return meta


def _parse_dropouts(specs) -> tuple[list[tuple[float, float]], set[str]]:
    windows, streams = [], set()
    for spec in specs or []:
        parts = spec.split(":")
        if len(parts) == 2:
            windows.append((float(parts[0]), float(parts[1])))
        elif len(parts) == 3:
            streams.add(parts[0])
            windows.append((float(parts[1]), float(parts[2])))
        else:
            raise ValueError(f"--dropout expects START:DUR or STREAM:START:DUR, got {spec!r}")
    return windows, streams


def cmd_record(args: argparse.Namespace) -> int:
    cfg = _effective_config("record", args)
    descriptors = galea_beta_descriptors()
    meta = _parse_meta(cfg["meta"])
    stop_event = threading.Event()
    previous = signal.signal(signal.SIGINT, lambda *_: stop_event.set())
    writer = store.create_session(
        descriptors,
        marker_sources=[d.stream_id for d in descriptors],
        metadata=meta,
        path=cfg["out"],
        session_id=cfg["session_id"],
    )
    sources = []
    try:
        if cfg["synth"]:
            for i, desc in enumerate(descriptors):
                sources.append(
                    ingest.synth_source(
                        desc,
                        duration_s=cfg["duration"],
                        chunk_len=cfg["chunk_len"],
                        seed=cfg["seed"] + i,
                    )
                )
        elif cfg["connect"]:
            host, _, port_text = cfg["connect"].rpartition(":")
            base_port = int(port_text)
            for i, desc in enumerate(descriptors):
                sources.append(
                    ingest.open_network_source(f"{host or '127.0.0.1'}:{base_port + i}", desc)
                )
        else:
            raise ValueError("record needs --connect HOST:PORT or --synth")
        stats = ingest.run_acquisition(
            sources,
            writer,
            queue_capacity=cfg["queue_capacity"],
            overflow_policy=cfg["overflow"],
            stop_event=stop_event,
        )
    except BaseException:
        writer.close()  # leave a recoverable session behind
        raise
    finally:
        signal.signal(signal.SIGINT, previous)
        for src in sources:
            if hasattr(src, "close"):
                src.close()
    manifest = writer.finalize()
    print(f"session {manifest.session_id} -> {cfg['out']}")
    for sid in sorted(stats.per_stream):
        s = stats.per_stream[sid]
        print(
            f"  {sid}: chunks={s.chunks_received} samples={s.samples_received} "
            f"written={s.chunks_written} markers={s.markers_received} "
            f"drops={s.overflow_drops} max_queue={s.max_queue_depth}"
        )
    if stats.errors:
        for err in stats.errors:
            print(f"  note: {err}", file=sys.stderr)
    if stop_event.is_set():
        print("interrupted: session finalized with partial data", file=sys.stderr)
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = _effective_config("simulate", args)
    windows, window_streams = _parse_dropouts(cfg["dropout"])
    faults = simulator.FaultSpec(
        clock_skew_ppm=cfg["skew_ppm"],
        clock_offset_ms=cfg["offset_ms"],
        timestamp_jitter_ms=cfg["jitter_ms"],
        dropout_windows=tuple(windows),
        seed=cfg["seed"],
        dropout_mode=simulator.STALL if cfg["stall_dropouts"] else simulator.DROP,
        dropout_streams=tuple(sorted(window_streams)) or None,
    )
    report = simulator.simulate_device(
        profile=cfg["profile"],
        faults=faults,
        duration_s=cfg["duration"],
        endpoint=cfg["listen"],
        paced=not cfg["unpaced"],
        chunk_len=cfg["chunk_len"],
        marker_interval_s=cfg["marker_interval"],
        accept_timeout_s=cfg["accept_timeout"],
        report_path=cfg["report"],
        on_listening=lambda eps: print(
            "listening: " + " ".join(f"{d.stream_id}={ep}" for d, ep in zip(galea_beta_descriptors(), eps)),
            flush=True,
        ),
    )
    for s in report.streams:
        print(
            f"  {s.stream_id}: served={s.served} frames={s.frames_sent} "
            f"samples={s.samples_emitted} markers={s.markers_emitted} "
            f"suppressed={s.suppressed_samples}"
        )
    return 0


def cmd_replay(args: argparse.Namespace) -> int:
    cfg = _effective_config("replay", args)
    speed = cfg["speed"]
    if speed != "unpaced":
        speed = float(speed)
    src = ingest.replay_source(args.session, speed)
    chunks = markers = 0
    t0 = time.perf_counter()
    try:
        for item in src.frames():
            if hasattr(item, "samples"):
                chunks += 1
            else:
                markers += 1
    finally:
        src.close()
    wall = time.perf_counter() - t0
    print(f"replayed {chunks} chunks, {markers} markers in {wall:.3f}s (speed={cfg['speed']})")
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    cfg = _effective_config("verify", args)
    ground_truth = None
    if cfg["ground_truth"]:
        with open(cfg["ground_truth"]) as f:
            ground_truth = json.load(f)
    report = verify_session(
        args.session,
        tolerance_factor=cfg["tolerance_factor"],
        warn_completeness=cfg["warn_completeness"],
        fail_completeness=cfg["fail_completeness"],
        ground_truth=ground_truth,
    )
    if cfg["json_out"]:
        with open(cfg["json_out"], "w") as f:
            f.write(report.to_json())
    print(report.one_line())
    return report.exit_code


def cmd_export(args: argparse.Namespace) -> int:
    cfg = _effective_config("export", args)
    if not cfg["stream"] and not cfg["markers_out"]:
        raise ValueError("export needs --stream and/or --markers-out")
    with store.open_session(args.session) as reader:
        mapping = None
        if cfg["clock"] == "host" or (cfg["markers_out"] and cfg["stream"]):
            mapping = verify.fit_stream_mapping(reader, cfg["stream"])
        if cfg["stream"] and cfg["out"]:
            rows = store.export_csv(
                reader, cfg["stream"], cfg["out"], clock=cfg["clock"], mapping=mapping
            )
            print(f"exported {rows} rows of {cfg['stream']} -> {cfg['out']}")
        if cfg["markers_out"]:
            rows = store.export_markers_csv(
                reader, cfg["markers_out"], stream_id=cfg["stream"] if mapping else None, mapping=mapping
            )
            print(f"exported {rows} markers -> {cfg['markers_out']}")
    return 0


def cmd_task_run(args: argparse.Namespace) -> int:
    cfg = _effective_config("task-run", args)
    script = load_task_script(args.script)

    def sink(marker):
        print(marker_to_line(marker), flush=True)

    emitted = run_task_harness(script, sink, pacing=cfg["pacing"], source=cfg["source"])
    print(f"emitted {emitted} markers", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="observa",
        description="Multimodal stream recorder, device simulator, and session verifier",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("record", help="record streams into a session file")
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.add_argument("--profile", choices=["galea-beta"])
    p.add_argument("--connect", help="base HOST:PORT; stream i uses port+i in profile order")
    p.add_argument("--synth", action="store_true", default=None, help="use synthetic sources")
    p.add_argument("--duration", type=float, help="synthetic duration in seconds")
    p.add_argument("--out", help="session file path")
    p.add_argument("--session-id")
    p.add_argument("--queue-capacity", type=int)
    p.add_argument("--overflow", choices=list(ingest.OVERFLOW_POLICIES))
    p.add_argument("--chunk-len", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--meta", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_record)

    p = sub.add_parser("simulate", help="serve simulated device streams over OWP/1")
    p.add_argument("--config")
    p.add_argument("--profile", choices=["galea-beta"])
    p.add_argument("--duration", type=float)
    p.add_argument("--skew-ppm", type=float)
    p.add_argument("--offset-ms", type=float)
    p.add_argument("--jitter-ms", type=float)
    p.add_argument("--dropout", action="append", metavar="START:DUR|STREAM:START:DUR")
    p.add_argument("--listen", metavar="HOST:PORT")
    p.add_argument("--seed", type=int)
    p.add_argument("--report", help="write the exit report (alignment ground truth) here")
    p.add_argument("--unpaced", action="store_true", default=None)
    p.add_argument("--stall-dropouts", action="store_true", default=None)
    p.add_argument("--marker-interval", type=float)
    p.add_argument("--chunk-len", type=int)
    p.add_argument("--accept-timeout", type=float)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("replay", help="re-emit a recorded session")
    p.add_argument("session")
    p.add_argument("--config")
    p.add_argument("--speed", help="multiplier or 'unpaced'")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("verify", help="verify a session (exit 0/1/2 = PASS/WARN/FAIL)")
    p.add_argument("session")
    p.add_argument("--config")
    p.add_argument("--tolerance-factor", type=float)
    p.add_argument("--warn-completeness", type=float)
    p.add_argument("--fail-completeness", type=float)
    p.add_argument("--ground-truth", help="simulator exit report JSON")
    p.add_argument("--json-out", help="write the full JSON report here")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("export", help="export a stream and/or markers as CSV")
    p.add_argument("session")
    p.add_argument("--config")
    p.add_argument("--stream")
    p.add_argument("--clock", choices=["device", "host"])
    p.add_argument("--out")
    p.add_argument("--markers-out")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("task-run", help="run a scripted task, emitting marker lines on stdout")
    p.add_argument("script")
    p.add_argument("--config")
    p.add_argument("--pacing", choices=["realtime", "unpaced"])
    p.add_argument("--source")
    p.set_defaults(func=cmd_task_run)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ObservaError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
