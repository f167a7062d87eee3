import json
import time

import numpy as np
import pytest

from observa.errors import ParseError, PolicyViolation, SinkFailure, ValidationError
from observa.markers import (
    TaskScript,
    check_marker_ids,
    load_task_script,
    marker_to_line,
    parse_marker_line,
    run_task_harness,
)
from observa.model import InteractionPrimitive, PrimitiveKind, host_ts


class TestParseMarkerLine:
    def test_task_progression_line(self):
        line = '{"kind":"TASK_PROGRESSION","label":"level_complete","payload":{"level":"1-1"}}'
        m = parse_marker_line(line, marker_id=3, source="game")
        assert m.primitive.kind is PrimitiveKind.TASK_PROGRESSION
        assert m.primitive.label == "level_complete"
        assert m.primitive.payload == {"level": "1-1"}
        assert m.marker_id == 3 and m.source == "game"

    def test_unknown_kind_is_parse_error(self):
        with pytest.raises(ParseError, match="unknown primitive kind"):
            parse_marker_line('{"kind":"JUMP"}')

    def test_interpretative_payload_is_policy_violation(self):
        with pytest.raises(PolicyViolation, match="affect_score"):
            parse_marker_line('{"kind":"TIMING_EVENT","label":"x","payload":{"affect_score":3}}')

    def test_host_ts_stamped_at_parse_unless_carried(self):
        before = time.time_ns()
        m = parse_marker_line('{"kind":"TIMING_EVENT","label":"x"}')
        assert before <= m.host_ts.ticks <= time.time_ns()
        m2 = parse_marker_line('{"kind":"TIMING_EVENT","label":"x","host_ts_ns":123}')
        assert m2.host_ts.ticks == 123

    def test_device_ts_passthrough(self):
        m = parse_marker_line('{"kind":"TIMING_EVENT","label":"x","device_ts_ns":55}')
        assert m.device_ts.ticks == 55

    @pytest.mark.parametrize(
        "line",
        [
            "not json",
            "[1,2]",
            '{"kind":"TIMING_EVENT"}',  # no label
            '{"kind":"TIMING_EVENT","label":1}',
            '{"kind":"TIMING_EVENT","label":"x","payload":{"a":{"b":1}}}',
            '{"kind":"TIMING_EVENT","label":"x","device_ts_ns":"soon"}',
        ],
    )
    def test_malformed_lines(self, line):
        with pytest.raises(ParseError):
            parse_marker_line(line)

    def test_round_trip_through_line_protocol(self):
        rng = np.random.default_rng(11)
        kinds = list(PrimitiveKind)
        for i in range(50):
            prim = InteractionPrimitive(
                kinds[i % 4],
                f"label_{i}",
                {"a": int(rng.integers(100)), "b": f"v{i}", "c": bool(i % 2)},
            )
            from observa.model import EventMarker

            m = EventMarker(i, prim, host_ts(1000 + i), source="rt")
            parsed = parse_marker_line(marker_to_line(m), marker_id=i, source="rt")
            assert parsed.primitive == m.primitive
            assert parsed.host_ts == m.host_ts


def _script(events, total=10.0):
    return TaskScript(events=tuple(events), total_duration_s=total)


def _prim(kind=PrimitiveKind.TIMING_EVENT, label="t"):
    return InteractionPrimitive(kind, label, {})


class TestTaskScript:
    def test_times_must_be_nondecreasing(self):
        with pytest.raises(ValidationError):
            _script([(2.0, _prim()), (1.0, _prim())])

    def test_times_within_duration(self):
        with pytest.raises(ValidationError):
            _script([(11.0, _prim())], total=10.0)

    def test_load_well_formed(self, tmp_path):
        path = tmp_path / "script.json"
        path.write_text(
            json.dumps(
                {
                    "total_duration_s": 10.0,
                    "events": [
                        {"at_s": 0.0, "kind": "MOVEMENT_SEQUENCE", "label": "run", "payload": {"dir": "right"}},
                        {"at_s": 2.5, "kind": "TIMING_EVENT", "label": "checkpoint"},
                        {"at_s": 9.0, "kind": "ERROR_RECOVERY", "label": "respawn"},
                    ],
                }
            )
        )
        script = load_task_script(str(path))
        assert len(script) == 3

    def test_load_out_of_order(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(
            json.dumps(
                {
                    "total_duration_s": 10.0,
                    "events": [
                        {"at_s": 5.0, "kind": "TIMING_EVENT", "label": "b"},
                        {"at_s": 1.0, "kind": "TIMING_EVENT", "label": "a"},
                    ],
                }
            )
        )
        with pytest.raises(ValidationError):
            load_task_script(str(path))

    def test_load_event_past_duration(self, tmp_path):
        path = tmp_path / "bad2.json"
        path.write_text(
            json.dumps(
                {
                    "total_duration_s": 5.0,
                    "events": [{"at_s": 6.0, "kind": "TIMING_EVENT", "label": "late"}],
                }
            )
        )
        with pytest.raises(ValidationError):
            load_task_script(str(path))

    def test_load_malformed(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{nope")
        with pytest.raises(ParseError):
            load_task_script(str(path))
        with pytest.raises(ParseError):
            load_task_script(str(tmp_path / "missing.json"))


class TestHarness:
    def test_empty_script(self):
        out = []
        assert run_task_harness(_script([]), out.append) == 0
        assert out == []

    def test_unpaced_synthesizes_schedule_timestamps(self):
        events = [
            (0.0, _prim(PrimitiveKind.MOVEMENT_SEQUENCE, "m")),
            (1.5, _prim(PrimitiveKind.TIMING_EVENT, "t")),
            (4.0, _prim(PrimitiveKind.TASK_PROGRESSION, "p")),
            (9.25, _prim(PrimitiveKind.ERROR_RECOVERY, "e")),
        ]
        out = []
        n = run_task_harness(_script(events), out.append, start_host_ts=host_ts(10**9))
        assert n == 4
        assert [m.host_ts.ticks for m in out] == [
            10**9,
            10**9 + 1_500_000_000,
            10**9 + 4_000_000_000,
            10**9 + 9_250_000_000,
        ]
        assert [m.primitive.kind for m in out] == [e[1].kind for e in events]

    def test_marker_ids_dense_and_increasing(self):
        events = [(i * 0.1, _prim()) for i in range(20)]
        out = []
        run_task_harness(_script(events), out.append)
        assert [m.marker_id for m in out] == list(range(20))
        assert check_marker_ids(out) == []

    def test_check_marker_ids_finds_holes(self):
        events = [(0.0, _prim()), (0.1, _prim())]
        out = []
        run_task_harness(_script(events), out.append)
        out[1] = type(out[1])(
            marker_id=5,
            primitive=out[1].primitive,
            host_ts=out[1].host_ts,
            source=out[1].source,
        )
        assert check_marker_ids(out)

    def test_sink_failure_wrapped(self):
        def sink(_):
            raise RuntimeError("disk full")

        with pytest.raises(SinkFailure, match="disk full"):
            run_task_harness(_script([(0.0, _prim())]), sink)

    def test_harness_output_parses_back(self):
        events = [(i * 0.5, _prim(list(PrimitiveKind)[i % 4], f"l{i}")) for i in range(8)]
        out = []
        run_task_harness(_script(events), out.append)
        for m in out:
            parsed = parse_marker_line(marker_to_line(m), marker_id=m.marker_id, source=m.source)
            assert parsed.primitive == m.primitive

    def test_realtime_pacing_within_tolerance(self):
        # 100 markers at 100 ms spacing; inter-marker deltas at the 95th
        # percentile must stay within +/-5 ms of the schedule.
        events = [(i * 0.1, _prim()) for i in range(100)]
        out = []
        n = run_task_harness(_script(events), out.append, pacing="realtime")
        assert n == 100
        deltas_ms = np.diff([m.host_ts.ticks for m in out]) / 1e6
        err = np.abs(deltas_ms - 100.0)
        assert np.percentile(err, 95) <= 5.0
