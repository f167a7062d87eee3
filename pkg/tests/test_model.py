import numpy as np
import pytest

from observa.model import (
    Chunk,
    ClockDomain,
    ClockMapping,
    EventMarker,
    InteractionPrimitive,
    Modality,
    PrimitiveKind,
    StreamDescriptor,
    Timestamp,
    check_payload_policy,
    device_ts,
    find_denied_keys,
    galea_beta_descriptors,
    host_ts,
    validate_descriptor,
)

from conftest import make_descriptor


EEG_LABELS = ("F1", "F2", "C3", "Cz", "C4", "P3", "Pz", "P4", "O1", "O2")


def desc(modality, labels, rate):
    return StreamDescriptor("s", modality, labels, rate, "microvolts")


class TestGaleaProfile:
    # One case per hardware table row, constructed verbatim.
    @pytest.mark.parametrize(
        "modality,labels,rate",
        [
            (Modality.EEG, EEG_LABELS, 250.0),
            (Modality.ExG, ("Fp1", "Fp2"), 250.0),
            (Modality.ExG, ("Fp1",), 250.0),
            (Modality.EMG, ("EMG1", "EMG2", "EMG3", "EMG4"), 250.0),
            (Modality.EMG, tuple(f"EMG{i}" for i in range(1, 7)), 250.0),
            (Modality.EOG, ("EOG1", "EOG2"), 250.0),
            (Modality.PPG, ("Red", "IR"), 250.0),
            (Modality.IMU, ("AX", "AY", "AZ", "GX", "GY", "GZ"), 250.0),
            (Modality.MAG, ("MX", "MY", "MZ"), 25.0),
        ],
    )
    def test_table_rows_pass(self, modality, labels, rate):
        report = validate_descriptor(desc(modality, labels, rate), profile="galea-beta")
        assert report.ok, report.violations

    def test_eeg_missing_cz_fails_profile(self):
        labels = tuple(l if l != "Cz" else "C2" for l in EEG_LABELS)
        report = validate_descriptor(desc(Modality.EEG, labels, 250.0), profile="galea-beta")
        assert not report.ok
        assert any("channel labels mismatch" in v for v in report.violations)

    def test_wrong_rate_fails_profile(self):
        report = validate_descriptor(desc(Modality.MAG, ("MX", "MY", "MZ"), 250.0), "galea-beta")
        assert not report.ok
        assert any("25" in v for v in report.violations)

    def test_wrong_channel_count_fails_profile(self):
        report = validate_descriptor(desc(Modality.EEG, EEG_LABELS[:8], 250.0), "galea-beta")
        assert not report.ok

    def test_canonical_descriptors_pass_their_own_profile(self):
        for d in galea_beta_descriptors():
            assert validate_descriptor(d, profile="galea-beta").ok

    def test_unknown_profile_is_a_violation(self):
        report = validate_descriptor(desc(Modality.EEG, EEG_LABELS, 250.0), profile="nope")
        assert not report.ok


class TestDescriptorInvariants:
    def test_duplicate_labels(self):
        report = validate_descriptor(desc(Modality.EEG, ("a", "a"), 250.0))
        assert not report.ok

    def test_nonpositive_rate(self):
        report = validate_descriptor(desc(Modality.EEG, ("a",), 0.0))
        assert not report.ok

    def test_sample_stream_needs_channels(self):
        report = validate_descriptor(desc(Modality.EEG, (), 250.0))
        assert not report.ok

    def test_marker_stream_has_no_labels_or_rate(self):
        ok = StreamDescriptor("mk", Modality.MARKER, (), None, "dimensionless")
        assert validate_descriptor(ok).ok
        bad = StreamDescriptor("mk", Modality.MARKER, ("x",), 1.0, "dimensionless")
        report = validate_descriptor(bad)
        assert len(report.violations) == 2

    def test_bad_encoding(self):
        d = StreamDescriptor("s", Modality.EEG, ("a",), 250.0, "uV", value_encoding="int8")
        assert not validate_descriptor(d).ok

    def test_validation_is_deterministic(self):
        d = desc(Modality.EEG, EEG_LABELS[:8], 250.0)
        assert validate_descriptor(d, "galea-beta") == validate_descriptor(d, "galea-beta")


class TestTimestamp:
    def test_same_domain_arithmetic(self):
        assert device_ts(10) - device_ts(4) == 6
        assert host_ts(4) < host_ts(5)

    def test_cross_domain_raises(self):
        with pytest.raises(ValueError):
            device_ts(10) - host_ts(4)
        with pytest.raises(ValueError):
            device_ts(10) < host_ts(4)

    def test_equality_includes_domain(self):
        assert device_ts(5) != host_ts(5)
        assert device_ts(5) == Timestamp(5, ClockDomain.DEVICE)


class TestClockMapping:
    def test_slope_must_be_positive(self):
        with pytest.raises(ValueError):
            ClockMapping(slope_a=0.0, intercept_b_ns=0)
        with pytest.raises(ValueError):
            ClockMapping(slope_a=-1.0, intercept_b_ns=0)

    def test_negative_rms_rejected(self):
        with pytest.raises(ValueError):
            ClockMapping(slope_a=1.0, intercept_b_ns=0, rms_residual_ns=-1.0)


class TestChunk:
    def test_channel_shape_enforced(self):
        with pytest.raises(ValueError):
            Chunk("s", device_ts(0), 4_000_000, host_ts(0), np.zeros(5, dtype=np.float32), 0)

    def test_per_sample_ts_length(self):
        with pytest.raises(ValueError):
            Chunk(
                "s",
                device_ts(0),
                4_000_000,
                host_ts(0),
                np.zeros((3, 1), dtype=np.float32),
                0,
                per_sample_device_ts=np.array([0, 1], dtype=np.int64),
            )

    def test_per_sample_ts_strictly_increasing(self):
        with pytest.raises(ValueError):
            Chunk(
                "s",
                device_ts(0),
                4_000_000,
                host_ts(0),
                np.zeros((3, 1), dtype=np.float32),
                0,
                per_sample_device_ts=np.array([0, 5, 5], dtype=np.int64),
            )

    def test_samples_become_read_only(self):
        samples = np.zeros((2, 2), dtype=np.float32)
        c = Chunk("s", device_ts(0), 4_000_000, host_ts(0), samples, 0)
        with pytest.raises(ValueError):
            c.samples[0, 0] = 1.0

    def test_device_ts_reconstruction(self):
        d = make_descriptor(n_channels=1)
        c = Chunk("s", device_ts(100), 4_000_000, host_ts(0), np.zeros((3, 1), dtype=np.float32), 0)
        assert list(c.device_ts_array()) == [100, 4_000_100, 8_000_100]
        assert c.last_device_ts == device_ts(8_000_100)
        del d

    def test_domain_enforcement(self):
        with pytest.raises(ValueError):
            Chunk("s", host_ts(0), 4_000_000, host_ts(0), np.zeros((1, 1), dtype=np.float32), 0)
        with pytest.raises(ValueError):
            Chunk("s", device_ts(0), 4_000_000, device_ts(0), np.zeros((1, 1), dtype=np.float32), 0)


class TestPayloadPolicy:
    def test_denied_terms_reject_case_insensitively(self):
        for key in ("affect_score", "Affect_Score", "EMOTION", "my_stress_level", "performance"):
            assert check_payload_policy({key: 1}) == [key]

    def test_clean_payload_passes(self):
        assert check_payload_policy({"level": "1-1", "coins": 3, "duration_ms": 17}) == []

    def test_configured_terms(self):
        assert find_denied_keys({"foo": 1}, ["foo"]) == ["foo"]
        with pytest.raises(ValueError):
            find_denied_keys({"foo": 1}, [])

    def test_primitive_payload_must_be_flat_scalars(self):
        with pytest.raises(ValueError):
            InteractionPrimitive(PrimitiveKind.TIMING_EVENT, "x", {"nested": {"a": 1}})

    def test_primitive_kinds_closed(self):
        with pytest.raises(ValueError):
            InteractionPrimitive("JUMP", "x", {})
        assert len(PrimitiveKind) == 4


class TestEventMarker:
    def test_domains_enforced(self):
        prim = InteractionPrimitive(PrimitiveKind.TIMING_EVENT, "x", {})
        with pytest.raises(ValueError):
            EventMarker(0, prim, host_ts=device_ts(0))
        with pytest.raises(ValueError):
            EventMarker(0, prim, host_ts=host_ts(0), device_ts=host_ts(0))
        m = EventMarker(1, prim, host_ts=host_ts(5), device_ts=device_ts(4), source="a")
        assert m.marker_id == 1
