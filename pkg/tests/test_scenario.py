"""Scenario model, validation, and the binary stream format."""

import math
import struct
import zlib

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_grid, make_scenario, random_tap_line
from rftwin.scenario import (
    FORMAT_VERSION,
    MAGIC,
    MAX_TAPS,
    BadMagicError,
    ChecksumError,
    GridSpec,
    LinkId,
    PayloadInvariantError,
    Scenario,
    ScenarioFormatError,
    ScenarioValidationError,
    Tap,
    TapLine,
    TruncatedStreamError,
    UnsupportedVersionError,
    deserialize_scenario,
    path_loss_db,
    serialize_scenario,
    tap_line_violations,
    validate_scenario,
)


def test_grid_defaults():
    g = GridSpec()
    assert g.bin_duration_ns == 10
    assert g.num_bins == 512
    assert g.max_delay_ns == 5120
    assert g.sample_rate_hz == 100e6
    assert g.samples_per_snapshot == 100_000


def test_grid_rejects_nondivisible_snapshot():
    g = GridSpec(bin_duration_ns=7, num_bins=64, snapshot_period_us=1)
    with pytest.raises(ValueError):
        g.samples_per_snapshot


def test_path_loss_half_amplitude():
    # |0.5|^2 = 0.25 -> -10*log10(0.25) = 20*log10(2) = 6.0206 dB
    line = TapLine((Tap(0, 0.5 + 0.0j),))
    assert path_loss_db(line) == pytest.approx(6.020599913279624, abs=1e-12)


def test_path_loss_sums_power_across_taps():
    line = TapLine((Tap(0, 0.6 + 0.0j), Tap(3, 0.0 + 0.8j)))
    # 0.36 + 0.64 = 1.0 -> 0 dB
    assert path_loss_db(line) == pytest.approx(0.0, abs=1e-12)


def test_path_loss_empty_line_is_infinite():
    assert path_loss_db(TapLine()) == math.inf


def test_link_ordering_is_lexicographic():
    s = make_scenario(num_nodes=3, antennas_per_node=2)
    links = list(s.links())
    assert links == sorted(links)
    assert len(links) == s.num_links() == 3 * 2 * 4
    assert all(l.tx_node != l.rx_node for l in links)
    assert links[0] == LinkId(0, 1, 0, 0)
    assert links[1] == LinkId(0, 1, 0, 1)


class TestTapLineViolations:
    def test_clean_line(self):
        line = TapLine((Tap(0, 1.0), Tap(5, 0.5j)))
        assert tap_line_violations(line, 512) == []

    def test_too_many_taps(self):
        line = TapLine(tuple(Tap(i, 1.0) for i in range(MAX_TAPS + 1)))
        assert any("tap" in v for v in tap_line_violations(line, 512))

    def test_bin_out_of_range(self):
        assert tap_line_violations(TapLine((Tap(512, 1.0),)), 512)
        assert tap_line_violations(TapLine((Tap(-1, 1.0),)), 512)

    def test_bins_must_strictly_increase(self):
        assert tap_line_violations(TapLine((Tap(5, 1.0), Tap(5, 1.0))), 512)
        assert tap_line_violations(TapLine((Tap(5, 1.0), Tap(2, 1.0))), 512)

    def test_zero_and_nonfinite_gains(self):
        assert tap_line_violations(TapLine((Tap(0, 0.0),)), 512)
        assert tap_line_violations(TapLine((Tap(0, complex("nan")),)), 512)
        assert tap_line_violations(TapLine((Tap(0, complex("inf") + 0j),)), 512)


def test_validate_scenario_clean(rng):
    s = make_scenario(num_nodes=2, duration_ms=3,
                      fill=lambda l, ms: random_tap_line(rng))
    assert validate_scenario(s) == []


def test_validate_scenario_reports_missing_snapshot():
    s = make_scenario(num_nodes=2, duration_ms=2)
    del s.snapshots[(LinkId(0, 1), 1)]
    report = validate_scenario(s)
    assert any("missing" in str(v) for v in report)


def test_validate_scenario_reports_unexpected_key():
    s = make_scenario(num_nodes=2)
    s.snapshots[(LinkId(0, 0), 0)] = TapLine()  # self-link never allowed
    assert any("outside topology" in str(v) for v in validate_scenario(s))


def test_validate_scenario_reports_bad_line_with_location():
    s = make_scenario(num_nodes=2, duration_ms=2)
    s.snapshots[(LinkId(1, 0), 1)] = TapLine((Tap(9999, 1.0),))
    report = validate_scenario(s)
    assert len(report) == 1
    assert report[0].link == LinkId(1, 0)
    assert report[0].time_ms == 1


def test_validate_scenario_never_raises_on_garbage():
    s = Scenario(make_grid(), num_nodes=0, antennas_per_node=7, duration_ms=0)
    assert validate_scenario(s)  # reports, does not raise


def test_serialize_rejects_invalid():
    s = make_scenario(num_nodes=2)
    s.snapshots[(LinkId(0, 1), 0)] = TapLine((Tap(0, 0.0),))
    with pytest.raises(ScenarioValidationError):
        serialize_scenario(s)


def test_round_trip_preserves_everything(rng):
    s = make_scenario(
        num_nodes=3,
        antennas_per_node=2,
        duration_ms=4,
        fill=lambda l, ms: random_tap_line(rng) if (ms % 2 == 0) else TapLine(),
    )
    # gains survive only at f32 precision, so quantize the expectation
    back = deserialize_scenario(serialize_scenario(s))
    assert back.grid == s.grid
    assert back.num_nodes == s.num_nodes
    assert back.antennas_per_node == s.antennas_per_node
    assert back.duration_ms == s.duration_ms
    assert set(back.snapshots) == set(s.snapshots)
    for key, line in s.snapshots.items():
        got = back.snapshots[key].taps
        assert [t.bin for t in got] == [t.bin for t in line.taps]
        for a, b in zip(got, line.taps):
            assert a.gain.real == pytest.approx(b.gain.real, rel=1e-6)
            assert a.gain.imag == pytest.approx(b.gain.imag, rel=1e-6)


def test_round_trip_exact_for_f32_gains():
    """Gains already representable in single precision survive bit-exactly."""
    line = TapLine((Tap(3, complex(0.5, -0.25)), Tap(17, complex(1.5, 2.0))))
    s = make_scenario(fill=lambda l, ms: line)
    back = deserialize_scenario(serialize_scenario(s))
    assert back.snapshots[(LinkId(0, 1), 0)] == line


def test_stream_layout_header():
    s = make_scenario()
    blob = serialize_scenario(s)
    magic, version = struct.unpack_from("<4sH", blob, 0)
    assert magic == MAGIC == b"RFTW"
    assert version == FORMAT_VERSION == 1
    # header(23) + 2 links * (1 count + 1 tap of 10 bytes) + crc(4)
    assert len(blob) == 23 + 2 * (1 + 10) + 4
    declared = struct.unpack_from("<I", blob, len(blob) - 4)[0]
    assert declared == zlib.crc32(blob[:-4])


def test_bad_magic():
    blob = bytearray(serialize_scenario(make_scenario()))
    blob[0] ^= 0xFF
    with pytest.raises(BadMagicError):
        deserialize_scenario(bytes(blob))


def test_unsupported_version():
    blob = bytearray(serialize_scenario(make_scenario()))
    struct.pack_into("<H", blob, 4, 99)
    with pytest.raises(UnsupportedVersionError):
        deserialize_scenario(bytes(blob))


def test_truncated_everywhere():
    blob = serialize_scenario(make_scenario(num_nodes=2, duration_ms=2))
    for cut in range(len(blob)):
        with pytest.raises(TruncatedStreamError):
            deserialize_scenario(blob[:cut])


def test_trailing_garbage_rejected():
    blob = serialize_scenario(make_scenario())
    with pytest.raises(PayloadInvariantError):
        deserialize_scenario(blob + b"\x00")


def test_checksum_mismatch():
    blob = bytearray(serialize_scenario(make_scenario()))
    blob[-1] ^= 0x01  # corrupt the stored crc itself
    with pytest.raises(ChecksumError):
        deserialize_scenario(bytes(blob))


def test_tap_count_invariant():
    blob = bytearray(serialize_scenario(make_scenario()))
    blob[23] = MAX_TAPS + 1  # first link's tap count
    with pytest.raises(PayloadInvariantError):
        deserialize_scenario(bytes(blob))


def test_all_format_errors_share_base():
    for exc in (BadMagicError, UnsupportedVersionError, TruncatedStreamError,
                ChecksumError, PayloadInvariantError):
        assert issubclass(exc, ScenarioFormatError)


@settings(max_examples=60, deadline=None)
@given(
    re=st.floats(-4.0, 4.0, allow_nan=False).filter(lambda v: abs(v) > 1e-3),
    im=st.floats(-4.0, 4.0, allow_nan=False),
    bin_idx=st.integers(0, 511),
)
def test_round_trip_property_single_tap(re, im, bin_idx):
    line = TapLine((Tap(bin_idx, complex(re, im)),))
    s = make_scenario(fill=lambda l, ms: line)
    back = deserialize_scenario(serialize_scenario(s))
    tap = back.snapshots[(LinkId(0, 1), 0)].taps[0]
    assert tap.bin == bin_idx
    assert tap.gain.real == pytest.approx(re, rel=1e-6, abs=1e-9)
    assert tap.gain.imag == pytest.approx(im, rel=1e-6, abs=1e-9)


def test_write_read_file(tmp_path, rng):
    from rftwin.scenario import read_scenario, write_scenario

    s = make_scenario(num_nodes=3, duration_ms=2,
                      fill=lambda l, ms: random_tap_line(rng))
    path = tmp_path / "s.scn"
    write_scenario(path, s)
    back = read_scenario(path)
    assert back.num_links() == s.num_links()
    assert set(back.snapshots) == set(s.snapshots)
