"""Tapped-delay-line scenario model.

A scenario pins a sparse channel impulse response (at most four non-zero
complex taps on a fixed delay grid) to every directed link for every
millisecond snapshot.  This module holds the value types, the validation
rules, and the installed binary file format.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Iterator

MAGIC = b"RFTW"
FORMAT_VERSION = 1
MAX_TAPS = 4

_HEADER = struct.Struct("<4sHIHIHBI")
_TAP = struct.Struct("<Hff")
_COUNT = struct.Struct("<B")


class ScenarioFormatError(Exception):
    """Base class for failures while decoding an installed scenario stream."""


class BadMagicError(ScenarioFormatError):
    """Stream does not start with the RFTW magic."""


class UnsupportedVersionError(ScenarioFormatError):
    """Stream declares a format version this reader does not speak."""


class TruncatedStreamError(ScenarioFormatError):
    """Stream ended before the declared structure was complete."""


class ChecksumError(ScenarioFormatError):
    """Stream content does not match its trailing CRC-32."""


class PayloadInvariantError(ScenarioFormatError):
    """Structurally complete stream that violates a model invariant."""


class ScenarioValidationError(ValueError):
    """Raised when an operation requires a valid scenario but got violations."""

    def __init__(self, report: list["Violation"]):
        self.report = report
        head = "; ".join(str(v) for v in report[:3])
        more = f" (+{len(report) - 3} more)" if len(report) > 3 else ""
        super().__init__(f"{len(report)} scenario violation(s): {head}{more}")


@dataclass(frozen=True)
class GridSpec:
    """Delay/time grid shared by every link of a scenario.

    ``bin_duration_ns`` is both the tap spacing and the IQ sample period:
    the emulation engine runs at one sample per delay bin (100 MS/s for the
    nominal 10 ns grid).
    """

    bin_duration_ns: int = 10
    num_bins: int = 512
    snapshot_period_us: int = 1000

    @property
    def max_delay_ns(self) -> int:
        return self.num_bins * self.bin_duration_ns

    @property
    def sample_rate_hz(self) -> float:
        return 1e9 / self.bin_duration_ns

    @property
    def samples_per_snapshot(self) -> int:
        span_ns = self.snapshot_period_us * 1000
        if span_ns % self.bin_duration_ns:
            raise ValueError(
                f"snapshot period {self.snapshot_period_us} us is not a whole "
                f"number of {self.bin_duration_ns} ns bins"
            )
        return span_ns // self.bin_duration_ns


#: The grid everything defaults to: 512 bins of 10 ns (5.12 us of delay
#: span), one snapshot per millisecond.
NOMINAL_GRID = GridSpec()


@dataclass(frozen=True)
class Tap:
    """One non-zero channel tap: delay-grid bin index and complex gain."""

    bin: int
    gain: complex


@dataclass(frozen=True)
class TapLine:
    """Sparse CIR for one link during one snapshot.

    The container itself accepts anything; :func:`tap_line_violations` and
    :func:`validate_scenario` are where the invariants (at most four taps,
    strictly increasing in-range bins, finite non-zero gains) get enforced,
    so that broken data can be loaded far enough to be reported.
    """

    taps: tuple[Tap, ...] = ()

    def __len__(self) -> int:
        return len(self.taps)

    def __iter__(self) -> Iterator[Tap]:
        return iter(self.taps)

    def total_power(self) -> float:
        return sum(abs(t.gain) ** 2 for t in self.taps)

    def is_empty(self) -> bool:
        return not self.taps


EMPTY_TAP_LINE = TapLine()


def path_loss_db(line: TapLine) -> float:
    """Total path loss of a tap line: -10*log10(sum |gain|^2).

    An empty line (link fully blocked) has infinite loss.
    """
    power = line.total_power()
    if power == 0.0:
        return math.inf
    return -10.0 * math.log10(power)


@dataclass(frozen=True, order=True)
class LinkId:
    """Directed link: transmit node/antenna to receive node/antenna.

    Ordering is lexicographic on (tx_node, rx_node, tx_antenna, rx_antenna),
    which is also the serialization order.
    """

    tx_node: int
    rx_node: int
    tx_antenna: int = 0
    rx_antenna: int = 0


@dataclass(frozen=True)
class Scenario:
    """A complete emulation scenario: grid, topology, and per-ms tap lines.

    ``snapshots`` maps ``(LinkId, time_ms)`` to a :class:`TapLine` and is
    total over links x duration for a valid scenario.  Treat instances as
    immutable after construction.
    """

    grid: GridSpec
    num_nodes: int
    antennas_per_node: int
    duration_ms: int
    snapshots: dict[tuple[LinkId, int], TapLine] = field(default_factory=dict)

    def links(self) -> Iterator[LinkId]:
        """All directed non-self links in lexicographic order."""
        for tx in range(self.num_nodes):
            for rx in range(self.num_nodes):
                if tx == rx:
                    continue
                for ta in range(self.antennas_per_node):
                    for ra in range(self.antennas_per_node):
                        yield LinkId(tx, rx, ta, ra)

    def num_links(self) -> int:
        return self.num_nodes * (self.num_nodes - 1) * self.antennas_per_node**2

    def tap_line(self, link: LinkId, time_ms: int) -> TapLine:
        return self.snapshots[(link, time_ms)]


@dataclass(frozen=True)
class Violation:
    """One invariant violation found by :func:`validate_scenario`."""

    link: LinkId | None
    time_ms: int | None
    reason: str

    def __str__(self) -> str:
        where = []
        if self.link is not None:
            l = self.link
            where.append(f"link {l.tx_node}:{l.rx_node}:{l.tx_antenna}:{l.rx_antenna}")
        if self.time_ms is not None:
            where.append(f"ms {self.time_ms}")
        prefix = " ".join(where)
        return f"{prefix}: {self.reason}" if prefix else self.reason


def tap_line_violations(line: TapLine, num_bins: int) -> list[str]:
    """Reasons this tap line breaks the model, empty list if none."""
    reasons = []
    if len(line.taps) > MAX_TAPS:
        reasons.append(f"{len(line.taps)} taps exceeds the maximum of {MAX_TAPS}")
    prev_bin = -1
    for tap in line.taps:
        if not isinstance(tap.bin, int) or isinstance(tap.bin, bool):
            reasons.append(f"tap bin {tap.bin!r} is not an integer")
            continue
        if tap.bin < 0 or tap.bin >= num_bins:
            reasons.append(f"tap bin {tap.bin} outside grid [0, {num_bins})")
        if tap.bin <= prev_bin:
            reasons.append(f"tap bins not strictly increasing at bin {tap.bin}")
        prev_bin = tap.bin
        gain = complex(tap.gain)
        if not (math.isfinite(gain.real) and math.isfinite(gain.imag)):
            reasons.append(f"tap at bin {tap.bin} has non-finite gain")
        elif gain == 0:
            reasons.append(f"tap at bin {tap.bin} has zero gain")
    return reasons


def validate_scenario(s: Scenario) -> list[Violation]:
    """Check every scenario invariant; returns all violations, never raises.

    An empty report means the scenario is valid.
    """
    out: list[Violation] = []

    if s.grid.bin_duration_ns <= 0:
        out.append(Violation(None, None, "grid bin_duration_ns must be positive"))
    if s.grid.num_bins <= 0:
        out.append(Violation(None, None, "grid num_bins must be positive"))
    if s.grid.snapshot_period_us <= 0:
        out.append(Violation(None, None, "grid snapshot_period_us must be positive"))
    if s.num_nodes < 1:
        out.append(Violation(None, None, f"num_nodes {s.num_nodes} must be >= 1"))
    if s.antennas_per_node not in (1, 2):
        out.append(
            Violation(None, None, f"antennas_per_node {s.antennas_per_node} not in (1, 2)")
        )
    if s.duration_ms < 1:
        out.append(Violation(None, None, f"duration_ms {s.duration_ms} must be >= 1"))

    # Serialized field widths bound the in-memory model too.
    for name, value, limit in (
        ("bin_duration_ns", s.grid.bin_duration_ns, 2**32),
        ("num_bins", s.grid.num_bins, 2**16),
        ("snapshot_period_us", s.grid.snapshot_period_us, 2**32),
        ("num_nodes", s.num_nodes, 2**16),
        ("duration_ms", s.duration_ms, 2**32),
    ):
        if value >= limit:
            out.append(Violation(None, None, f"{name} {value} exceeds field width"))

    if out:
        # Topology is broken; per-snapshot expectations would be meaningless.
        return out

    expected = set()
    for link in s.links():
        for ms in range(s.duration_ms):
            expected.add((link, ms))
            line = s.snapshots.get((link, ms))
            if line is None:
                out.append(Violation(link, ms, "missing tap line"))
                continue
            for reason in tap_line_violations(line, s.grid.num_bins):
                out.append(Violation(link, ms, reason))

    for key in s.snapshots:
        if key not in expected:
            link, ms = key
            out.append(Violation(link, ms, "snapshot key outside topology/duration"))

    return out


def _require_valid(s: Scenario) -> None:
    report = validate_scenario(s)
    if report:
        raise ScenarioValidationError(report)


def serialize_scenario(s: Scenario) -> bytes:
    """Encode a valid scenario to the installed binary stream.

    Layout (all little-endian, no padding): ``RFTW`` magic, u16 version,
    u32 bin_duration_ns, u16 num_bins, u32 snapshot_period_us, u16
    num_nodes, u8 antennas_per_node, u32 duration_ms; then for each
    millisecond, for each link in lexicographic order, u8 tap count
    followed by (u16 bin, f32 gain_re, f32 gain_im) per tap; finally a u32
    CRC-32 of everything before it.  Gains are quantized to single
    precision on disk.
    """
    _require_valid(s)
    parts = [
        _HEADER.pack(
            MAGIC,
            FORMAT_VERSION,
            s.grid.bin_duration_ns,
            s.grid.num_bins,
            s.grid.snapshot_period_us,
            s.num_nodes,
            s.antennas_per_node,
            s.duration_ms,
        )
    ]
    for ms in range(s.duration_ms):
        for link in s.links():
            line = s.snapshots[(link, ms)]
            parts.append(_COUNT.pack(len(line.taps)))
            for tap in line.taps:
                gain = complex(tap.gain)
                parts.append(_TAP.pack(tap.bin, gain.real, gain.imag))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    """Bounds-checked cursor over a byte stream."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedStreamError(
                f"need {n} bytes at offset {self.pos}, "
                f"only {len(self.data) - self.pos} remain"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def remaining(self) -> int:
        return len(self.data) - self.pos


def deserialize_scenario(data: bytes) -> Scenario:
    """Decode an installed stream, rejecting anything malformed.

    Every failure mode maps to a distinct :class:`ScenarioFormatError`
    subclass: bad magic, unsupported version, truncation, checksum
    mismatch, or a payload that violates the model invariants.
    """
    r = _Reader(data)
    header = r.take(_HEADER.size)
    magic = header[:4]
    if magic != MAGIC:
        raise BadMagicError(f"expected {MAGIC!r}, got {magic!r}")
    (_, version, bin_ns, num_bins, snap_us, num_nodes, antennas, duration) = (
        _HEADER.unpack(header)
    )
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"version {version} not supported")
    if bin_ns == 0 or num_bins == 0 or snap_us == 0:
        raise PayloadInvariantError("grid fields must be positive")
    if num_nodes < 1:
        raise PayloadInvariantError(f"num_nodes {num_nodes} must be >= 1")
    if antennas not in (1, 2):
        raise PayloadInvariantError(f"antennas_per_node {antennas} not in (1, 2)")
    if duration < 1:
        raise PayloadInvariantError(f"duration_ms {duration} must be >= 1")

    grid = GridSpec(bin_duration_ns=bin_ns, num_bins=num_bins, snapshot_period_us=snap_us)
    scenario = Scenario(
        grid=grid,
        num_nodes=num_nodes,
        antennas_per_node=antennas,
        duration_ms=duration,
    )
    for ms in range(duration):
        for link in scenario.links():
            (count,) = _COUNT.unpack(r.take(1))
            if count > MAX_TAPS:
                raise PayloadInvariantError(
                    f"link {link} ms {ms}: {count} taps exceeds {MAX_TAPS}"
                )
            taps = []
            prev_bin = -1
            for _ in range(count):
                bin_idx, re, im = _TAP.unpack(r.take(_TAP.size))
                if bin_idx >= num_bins:
                    raise PayloadInvariantError(
                        f"link {link} ms {ms}: bin {bin_idx} outside grid"
                    )
                if bin_idx <= prev_bin:
                    raise PayloadInvariantError(
                        f"link {link} ms {ms}: bins not strictly increasing"
                    )
                prev_bin = bin_idx
                if not (math.isfinite(re) and math.isfinite(im)):
                    raise PayloadInvariantError(
                        f"link {link} ms {ms}: non-finite gain at bin {bin_idx}"
                    )
                if re == 0.0 and im == 0.0:
                    raise PayloadInvariantError(
                        f"link {link} ms {ms}: zero gain at bin {bin_idx}"
                    )
                taps.append(Tap(bin_idx, complex(re, im)))
            scenario.snapshots[(link, ms)] = TapLine(tuple(taps))

    crc_bytes = r.take(4)
    if r.remaining():
        raise PayloadInvariantError(f"{r.remaining()} trailing bytes after checksum")
    (declared_crc,) = struct.unpack("<I", crc_bytes)
    actual_crc = zlib.crc32(data[: len(data) - 4])
    if declared_crc != actual_crc:
        raise ChecksumError(
            f"declared crc32 {declared_crc:#010x} != computed {actual_crc:#010x}"
        )
    return scenario


def write_scenario(path, s: Scenario) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_scenario(s))


def read_scenario(path) -> Scenario:
    with open(path, "rb") as fh:
        return deserialize_scenario(fh.read())
