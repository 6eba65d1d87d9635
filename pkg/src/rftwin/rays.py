"""Ray-trace ingest and tap extraction.

Turns multipath ray lists (delay/gain/phase per ray, per link, per
millisecond) into sparse tap lines: rays are binned coherently onto the
delay grid, then the strongest bins are kept, at most four per link.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .scenario import (
    MAX_TAPS,
    EMPTY_TAP_LINE,
    GridSpec,
    LinkId,
    Scenario,
    Tap,
    TapLine,
)

RAY_CSV_COLUMNS = ["tx", "rx", "tx_ant", "rx_ant", "time_ms", "delay_s", "gain_db", "phase_rad"]


class RayInputError(ValueError):
    """Malformed or out-of-range ray input; message carries the line number."""


@dataclass(frozen=True)
class RayRecord:
    """One propagation path: absolute delay, gain in dB, phase in radians."""

    delay_s: float
    gain_db: float
    phase_rad: float

    def amplitude(self) -> complex:
        """Complex baseband amplitude: 10^(gain_db/20) * e^(j*phase)."""
        mag = 10.0 ** (self.gain_db / 20.0)
        return complex(mag * math.cos(self.phase_rad), mag * math.sin(self.phase_rad))


@dataclass(frozen=True)
class RayTrace:
    """All rays for one link during one millisecond."""

    link: LinkId
    time_ms: int
    rays: tuple[RayRecord, ...]


@dataclass
class ExtractionReport:
    """Bookkeeping from building a scenario out of ray traces."""

    dropped_rays: int = 0
    binned_energy: float = 0.0
    kept_energy: float = 0.0
    cells: int = 0

    @property
    def discarded_fraction(self) -> float:
        """Share of binned CIR energy thrown away by top-k tap selection."""
        if self.binned_energy == 0.0:
            return 0.0
        return max(0.0, 1.0 - self.kept_energy / self.binned_energy)


def bin_rays(rays, grid: GridSpec) -> tuple[np.ndarray, int]:
    """Coherently sum ray amplitudes onto the delay grid.

    Each ray lands in bin round(delay / bin_duration) with ties rounding
    up; rays that land past the last bin are dropped.  Returns the dense
    complex CIR (length ``grid.num_bins``) and the dropped-ray count.
    """
    cir = np.zeros(grid.num_bins, dtype=np.complex128)
    bin_s = grid.bin_duration_ns * 1e-9
    dropped = 0
    for ray in rays:
        if ray.delay_s < 0:
            raise RayInputError(f"negative ray delay {ray.delay_s}")
        idx = math.floor(ray.delay_s / bin_s + 0.5)
        if idx >= grid.num_bins:
            dropped += 1
            continue
        cir[idx] += ray.amplitude()
    return cir, dropped


def select_taps(cir: np.ndarray, k: int = MAX_TAPS) -> TapLine:
    """Keep the k strongest non-zero bins of a dense CIR as a tap line.

    Selection is by per-bin power |a|^2; ties break toward the lower bin.
    Among all k-subsets of bins this maximizes retained energy.  Gains are
    carried through unchanged (no renormalization), so the tap line's total
    power understates the dense CIR's by the discarded remainder.
    """
    power = np.abs(np.asarray(cir)) ** 2
    # Stable sort on descending power keeps the natural bin order within ties.
    order = np.argsort(-power, kind="stable")
    chosen = [int(b) for b in order[:k] if power[b] > 0.0]
    chosen.sort()
    return TapLine(tuple(Tap(b, complex(cir[b])) for b in chosen))


def build_scenario(
    traces,
    grid: GridSpec,
    num_nodes: int,
    antennas_per_node: int,
    duration_ms: int,
) -> tuple[Scenario, ExtractionReport]:
    """Assemble a full scenario from ray traces.

    Links without a trace at a given millisecond hold their last tap line
    (empty until the first trace arrives).  Out-of-range link indices or
    times are fatal.  Multiple traces for the same (link, ms) cell are
    merged by concatenating their rays before binning.
    """
    report = ExtractionReport()
    by_cell: dict[tuple[LinkId, int], list[RayRecord]] = {}
    for trace in traces:
        link = trace.link
        if not (0 <= link.tx_node < num_nodes and 0 <= link.rx_node < num_nodes):
            raise RayInputError(f"node index out of range in {link}")
        if link.tx_node == link.rx_node:
            raise RayInputError(f"self-link {link} is not emulated")
        if not (
            0 <= link.tx_antenna < antennas_per_node
            and 0 <= link.rx_antenna < antennas_per_node
        ):
            raise RayInputError(f"antenna index out of range in {link}")
        if not (0 <= trace.time_ms < duration_ms):
            raise RayInputError(
                f"time {trace.time_ms} ms outside scenario duration {duration_ms} ms"
            )
        by_cell.setdefault((link, trace.time_ms), []).extend(trace.rays)

    scenario = Scenario(
        grid=grid,
        num_nodes=num_nodes,
        antennas_per_node=antennas_per_node,
        duration_ms=duration_ms,
    )
    for link in scenario.links():
        current = EMPTY_TAP_LINE
        for ms in range(duration_ms):
            rays = by_cell.get((link, ms))
            if rays is not None:
                cir, dropped = bin_rays(rays, grid)
                report.dropped_rays += dropped
                report.cells += 1
                line = select_taps(cir)
                report.binned_energy += float(np.sum(np.abs(cir) ** 2))
                report.kept_energy += line.total_power()
                current = line
            scenario.snapshots[(link, ms)] = current
    return scenario, report


def _parse_int(value: str, column: str, line_no: int) -> int:
    try:
        return int(value)
    except ValueError:
        raise RayInputError(f"line {line_no}: column {column!r} is not an integer: {value!r}") from None


def _parse_float(value: str, column: str, line_no: int) -> float:
    try:
        out = float(value)
    except ValueError:
        raise RayInputError(f"line {line_no}: column {column!r} is not a number: {value!r}") from None
    if not math.isfinite(out):
        raise RayInputError(f"line {line_no}: column {column!r} is not finite: {value!r}")
    return out


def read_ray_csv(path) -> list[RayTrace]:
    """Read rays from CSV, one ray per row.

    Required header: ``tx,rx,tx_ant,rx_ant,time_ms,delay_s,gain_db,phase_rad``.
    Rows are grouped into one :class:`RayTrace` per (link, time_ms); errors
    name the offending line.
    """
    cells: dict[tuple[LinkId, int], list[RayRecord]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise RayInputError("line 1: empty file, expected header") from None
        header = [h.strip() for h in header]
        if header != RAY_CSV_COLUMNS:
            raise RayInputError(
                f"line 1: header {header} != expected {RAY_CSV_COLUMNS}"
            )
        for line_no, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(RAY_CSV_COLUMNS):
                raise RayInputError(
                    f"line {line_no}: expected {len(RAY_CSV_COLUMNS)} fields, got {len(row)}"
                )
            tx = _parse_int(row[0], "tx", line_no)
            rx = _parse_int(row[1], "rx", line_no)
            ta = _parse_int(row[2], "tx_ant", line_no)
            ra = _parse_int(row[3], "rx_ant", line_no)
            ms = _parse_int(row[4], "time_ms", line_no)
            delay = _parse_float(row[5], "delay_s", line_no)
            gain = _parse_float(row[6], "gain_db", line_no)
            phase = _parse_float(row[7], "phase_rad", line_no)
            if delay < 0:
                raise RayInputError(f"line {line_no}: negative delay_s {delay}")
            if ms < 0:
                raise RayInputError(f"line {line_no}: negative time_ms {ms}")
            key = (LinkId(tx, rx, ta, ra), ms)
            cells.setdefault(key, []).append(RayRecord(delay, gain, phase))
    return [
        RayTrace(link, ms, tuple(rays))
        for (link, ms), rays in sorted(cells.items(), key=lambda kv: (kv[0][0], kv[0][1]))
    ]


def read_ray_jsonl(path) -> list[RayTrace]:
    """Read traces from JSON lines: one object per (link, ms) with fields
    tx, rx, tx_ant, rx_ant, time_ms and a ``rays`` list of
    {delay_s, gain_db, phase_rad} objects."""
    traces = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RayInputError(f"line {line_no}: invalid JSON: {exc}") from None
            try:
                link = LinkId(
                    int(obj["tx"]),
                    int(obj["rx"]),
                    int(obj.get("tx_ant", 0)),
                    int(obj.get("rx_ant", 0)),
                )
                ms = int(obj["time_ms"])
                rays = tuple(
                    RayRecord(float(r["delay_s"]), float(r["gain_db"]), float(r["phase_rad"]))
                    for r in obj["rays"]
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise RayInputError(f"line {line_no}: bad trace object: {exc}") from None
            for ray in rays:
                if not (
                    math.isfinite(ray.delay_s)
                    and math.isfinite(ray.gain_db)
                    and math.isfinite(ray.phase_rad)
                ):
                    raise RayInputError(f"line {line_no}: non-finite ray field")
                if ray.delay_s < 0:
                    raise RayInputError(f"line {line_no}: negative delay_s {ray.delay_s}")
            if ms < 0:
                raise RayInputError(f"line {line_no}: negative time_ms {ms}")
            traces.append(RayTrace(link, ms, rays))
    return traces


def load_ray_traces(path) -> list[RayTrace]:
    """Dispatch on extension: .csv for row-per-ray, .jsonl/.json for
    trace-per-line."""
    name = str(path)
    if name.endswith(".csv"):
        return read_ray_csv(path)
    if name.endswith(".jsonl") or name.endswith(".json"):
        return read_ray_jsonl(path)
    raise RayInputError(f"cannot infer ray format from file name {name!r}")
