"""Streaming sparse-FIR emulation engine.

Applies a link's tap line to complex baseband IQ as a direct-form FIR with
at most four non-zero coefficients, holding the last ``num_bins - 1``
input samples across chunk boundaries so the output is exactly the same no
matter how the stream is partitioned.  Tap updates switch hard at snapshot
boundaries and never mid-snapshot.

Samples travel as 32-bit float pairs on the wire (files, sockets);
arithmetic inside the engine is double precision.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scenario import GridSpec, TapLine


class StreamDiscontinuityError(ValueError):
    """Chunk start index does not continue the stream fed so far."""


class TapUpdateOrderError(ValueError):
    """Tap update scheduled in the past or out of order."""


@dataclass
class IqChunk:
    """A contiguous run of complex baseband samples.

    ``start_index`` is the absolute position of the first sample since the
    stream began; the sample period is locked to the grid bin duration.
    """

    samples: np.ndarray
    start_index: int = 0
    sample_rate_hz: float = GridSpec().sample_rate_hz

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def end_index(self) -> int:
        return self.start_index + len(self.samples)


def _check_rate(chunk: IqChunk, grid: GridSpec) -> None:
    expected = grid.sample_rate_hz
    if not math.isclose(chunk.sample_rate_hz, expected, rel_tol=1e-9):
        raise ValueError(
            f"chunk sample rate {chunk.sample_rate_hz} Hz does not match the "
            f"grid-locked rate {expected} Hz"
        )


class LinkFilterState:
    """Per-link, per-direction filter state for one emulated channel.

    Holds the active tap line (as flat arrays), the input history carried
    across chunks, the absolute stream position, and a queue of scheduled
    tap updates that take effect exactly at snapshot boundaries.
    """

    def __init__(self, grid: GridSpec, tap_line: TapLine | None = None):
        self.grid = grid
        self.samples_per_snapshot = grid.samples_per_snapshot
        self.history = np.zeros(max(grid.num_bins - 1, 0), dtype=np.complex128)
        self.position = 0
        self._pending: list[tuple[int, TapLine]] = []
        self._bins = np.zeros(0, dtype=np.intp)
        self._gains = np.zeros(0, dtype=np.complex128)
        self.tap_line = TapLine()
        if tap_line is not None:
            self._install(tap_line)

    def _install(self, line: TapLine) -> None:
        self.tap_line = line
        self._bins = np.array([t.bin for t in line.taps], dtype=np.intp)
        self._gains = np.array([complex(t.gain) for t in line.taps], dtype=np.complex128)

    def pending_updates(self) -> list[tuple[int, TapLine]]:
        return list(self._pending)


def update_taps(state: LinkFilterState, line: TapLine, effective_sample: int) -> None:
    """Schedule ``line`` to take effect at an absolute sample index.

    The index must lie on a snapshot boundary and must not be in the past;
    samples at and after it are filtered with the new taps.  Scheduling the
    same boundary twice replaces the earlier line.
    """
    if effective_sample % state.samples_per_snapshot:
        raise TapUpdateOrderError(
            f"effective sample {effective_sample} is not a multiple of the "
            f"snapshot length {state.samples_per_snapshot}"
        )
    if effective_sample < state.position:
        raise TapUpdateOrderError(
            f"effective sample {effective_sample} is in the past "
            f"(stream position {state.position})"
        )
    if state._pending:
        last_eff, _ = state._pending[-1]
        if effective_sample < last_eff:
            raise TapUpdateOrderError(
                f"effective sample {effective_sample} precedes an already "
                f"scheduled update at {last_eff}"
            )
        if effective_sample == last_eff:
            state._pending[-1] = (effective_sample, line)
            return
    state._pending.append((effective_sample, line))


def _filter_segment(state: LinkFilterState, seg: np.ndarray, out: np.ndarray) -> None:
    """One fixed-tap-line stretch: out[n] = sum_k gain_k * x[n - bin_k]."""
    nb = state.grid.num_bins
    ext = np.concatenate((state.history, seg)) if nb > 1 else seg
    base = nb - 1
    out[:] = 0.0
    n = len(seg)
    for b, g in zip(state._bins, state._gains):
        lo = base - int(b)
        np.add(out, g * ext[lo : lo + n], out=out)
    if nb > 1:
        state.history = ext[len(ext) - (nb - 1) :].copy()


def apply_taps(x: IqChunk, state: LinkFilterState) -> IqChunk:
    """Filter one chunk through the link, advancing the stream position.

    Scheduled tap updates falling inside the chunk are applied exactly at
    their boundary sample; output for a given input stream is bit-identical
    regardless of how it is chunked.
    """
    _check_rate(x, state.grid)
    if x.start_index != state.position:
        raise StreamDiscontinuityError(
            f"chunk starts at {x.start_index}, stream position is {state.position}"
        )
    samples = np.ascontiguousarray(x.samples, dtype=np.complex128)
    out = np.empty(len(samples), dtype=np.complex128)
    pos = 0
    n = len(samples)
    while True:
        while state._pending and state._pending[0][0] == state.position:
            _, line = state._pending.pop(0)
            state._install(line)
        if pos >= n:
            break
        if state._pending:
            seg_end = min(n, state._pending[0][0] - x.start_index)
        else:
            seg_end = n
        seg = samples[pos:seg_end]
        _filter_segment(state, seg, out[pos:seg_end])
        state.position += len(seg)
        pos = seg_end
    return IqChunk(out, x.start_index, x.sample_rate_hz)


def mix_at_receiver(
    contributions: list[IqChunk],
    noise_power: float = 0.0,
    rng_seed: int | None = None,
) -> IqChunk:
    """Sum aligned contributions and optionally add complex white noise.

    ``noise_power`` is the total variance of the circularly-symmetric
    Gaussian noise (half in each of I and Q); zero noise power means the
    output is the exact sample-wise sum and no random numbers are drawn.
    """
    if not contributions:
        raise ValueError("need at least one contribution to mix")
    first = contributions[0]
    for c in contributions[1:]:
        if (
            c.start_index != first.start_index
            or len(c) != len(first)
            or not math.isclose(c.sample_rate_hz, first.sample_rate_hz, rel_tol=1e-9)
        ):
            raise ValueError("misaligned contributions (start index, length, or rate)")
    acc = np.zeros(len(first), dtype=np.complex128)
    for c in contributions:
        np.add(acc, np.asarray(c.samples, dtype=np.complex128), out=acc)
    if noise_power < 0:
        raise ValueError(f"noise power must be non-negative, got {noise_power}")
    if noise_power > 0:
        rng = np.random.default_rng(rng_seed)
        scale = math.sqrt(noise_power / 2.0)
        noise = rng.standard_normal(len(acc)) + 1j * rng.standard_normal(len(acc))
        acc += scale * noise
    return IqChunk(acc, first.start_index, first.sample_rate_hz)


def mimo_apply(
    tx_chunks: list[IqChunk],
    states: list[list[LinkFilterState]],
) -> list[IqChunk]:
    """Full antenna-pair emulation: states[t][r] filters tx t toward rx r.

    Each receive stream is the noiseless sum over transmit streams of the
    corresponding filtered chunk.  Sized for 2x2 but written for any
    (n_tx, n_rx).
    """
    if len(states) != len(tx_chunks):
        raise ValueError(
            f"{len(tx_chunks)} transmit streams but {len(states)} state rows"
        )
    if not tx_chunks:
        raise ValueError("need at least one transmit stream")
    n_rx = len(states[0])
    if any(len(row) != n_rx for row in states):
        raise ValueError("ragged state matrix")
    outputs = []
    for r in range(n_rx):
        contribs = [apply_taps(tx_chunks[t], states[t][r]) for t in range(len(tx_chunks))]
        outputs.append(mix_at_receiver(contribs))
    return outputs


def benchmark_throughput(
    num_links: int = 1,
    duration_ms: int = 50,
    grid: GridSpec | None = None,
    seed: int = 0,
    threads: int = 1,
) -> dict:
    """Measure streaming filter throughput in samples per second.

    Each link gets a random four-tap line and is fed ``duration_ms``
    snapshots of pre-generated noise-like input, one chunk per snapshot.
    With ``threads > 1`` links run concurrently (the heavy array work
    releases the interpreter lock), and the aggregate rate is total
    samples over wall time.
    """
    import time
    from concurrent.futures import ThreadPoolExecutor

    if num_links < 1:
        raise ValueError("need at least one link")
    if duration_ms < 1:
        raise ValueError("need at least one snapshot")
    grid = grid or GridSpec()
    spns = grid.samples_per_snapshot
    rng = np.random.default_rng(seed)

    from .scenario import Tap, TapLine as _TapLine

    setups = []
    for _ in range(num_links):
        bins = sorted(rng.choice(grid.num_bins, size=min(4, grid.num_bins), replace=False))
        gains = rng.standard_normal(len(bins)) + 1j * rng.standard_normal(len(bins))
        line = _TapLine(tuple(Tap(int(b), complex(g)) for b, g in zip(bins, gains)))
        buf = rng.standard_normal(spns) + 1j * rng.standard_normal(spns)
        setups.append((LinkFilterState(grid, line), buf))

    def run_one(idx: int) -> float:
        state, buf = setups[idx]
        t0 = time.perf_counter()
        for ms in range(duration_ms):
            apply_taps(IqChunk(buf, ms * spns, grid.sample_rate_hz), state)
        return duration_ms * spns / (time.perf_counter() - t0)

    total_samples = num_links * duration_ms * spns
    wall0 = time.perf_counter()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_link = list(pool.map(run_one, range(num_links)))
    else:
        per_link = [run_one(i) for i in range(num_links)]
    wall = time.perf_counter() - wall0
    return {
        "per_link_samples_per_s": per_link,
        "aggregate_samples_per_s": total_samples / wall,
        "samples_per_snapshot": spns,
        "num_links": num_links,
        "duration_ms": duration_ms,
        "threads": threads,
    }


def write_iq(path, chunk: IqChunk) -> None:
    """Write samples as raw interleaved little-endian float32 pairs plus a
    JSON sidecar (``<path>.json``) holding sample rate and start index."""
    data = np.ascontiguousarray(chunk.samples, dtype="<c8")
    path = Path(path)
    path.write_bytes(data.tobytes())
    sidecar = {"sample_rate_hz": chunk.sample_rate_hz, "start_index": chunk.start_index}
    Path(str(path) + ".json").write_text(json.dumps(sidecar) + "\n")


def read_iq(path) -> IqChunk:
    """Read an IQ file written by :func:`write_iq`; the sidecar is required."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) % 8:
        raise ValueError(f"{path}: length {len(raw)} is not a whole number of samples")
    sidecar_path = Path(str(path) + ".json")
    if not sidecar_path.exists():
        raise FileNotFoundError(f"missing IQ sidecar {sidecar_path}")
    meta = json.loads(sidecar_path.read_text())
    samples = np.frombuffer(raw, dtype="<c8").astype(np.complex128)
    return IqChunk(
        samples,
        start_index=int(meta["start_index"]),
        sample_rate_hz=float(meta["sample_rate_hz"]),
    )
