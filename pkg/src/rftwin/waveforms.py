"""Interference demonstration on a toy single-carrier link.

A QPSK stream (one symbol per engine sample) runs through an emulated
channel while a jammer, pushed through its own channel, is mixed in at the
receiver.  The receiver is deliberately simple: per-frame least-squares
one-tap equalization off known pilots, then hard decisions.  Throughput is
all-or-nothing per frame, the stand-in for a frame checksum.

The contrast the demo exists to show: wideband noise of a given power
degrades every symbol all the time, while an equal-power narrowband tone
sweeps slowly through phase states, crushing the frames it anti-aligns
with and sparing the rest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.signal import firwin

from .engine import IqChunk, LinkFilterState, apply_taps, mix_at_receiver
from .scenario import GridSpec, TapLine

NARROWBAND_TONE = "narrowband-tone"
WIDEBAND_NOISE = "wideband-noise"

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
#: Taps of the documented spectral-shaping lowpass for the noise jammer:
#: windowed-sinc (Hamming), odd length, cutoff at half the requested
#: bandwidth fraction.
NOISE_SHAPING_NUMTAPS = 129


@dataclass(frozen=True)
class ToyLinkConfig:
    """Modulation and framing of the demo link.

    One symbol per sample; each frame leads with ``pilot_len`` known
    symbols used for equalization, the rest carry data.
    """

    frame_len: int = 256
    pilot_len: int = 16
    snr_db: float = 14.0
    frames: int = 200

    def __post_init__(self):
        if self.pilot_len < 1 or self.pilot_len >= self.frame_len:
            raise ValueError("need 1 <= pilot_len < frame_len")
        if self.frames < 1:
            raise ValueError("need at least one frame")

    @property
    def data_len(self) -> int:
        return self.frame_len - self.pilot_len


@dataclass(frozen=True)
class JammerConfig:
    """What interferes: kind, occupied bandwidth, power, spectral position.

    ``power`` is the mean sample power of the emitted waveform (for the
    demo's identity channels this is also the received jammer-to-signal
    ratio, since the QPSK stream has unit power).  ``bandwidth_fraction``
    is the occupied share of the link bandwidth -- informative for the
    tone, the shaping filter cutoff for the noise jammer.
    ``center_offset`` is the center frequency as a fraction of the sample
    rate.
    """

    kind: str
    bandwidth_fraction: float = 1.0
    power: float = 1.0
    center_offset: float = 0.0

    def __post_init__(self):
        if self.kind not in (NARROWBAND_TONE, WIDEBAND_NOISE):
            raise ValueError(f"unknown jammer kind {self.kind!r}")
        if not (0.0 < self.bandwidth_fraction <= 1.0):
            raise ValueError("bandwidth_fraction must be in (0, 1]")
        if self.power < 0:
            raise ValueError("jammer power must be non-negative")


#: Committed demo defaults.  The tone sits just off carrier and sweeps its
#: phase once every ~40 frames; at -9 dB relative to the signal it stays
#: below the QPSK decision margin, so only the frames it anti-aligns with
#: fail, while equal-power shaped noise taxes every frame at once.
DEFAULT_JSR_DB = -9.0
DEFAULT_TONE = JammerConfig(
    kind=NARROWBAND_TONE,
    bandwidth_fraction=0.008,
    power=10.0 ** (DEFAULT_JSR_DB / 10.0),
    center_offset=1e-4,
)
DEFAULT_NOISE = JammerConfig(
    kind=WIDEBAND_NOISE,
    bandwidth_fraction=0.5,
    power=10.0 ** (DEFAULT_JSR_DB / 10.0),
    center_offset=0.0,
)


def gen_jammer(
    cfg: JammerConfig,
    length: int,
    seed: int = 0,
    sample_rate_hz: float = GridSpec().sample_rate_hz,
) -> IqChunk:
    """Synthesize a jammer waveform, byte-identical for a fixed seed.

    Tone: a complex exponential at ``center_offset`` with seeded random
    initial phase, exact power.  Noise: seeded circular Gaussian shaped by
    a Hamming windowed-sinc lowpass of ``NOISE_SHAPING_NUMTAPS`` taps with
    cutoff ``bandwidth_fraction / 2``, shifted to ``center_offset`` and
    rescaled to the exact target power (bandwidth_fraction 1 skips the
    filter and stays white).
    """
    rng = np.random.default_rng(seed)
    n = np.arange(length)
    if cfg.kind == NARROWBAND_TONE:
        phase0 = rng.uniform(0.0, 2.0 * math.pi)
        samples = math.sqrt(cfg.power) * np.exp(
            1j * (2.0 * math.pi * cfg.center_offset * n + phase0)
        )
    else:
        white = rng.standard_normal(length) + 1j * rng.standard_normal(length)
        if cfg.bandwidth_fraction < 1.0:
            taps = firwin(NOISE_SHAPING_NUMTAPS, cfg.bandwidth_fraction, window="hamming")
            shaped = np.convolve(white, taps, mode="same")
        else:
            shaped = white
        if cfg.center_offset:
            shaped = shaped * np.exp(2j * math.pi * cfg.center_offset * n)
        measured = float(np.mean(np.abs(shaped) ** 2))
        if measured == 0.0 or cfg.power == 0.0:
            samples = np.zeros(length, dtype=np.complex128)
        else:
            samples = shaped * math.sqrt(cfg.power / measured)
    return IqChunk(samples.astype(np.complex128), 0, sample_rate_hz)


@dataclass(frozen=True)
class LinkMetrics:
    """Frame bookkeeping from one demo run."""

    throughput_fraction: float
    bit_error_rate: float
    frames_total: int
    frames_ok: int
    bit_errors: int
    data_bits: int


def _qpsk_map(bits: np.ndarray) -> np.ndarray:
    """Gray-coded QPSK, unit power: bit pairs (b0, b1) -> ((1-2*b0) + j(1-2*b1))/sqrt(2)."""
    i = 1.0 - 2.0 * bits[..., 0]
    q = 1.0 - 2.0 * bits[..., 1]
    return (i + 1j * q) * _INV_SQRT2


def _qpsk_demap(symbols: np.ndarray) -> np.ndarray:
    bits = np.empty(symbols.shape + (2,), dtype=np.int64)
    bits[..., 0] = (symbols.real < 0).astype(np.int64)
    bits[..., 1] = (symbols.imag < 0).astype(np.int64)
    return bits


def _strongest_bin(line: TapLine) -> int:
    if line.is_empty():
        return 0
    return max(line.taps, key=lambda t: abs(t.gain) ** 2).bin


def run_link(
    cfg: ToyLinkConfig,
    channel: TapLine | None = None,
    jammer: JammerConfig | None = None,
    seed: int = 0,
    grid: GridSpec | None = None,
    jammer_channel: TapLine | None = None,
    jammer_mask: np.ndarray | None = None,
) -> tuple[LinkMetrics, np.ndarray]:
    """Run the whole link once; returns metrics plus per-frame ok flags.

    ``jammer_mask`` (per-frame booleans) gates the jammer on and off over
    time for the on/off timeline demo.  Frame timing is genie-aided: the
    receiver aligns on the channel's strongest tap.  Deterministic for a
    given (cfg, seed).
    """
    grid = grid or GridSpec()
    channel = channel if channel is not None else _identity_line()
    ss = np.random.SeedSequence(seed)
    data_seed, pilot_seed, jam_seed, noise_seed = [
        int(s.generate_state(1)[0]) for s in ss.spawn(4)
    ]

    data_rng = np.random.default_rng(data_seed)
    pilot_rng = np.random.default_rng(pilot_seed)
    frames, frame_len, pilot_len = cfg.frames, cfg.frame_len, cfg.pilot_len
    data_bits = data_rng.integers(0, 2, size=(frames, cfg.data_len, 2))
    pilot_bits = pilot_rng.integers(0, 2, size=(pilot_len, 2))
    pilots = _qpsk_map(pilot_bits)

    tx = np.empty((frames, frame_len), dtype=np.complex128)
    tx[:, :pilot_len] = pilots
    tx[:, pilot_len:] = _qpsk_map(data_bits)
    tx_stream = tx.reshape(-1)

    total = frames * frame_len
    pad = grid.num_bins  # flush so the aligned cut never runs off the end
    tx_chunk = IqChunk(
        np.concatenate((tx_stream, np.zeros(pad, dtype=np.complex128))),
        0,
        grid.sample_rate_hz,
    )
    sig_state = LinkFilterState(grid, channel)
    rx_sig = apply_taps(tx_chunk, sig_state)
    signal_power = float(np.mean(np.abs(rx_sig.samples[:total]) ** 2))

    contributions = [rx_sig]
    if jammer is not None and jammer.power > 0:
        jam = gen_jammer(jammer, len(tx_chunk), jam_seed, grid.sample_rate_hz)
        jam_state = LinkFilterState(
            grid, jammer_channel if jammer_channel is not None else _identity_line()
        )
        rx_jam = apply_taps(jam, jam_state)
        if jammer_mask is not None:
            mask = np.zeros(len(tx_chunk))
            gate = np.repeat(np.asarray(jammer_mask, dtype=float), frame_len)
            mask[: len(gate)] = gate
            rx_jam = IqChunk(rx_jam.samples * mask, 0, grid.sample_rate_hz)
        contributions.append(rx_jam)

    noise_power = signal_power / 10.0 ** (cfg.snr_db / 10.0)
    rx = mix_at_receiver(contributions, noise_power, rng_seed=noise_seed)

    offset = _strongest_bin(channel)
    aligned = rx.samples[offset : offset + total].reshape(frames, frame_len)

    rx_pilots = aligned[:, :pilot_len]
    # Per-frame least-squares one-tap channel estimate from the pilots.
    h_hat = rx_pilots @ np.conj(pilots) / float(np.sum(np.abs(pilots) ** 2))
    safe = np.where(np.abs(h_hat) > 0, h_hat, 1.0)
    equalized = aligned[:, pilot_len:] / safe[:, None]

    decided = _qpsk_demap(equalized)
    errors_per_frame = np.sum(decided != data_bits, axis=(1, 2))
    ok = errors_per_frame == 0
    bit_errors = int(errors_per_frame.sum())
    data_bits_total = frames * cfg.data_len * 2
    metrics = LinkMetrics(
        throughput_fraction=float(np.mean(ok)),
        bit_error_rate=bit_errors / data_bits_total,
        frames_total=frames,
        frames_ok=int(ok.sum()),
        bit_errors=bit_errors,
        data_bits=data_bits_total,
    )
    return metrics, ok


def _identity_line() -> TapLine:
    from .scenario import Tap

    return TapLine((Tap(0, 1.0 + 0.0j),))


@dataclass(frozen=True)
class TimelinePoint:
    time_s: float
    throughput_fraction: float
    jammer_on: bool


def run_timeline(
    cfg: ToyLinkConfig,
    jammer: JammerConfig | None,
    seed: int = 0,
    segments: int = 30,
    frames_per_segment: int = 20,
    segment_seconds: float = 2.0,
    jam_window: tuple[float, float] = (1.0 / 3.0, 2.0 / 3.0),
    channel: TapLine | None = None,
    grid: GridSpec | None = None,
) -> list[TimelinePoint]:
    """Throughput over time with the jammer keyed on for a middle window.

    The run is one continuous stream of ``segments * frames_per_segment``
    frames, grouped into segments of ``segment_seconds`` for reporting
    (frame time is compressed relative to the nominal sample rate; the
    time axis is the reporting grid, not wall clock).
    """
    total_frames = segments * frames_per_segment
    run_cfg = replace(cfg, frames=total_frames)
    lo = int(round(jam_window[0] * total_frames))
    hi = int(round(jam_window[1] * total_frames))
    mask = np.zeros(total_frames, dtype=bool)
    mask[lo:hi] = True
    _, ok = run_link(
        run_cfg,
        channel=channel,
        jammer=jammer,
        seed=seed,
        grid=grid,
        jammer_mask=mask if jammer is not None else None,
    )
    points = []
    for s in range(segments):
        sl = slice(s * frames_per_segment, (s + 1) * frames_per_segment)
        points.append(
            TimelinePoint(
                time_s=s * segment_seconds,
                throughput_fraction=float(np.mean(ok[sl])),
                jammer_on=bool(mask[sl].any()) and jammer is not None,
            )
        )
    return points
