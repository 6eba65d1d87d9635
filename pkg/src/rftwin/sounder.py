"""Channel sounding and validation.

A maximal-length (m-)sequence has a two-valued periodic autocorrelation
(L at zero lag, -1 everywhere else), so circularly correlating what came
out of a channel against what went in reads the impulse response straight
off, one grid bin per lag.  This module generates the probe sequences,
estimates CIRs from received IQ, picks taps out of the estimate, and
scores recovered taps against installed ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .engine import IqChunk, LinkFilterState, apply_taps, mix_at_receiver
from .scenario import MAX_TAPS, GridSpec, Tap, TapLine

#: Verified primitive feedback polynomials (exponents, descending) for each
#: supported register length.  Every entry yields the full 2^m - 1 period.
PRIMITIVE_POLYS: dict[int, tuple[int, ...]] = {
    2: (2, 1),
    3: (3, 1),
    4: (4, 1),
    5: (5, 2),
    6: (6, 1),
    7: (7, 3),
    8: (8, 6, 5, 4),
    9: (9, 4),
    10: (10, 3),
    11: (11, 2),
    12: (12, 6, 4, 1),
    13: (13, 4, 3, 1),
    14: (14, 5, 3, 1),
    15: (15, 1),
    16: (16, 15, 13, 4),
}

DEFAULT_M = 10  # L = 1023 chips, comfortably longer than the 512-bin grid


class SequenceError(ValueError):
    """Bad LFSR parameters (zero seed, non-primitive polynomial, ...)."""


@dataclass(frozen=True)
class SoundingSequence:
    """One period of a +/-1 m-sequence and the LFSR recipe that made it."""

    chips: np.ndarray
    m: int
    lfsr_taps: tuple[int, ...]
    seed: int

    @property
    def length(self) -> int:
        return len(self.chips)


def generate_msequence(
    m: int = DEFAULT_M,
    lfsr_taps: tuple[int, ...] | None = None,
    seed: int = 0b0000000001,
) -> SoundingSequence:
    """Run a Fibonacci LFSR for one full period and map bits to chips.

    ``lfsr_taps`` are the feedback polynomial exponents (the register
    length m must be among them); omitted, a verified primitive polynomial
    for ``m`` is used.  Bit 1 maps to +1 and bit 0 to -1, so the sequence
    is balanced within one (one more +1 than -1).  A polynomial that does
    not reach the full 2^m - 1 period is rejected.
    """
    if lfsr_taps is None:
        if m not in PRIMITIVE_POLYS:
            raise SequenceError(
                f"no built-in polynomial for m={m}; supply lfsr_taps explicitly"
            )
        lfsr_taps = PRIMITIVE_POLYS[m]
    lfsr_taps = tuple(sorted(set(int(t) for t in lfsr_taps), reverse=True))
    if not lfsr_taps or lfsr_taps[0] != m:
        raise SequenceError(f"feedback polynomial {lfsr_taps} must include x^{m}")
    if any(t < 1 for t in lfsr_taps):
        raise SequenceError(f"tap exponents must be >= 1, got {lfsr_taps}")
    if m < 2:
        raise SequenceError(f"register length m={m} must be >= 2")
    if not (0 < seed < (1 << m)):
        raise SequenceError(f"seed {seed:#b} must be a non-zero {m}-bit value")

    length = (1 << m) - 1
    bits = np.empty(length, dtype=np.int8)
    state = seed
    shifts = [m - t for t in lfsr_taps]
    for i in range(length):
        bits[i] = state & 1
        fb = 0
        for s in shifts:
            fb ^= (state >> s) & 1
        state = (state >> 1) | (fb << (m - 1))
        if state == seed and i != length - 1:
            raise SequenceError(
                f"polynomial {lfsr_taps} is not primitive: period {i + 1} < {length}"
            )
    if state != seed:
        # Register never returned: cannot happen for a linear recurrence,
        # but guard against a corrupt table entry anyway.
        raise SequenceError(f"polynomial {lfsr_taps} did not close its cycle")
    chips = np.where(bits == 1, 1.0, -1.0)
    return SoundingSequence(chips=chips, m=m, lfsr_taps=lfsr_taps, seed=seed)


@dataclass(frozen=True)
class CirEstimate:
    """Correlation-derived CIR: per-bin complex amplitudes plus a noise
    floor (linear power, median of the off-peak bins).  ``seq_len`` is the
    probe period, kept so tap extraction can undo the -1/L sidelobe."""

    amplitudes: np.ndarray
    noise_floor: float
    seq_len: int

    @property
    def num_bins(self) -> int:
        return len(self.amplitudes)


def estimate_cir(
    reference: SoundingSequence,
    received: IqChunk,
    repetitions: int,
    num_bins: int,
) -> CirEstimate:
    """Estimate the CIR by periodic cross-correlation.

    The received stream must hold at least ``repetitions + 1`` periods; the
    first period is discarded as filter warm-up, the rest are correlated
    against the reference and averaged.  Each lag d of the correlation
    (normalized by L) estimates the tap at bin d, biased by -1/L times the
    sum of the other taps -- the flat sidelobe of the two-valued
    autocorrelation.
    """
    L = reference.length
    if num_bins < 1:
        raise ValueError("num_bins must be positive")
    if L <= num_bins:
        raise ValueError(
            f"sequence period {L} must exceed the grid ({num_bins} bins) so "
            f"delays do not alias"
        )
    if repetitions < 1:
        raise ValueError("need at least one repetition")
    x = np.asarray(received.samples, dtype=np.complex128)
    needed = (repetitions + 1) * L
    if len(x) < needed:
        raise ValueError(
            f"received stream has {len(x)} samples, need {needed} "
            f"({repetitions} periods plus one warm-up)"
        )
    ref_fft = np.fft.fft(reference.chips)
    acc = np.zeros(L, dtype=np.complex128)
    for r in range(repetitions):
        period = x[L + r * L : L + (r + 1) * L]
        acc += np.fft.ifft(np.fft.fft(period) * np.conj(ref_fft))
    h = acc / (L * repetitions)

    amplitudes = h[:num_bins].copy()
    power = np.abs(amplitudes) ** 2
    # Noise floor: median power outside the strongest bins (simple peak
    # mask sized at twice the maximum tap count).
    mask = min(2 * MAX_TAPS, num_bins // 2)
    if mask >= 1:
        order = np.argsort(-power, kind="stable")
        floor = float(np.median(power[order[mask:]]))
    else:
        floor = 0.0
    return CirEstimate(amplitudes=amplitudes, noise_floor=floor, seq_len=L)


def extract_taps_from_cir(
    cir: CirEstimate,
    k: int = MAX_TAPS,
    threshold_db: float = -30.0,
) -> TapLine:
    """Pick up to k taps out of a CIR estimate.

    A bin qualifies if its power is within ``threshold_db`` of the
    strongest bin and above three times the noise floor; the k strongest
    qualifiers win, ties toward the lower bin.  The flat -1/L correlation
    sidelobe is then removed in closed form, so in the noiseless case the
    recovered gains equal the installed ones exactly: with detected peaks
    h_k and T = sum_k h_k / (1 + (1 - K)/L), each gain is
    (h_k + T/L) / (1 + 1/L).
    """
    power = np.abs(cir.amplitudes) ** 2
    peak = float(power.max()) if len(power) else 0.0
    if peak == 0.0:
        return TapLine()
    cut = peak * 10.0 ** (threshold_db / 10.0)
    qualified = (power >= cut) & (power > 3.0 * cir.noise_floor) & (power > 0.0)
    order = np.argsort(-power, kind="stable")
    chosen = [int(b) for b in order if qualified[b]][:k]
    chosen.sort()
    if not chosen:
        return TapLine()

    raw = cir.amplitudes[chosen]
    L = cir.seq_len
    K = len(chosen)
    total = np.sum(raw) / (1.0 + (1.0 - K) / L)
    corrected = (raw + total / L) / (1.0 + 1.0 / L)
    taps = [
        Tap(b, complex(g)) for b, g in zip(chosen, corrected) if complex(g) != 0
    ]
    return TapLine(tuple(taps))


@dataclass(frozen=True)
class TapMatch:
    """One recovered tap paired with an installed one."""

    installed_bin: int
    recovered_bin: int
    delay_error_ns: float
    gain_error_db: float


@dataclass(frozen=True)
class ValidationResult:
    """Outcome of comparing recovered taps against installed ones."""

    matches: tuple[TapMatch, ...]
    missed_bins: tuple[int, ...]
    spurious_bins: tuple[int, ...]
    passed: bool

    def to_dict(self) -> dict:
        return {
            "taps": [
                {
                    "installed_bin": m.installed_bin,
                    "recovered_bin": m.recovered_bin,
                    "delay_error_ns": m.delay_error_ns,
                    "gain_error_db": m.gain_error_db,
                }
                for m in self.matches
            ],
            "missed_bins": list(self.missed_bins),
            "spurious_bins": list(self.spurious_bins),
            "pass": self.passed,
        }


def validate_channel(
    installed: TapLine,
    recovered: TapLine,
    bin_duration_ns: float,
    delay_tolerance_ns: float = 20.0,
    gain_tolerance_db: float = 0.5,
    detection_threshold_db: float = -30.0,
) -> ValidationResult:
    """Greedy nearest-bin matching of recovered taps to installed taps.

    Passes iff every matched tap is within both tolerances and no
    installed tap above the detection threshold (relative to the strongest
    installed tap) went unmatched.  Spurious recovered taps are reported
    but do not fail validation on their own.
    """
    inst = list(installed.taps)
    rec = list(recovered.taps)
    pairs = sorted(
        (
            (abs(i.bin - r.bin), i.bin, r.bin, ii, ri)
            for ii, i in enumerate(inst)
            for ri, r in enumerate(rec)
        ),
    )
    used_i: set[int] = set()
    used_r: set[int] = set()
    matches: list[TapMatch] = []
    for _, _, _, ii, ri in pairs:
        if ii in used_i or ri in used_r:
            continue
        used_i.add(ii)
        used_r.add(ri)
        i, r = inst[ii], rec[ri]
        delay_err = (r.bin - i.bin) * bin_duration_ns
        gain_err = 20.0 * math.log10(abs(r.gain) / abs(i.gain))
        matches.append(TapMatch(i.bin, r.bin, delay_err, gain_err))
    matches.sort(key=lambda m: m.installed_bin)

    missed = [i for ii, i in enumerate(inst) if ii not in used_i]
    spurious = tuple(r.bin for ri, r in enumerate(rec) if ri not in used_r)

    within = all(
        abs(m.delay_error_ns) <= delay_tolerance_ns
        and abs(m.gain_error_db) <= gain_tolerance_db
        for m in matches
    )
    blocking_missed = []
    if inst:
        strongest = max(abs(t.gain) ** 2 for t in inst)
        floor = strongest * 10.0 ** (detection_threshold_db / 10.0)
        blocking_missed = [t.bin for t in missed if abs(t.gain) ** 2 >= floor]
    passed = within and not blocking_missed
    return ValidationResult(
        matches=tuple(matches),
        missed_bins=tuple(t.bin for t in missed),
        spurious_bins=spurious,
        passed=passed,
    )


def sounding_waveform(
    sequence: SoundingSequence,
    repetitions: int,
    grid: GridSpec,
) -> IqChunk:
    """The transmit probe: ``repetitions + 1`` back-to-back periods (the
    extra one is the warm-up the estimator discards), one chip per sample."""
    reps = np.tile(sequence.chips.astype(np.complex128), repetitions + 1)
    return IqChunk(reps, start_index=0, sample_rate_hz=grid.sample_rate_hz)


def sound_tap_line(
    tap_line: TapLine,
    grid: GridSpec,
    sequence: SoundingSequence | None = None,
    repetitions: int = 16,
    snr_db: float | None = None,
    seed: int | None = 0,
) -> tuple[CirEstimate, TapLine]:
    """Probe one installed tap line through the engine and recover taps.

    With ``snr_db`` set, circular Gaussian noise is mixed in at that ratio
    relative to the measured received power; ``None`` sounds noiselessly.
    """
    if sequence is None:
        sequence = generate_msequence()
    tx = sounding_waveform(sequence, repetitions, grid)
    state = LinkFilterState(grid, tap_line)
    rx = apply_taps(tx, state)
    if snr_db is not None:
        signal_power = float(np.mean(np.abs(rx.samples) ** 2))
        noise_power = signal_power / 10.0 ** (snr_db / 10.0)
        rx = mix_at_receiver([rx], noise_power, rng_seed=seed)
    est = estimate_cir(sequence, rx, repetitions, grid.num_bins)
    return est, extract_taps_from_cir(est)
