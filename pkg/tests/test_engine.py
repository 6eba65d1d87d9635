"""Streaming sparse-FIR engine: correctness against a dense oracle,
chunking invariance, update scheduling, mixing, and MIMO wiring."""

import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_grid
from rftwin.engine import (
    IqChunk,
    LinkFilterState,
    StreamDiscontinuityError,
    TapUpdateOrderError,
    apply_taps,
    benchmark_throughput,
    mimo_apply,
    mix_at_receiver,
    read_iq,
    update_taps,
    write_iq,
)
from rftwin.scenario import GridSpec, Tap, TapLine

# Small grid for speed: 16 delay bins, 100 samples per snapshot.
GRID = GridSpec(bin_duration_ns=10, num_bins=16, snapshot_period_us=1)
RATE = GRID.sample_rate_hz


def chunk(samples, start=0):
    return IqChunk(np.asarray(samples, dtype=np.complex128), start, RATE)


def dense_response(line: TapLine, num_bins: int) -> np.ndarray:
    h = np.zeros(num_bins, dtype=np.complex128)
    for t in line.taps:
        h[t.bin] = t.gain
    return h


def oracle_filter(x: np.ndarray, schedule, num_bins: int) -> np.ndarray:
    """Reference output built from plain np.convolve.

    ``schedule`` is [(start_sample, TapLine), ...] with start 0 first; the
    output at sample n uses the line active at n, applied to the whole
    input history (updates change the taps, never the signal).
    """
    n = len(x)
    y = np.zeros(n, dtype=np.complex128)
    for i, (start, line) in enumerate(schedule):
        end = schedule[i + 1][0] if i + 1 < len(schedule) else n
        if start >= n:
            break
        full = np.convolve(x, dense_response(line, num_bins))[:n]
        y[start:end] = full[start:end]
    return y


def test_impulse_single_tap():
    line = TapLine((Tap(5, 0.5 - 0.25j),))
    state = LinkFilterState(GRID, line)
    x = np.zeros(32, dtype=np.complex128)
    x[0] = 1.0
    y = apply_taps(chunk(x), state).samples
    expected = np.zeros(32, dtype=np.complex128)
    expected[5] = 0.5 - 0.25j
    npt.assert_array_equal(y, expected)


def test_two_tap_echo_hand_values():
    # y[n] = x[n] + 0.5*x[n-2] on x = [1, 2, 3, 4]
    state = LinkFilterState(GRID, TapLine((Tap(0, 1.0), Tap(2, 0.5))))
    y = apply_taps(chunk([1, 2, 3, 4]), state).samples
    npt.assert_allclose(y, [1.0, 2.0, 3.5, 5.0])


def test_empty_tap_line_outputs_silence():
    state = LinkFilterState(GRID, TapLine())
    y = apply_taps(chunk(np.ones(10)), state).samples
    npt.assert_array_equal(y, np.zeros(10))


def test_matches_dense_convolution(rng):
    for _ in range(20):
        k = rng.integers(1, 5)
        bins = np.sort(rng.choice(GRID.num_bins, size=k, replace=False))
        line = TapLine(tuple(
            Tap(int(b), complex(rng.normal(), rng.normal())) for b in bins
        ))
        x = rng.normal(size=300) + 1j * rng.normal(size=300)
        state = LinkFilterState(GRID, line)
        y = apply_taps(chunk(x), state).samples
        npt.assert_allclose(y, oracle_filter(x, [(0, line)], GRID.num_bins),
                            rtol=1e-12, atol=1e-12)


def test_history_carries_across_chunks(rng):
    line = TapLine((Tap(0, 1.0), Tap(7, -2.0j)))
    x = rng.normal(size=50) + 1j * rng.normal(size=50)
    whole = apply_taps(chunk(x), LinkFilterState(GRID, line)).samples

    state = LinkFilterState(GRID, line)
    a = apply_taps(chunk(x[:3]), state).samples          # split mid-echo
    b = apply_taps(chunk(x[3:], start=3), state).samples
    npt.assert_array_equal(np.concatenate([a, b]), whole)


def test_chunking_is_bit_identical(rng):
    """Same input stream, any partition: outputs agree to the last bit."""
    line = TapLine((Tap(1, 0.9), Tap(4, 0.3 + 0.1j), Tap(15, -0.2)))
    x = rng.normal(size=400) + 1j * rng.normal(size=400)
    whole = apply_taps(chunk(x), LinkFilterState(GRID, line)).samples

    for _ in range(5):
        cuts = np.sort(rng.choice(np.arange(1, 400), size=7, replace=False))
        state = LinkFilterState(GRID, line)
        parts = []
        prev = 0
        for cut in [*cuts, 400]:
            parts.append(apply_taps(chunk(x[prev:cut], start=prev), state).samples)
            prev = cut
        assert np.concatenate(parts).tobytes() == whole.tobytes()


def test_update_applies_exactly_at_boundary():
    spns = GRID.samples_per_snapshot
    state = LinkFilterState(GRID, TapLine((Tap(0, 1.0),)))
    update_taps(state, TapLine((Tap(0, 2.0),)), spns)
    x = np.ones(2 * spns, dtype=np.complex128)
    y = apply_taps(chunk(x), state).samples
    npt.assert_array_equal(y[:spns], np.ones(spns))
    npt.assert_array_equal(y[spns:], 2.0 * np.ones(spns))


def test_update_mid_chunk_matches_spliced_oracle(rng):
    spns = GRID.samples_per_snapshot
    lines = [
        TapLine((Tap(0, 1.0), Tap(3, 0.5))),
        TapLine((Tap(2, -1.0j),)),
        TapLine((Tap(0, 0.25), Tap(5, 0.5), Tap(9, -0.125))),
    ]
    x = rng.normal(size=3 * spns) + 1j * rng.normal(size=3 * spns)
    state = LinkFilterState(GRID, lines[0])
    update_taps(state, lines[1], spns)
    update_taps(state, lines[2], 2 * spns)
    y = apply_taps(chunk(x), state).samples
    expected = oracle_filter(
        x, [(0, lines[0]), (spns, lines[1]), (2 * spns, lines[2])], GRID.num_bins
    )
    npt.assert_allclose(y, expected, rtol=1e-12, atol=1e-12)


def test_update_history_spans_the_boundary(rng):
    """Echo taps keep seeing pre-update input after the line changes."""
    spns = GRID.samples_per_snapshot
    x = rng.normal(size=spns + 10)
    state = LinkFilterState(GRID, TapLine())
    update_taps(state, TapLine((Tap(8, 1.0),)), spns)
    y = apply_taps(chunk(x), state).samples
    # first 8 post-boundary outputs reach back into the silent-line region,
    # but the *input* history is continuous, so they must not be zero
    npt.assert_allclose(y[spns : spns + 10], x[spns - 8 : spns + 2], rtol=1e-12)


class TestUpdateOrdering:
    def test_rejects_off_boundary(self):
        state = LinkFilterState(GRID)
        with pytest.raises(TapUpdateOrderError):
            update_taps(state, TapLine(), GRID.samples_per_snapshot + 1)

    def test_rejects_past(self):
        state = LinkFilterState(GRID)
        apply_taps(chunk(np.zeros(GRID.samples_per_snapshot)), state)
        with pytest.raises(TapUpdateOrderError):
            update_taps(state, TapLine(), 0)

    def test_rejects_backwards_schedule(self):
        state = LinkFilterState(GRID)
        spns = GRID.samples_per_snapshot
        update_taps(state, TapLine(), 2 * spns)
        with pytest.raises(TapUpdateOrderError):
            update_taps(state, TapLine(), spns)

    def test_same_boundary_replaces(self):
        state = LinkFilterState(GRID)
        spns = GRID.samples_per_snapshot
        update_taps(state, TapLine((Tap(0, 1.0),)), spns)
        update_taps(state, TapLine((Tap(0, 9.0),)), spns)
        assert len(state.pending_updates()) == 1
        assert state.pending_updates()[0][1].taps[0].gain == 9.0

    def test_update_due_now_applies_to_next_sample(self):
        state = LinkFilterState(GRID, TapLine((Tap(0, 1.0),)))
        update_taps(state, TapLine((Tap(0, 3.0),)), 0)
        y = apply_taps(chunk([1.0, 1.0]), state).samples
        npt.assert_array_equal(y, [3.0, 3.0])


def test_stream_discontinuity():
    state = LinkFilterState(GRID, TapLine((Tap(0, 1.0),)))
    apply_taps(chunk(np.zeros(10)), state)
    with pytest.raises(StreamDiscontinuityError):
        apply_taps(chunk(np.zeros(10), start=11), state)


def test_rate_mismatch():
    state = LinkFilterState(GRID)
    bad = IqChunk(np.zeros(4, dtype=np.complex128), 0, RATE * 2)
    with pytest.raises(ValueError, match="rate"):
        apply_taps(bad, state)


def test_linearity(rng):
    line = TapLine((Tap(2, 0.7 + 0.2j), Tap(11, -0.4)))
    x = rng.normal(size=120) + 1j * rng.normal(size=120)
    y = rng.normal(size=120) + 1j * rng.normal(size=120)
    a, b = 2.0 - 1.0j, -0.5 + 3.0j

    def run(sig):
        return apply_taps(chunk(sig), LinkFilterState(GRID, line)).samples

    npt.assert_allclose(run(a * x + b * y), a * run(x) + b * run(y),
                        rtol=1e-12, atol=1e-12)


def test_time_invariance_within_snapshot(rng):
    line = TapLine((Tap(1, 0.5), Tap(6, 0.25j)))
    x = rng.normal(size=40) + 1j * rng.normal(size=40)
    shift = 13
    padded = np.concatenate([np.zeros(shift, dtype=complex), x])

    y = apply_taps(chunk(x), LinkFilterState(GRID, line)).samples
    y_shifted = apply_taps(chunk(padded), LinkFilterState(GRID, line)).samples
    npt.assert_allclose(y_shifted[shift:], y, rtol=1e-12, atol=1e-12)
    npt.assert_allclose(y_shifted[:shift], 0, atol=1e-15)


def test_empty_chunk_is_a_no_op():
    state = LinkFilterState(GRID, TapLine((Tap(0, 1.0),)))
    out = apply_taps(chunk(np.zeros(0)), state)
    assert len(out) == 0
    assert state.position == 0


@settings(max_examples=40, deadline=None)
@given(
    split=st.integers(1, 199),
    tap_bin=st.integers(0, 15),
    seed=st.integers(0, 2**16),
)
def test_chunk_split_property(split, tap_bin, seed):
    """Any single split point yields byte-identical output to one pass."""
    r = np.random.default_rng(seed)
    line = TapLine((Tap(tap_bin, complex(r.normal(), r.normal())),))
    x = r.normal(size=200) + 1j * r.normal(size=200)
    whole = apply_taps(chunk(x), LinkFilterState(GRID, line)).samples
    state = LinkFilterState(GRID, line)
    a = apply_taps(chunk(x[:split]), state).samples
    b = apply_taps(chunk(x[split:], start=split), state).samples
    assert np.concatenate([a, b]).tobytes() == whole.tobytes()


class TestMix:
    def test_sums_contributions(self):
        a = chunk([1 + 1j, 2.0])
        b = chunk([0.5, -1.0j])
        out = mix_at_receiver([a, b])
        npt.assert_array_equal(out.samples, [1.5 + 1j, 2.0 - 1.0j])

    def test_zero_noise_is_exact_and_deterministic(self):
        a = chunk([1.0, 2.0])
        npt.assert_array_equal(
            mix_at_receiver([a], 0.0, rng_seed=None).samples, [1.0, 2.0]
        )

    def test_misaligned_rejected(self):
        with pytest.raises(ValueError, match="misaligned"):
            mix_at_receiver([chunk([1.0]), chunk([1.0, 2.0])])
        with pytest.raises(ValueError, match="misaligned"):
            mix_at_receiver([chunk([1.0]), chunk([1.0], start=5)])

    def test_noise_power_is_calibrated(self):
        n = 1_000_000
        silent = chunk(np.zeros(n))
        out = mix_at_receiver([silent], noise_power=0.25, rng_seed=7)
        measured = np.mean(np.abs(out.samples) ** 2)
        assert measured == pytest.approx(0.25, rel=0.01)
        # circularly symmetric: half the power in each quadrature
        assert np.var(out.samples.real) == pytest.approx(0.125, rel=0.02)
        assert np.var(out.samples.imag) == pytest.approx(0.125, rel=0.02)

    def test_noise_is_seed_deterministic(self):
        silent = chunk(np.zeros(64))
        one = mix_at_receiver([silent], 1.0, rng_seed=3).samples
        two = mix_at_receiver([chunk(np.zeros(64))], 1.0, rng_seed=3).samples
        assert one.tobytes() == two.tobytes()

    def test_negative_noise_rejected(self):
        with pytest.raises(ValueError):
            mix_at_receiver([chunk([1.0])], noise_power=-1.0)


class TestMimo:
    def test_identity_matrix_passes_through(self, rng):
        x0 = rng.normal(size=50) + 0j
        x1 = rng.normal(size=50) + 0j
        unit = TapLine((Tap(0, 1.0),))
        states = [
            [LinkFilterState(GRID, unit), LinkFilterState(GRID, TapLine())],
            [LinkFilterState(GRID, TapLine()), LinkFilterState(GRID, unit)],
        ]
        y = mimo_apply([chunk(x0), chunk(x1)], states)
        npt.assert_allclose(y[0].samples, x0)
        npt.assert_allclose(y[1].samples, x1)

    def test_swap_matrix_crosses_streams(self, rng):
        x0 = rng.normal(size=30) + 0j
        x1 = rng.normal(size=30) + 0j
        unit = TapLine((Tap(0, 1.0),))
        states = [
            [LinkFilterState(GRID, TapLine()), LinkFilterState(GRID, unit)],
            [LinkFilterState(GRID, unit), LinkFilterState(GRID, TapLine())],
        ]
        y = mimo_apply([chunk(x0), chunk(x1)], states)
        npt.assert_allclose(y[0].samples, x1)
        npt.assert_allclose(y[1].samples, x0)

    def test_each_output_is_sum_of_filtered_inputs(self, rng):
        lines = [[None, None], [None, None]]
        for t in range(2):
            for r in range(2):
                k = rng.integers(1, 4)
                bins = np.sort(rng.choice(GRID.num_bins, size=k, replace=False))
                lines[t][r] = TapLine(tuple(
                    Tap(int(b), complex(rng.normal(), rng.normal())) for b in bins
                ))
        x = [rng.normal(size=80) + 1j * rng.normal(size=80) for _ in range(2)]
        states = [[LinkFilterState(GRID, lines[t][r]) for r in range(2)] for t in range(2)]
        y = mimo_apply([chunk(x[0]), chunk(x[1])], states)
        for r in range(2):
            expected = sum(
                oracle_filter(x[t], [(0, lines[t][r])], GRID.num_bins) for t in range(2)
            )
            npt.assert_allclose(y[r].samples, expected, rtol=1e-12, atol=1e-12)

    def test_ragged_states_rejected(self):
        with pytest.raises(ValueError):
            mimo_apply([chunk([1.0])], [[LinkFilterState(GRID)], [LinkFilterState(GRID)]])


def test_iq_file_round_trip(tmp_path, rng):
    samples = (rng.normal(size=100) + 1j * rng.normal(size=100)).astype(np.complex64)
    out = tmp_path / "x.iq"
    write_iq(out, IqChunk(samples.astype(np.complex128), 17, RATE))
    back = read_iq(out)
    assert back.start_index == 17
    assert back.sample_rate_hz == RATE
    # on-disk format is interleaved float32 pairs
    npt.assert_array_equal(back.samples.astype(np.complex64), samples)
    assert out.stat().st_size == 100 * 8


def test_iq_read_requires_sidecar(tmp_path):
    raw = tmp_path / "x.iq"
    raw.write_bytes(b"\x00" * 64)
    with pytest.raises(FileNotFoundError):
        read_iq(raw)


def test_benchmark_smoke():
    result = benchmark_throughput(num_links=2, duration_ms=2, grid=GRID, seed=0)
    assert result["num_links"] == 2
    assert len(result["per_link_samples_per_s"]) == 2
    assert result["aggregate_samples_per_s"] > 0
