"""Figure rendering for the report-producing CLI paths.

Every figure goes straight to a file; the Agg backend is forced so this
works headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .broker import LatencyReport
from .scenario import GridSpec, TapLine
from .sounder import CirEstimate


def save_cir_figure(
    path,
    cir: CirEstimate,
    grid: GridSpec,
    installed: TapLine | None = None,
    title: str = "Estimated channel impulse response",
) -> None:
    """Per-bin power of a CIR estimate, with installed taps overlaid."""
    delays_ns = np.arange(cir.num_bins) * grid.bin_duration_ns
    power = np.abs(cir.amplitudes) ** 2
    floor_db = 10 * np.log10(max(cir.noise_floor, 1e-18))
    power_db = 10 * np.log10(np.maximum(power, 1e-18))

    fig, ax = plt.subplots(figsize=(9, 4.5))
    ax.plot(delays_ns, power_db, lw=0.8, color="tab:blue", label="estimate")
    if installed is not None and not installed.is_empty():
        bins = [t.bin * grid.bin_duration_ns for t in installed.taps]
        gains = [20 * np.log10(abs(t.gain)) for t in installed.taps]
        ax.plot(bins, gains, "x", ms=10, color="tab:red", label="installed taps")
    ax.axhline(floor_db, ls="--", lw=0.8, color="gray", label="noise floor")
    ax.set_xlabel("delay [ns]")
    ax.set_ylabel("power [dB]")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_validation_figure(path, results: list[dict]) -> None:
    """Scatter of per-tap delay and gain errors with tolerance boxes.

    ``results`` are validation dicts as emitted by the validate command.
    """
    delay_errs, gain_errs = [], []
    for res in results:
        for tap in res.get("taps", []):
            delay_errs.append(tap["delay_error_ns"])
            gain_errs.append(tap["gain_error_db"])
    fig, ax = plt.subplots(figsize=(6, 5))
    if delay_errs:
        ax.plot(delay_errs, gain_errs, "o", ms=5, alpha=0.7, color="tab:blue")
    ax.axvspan(-20, 20, color="tab:green", alpha=0.08)
    ax.axhspan(-0.5, 0.5, color="tab:green", alpha=0.08)
    ax.axvline(0, lw=0.5, color="gray")
    ax.axhline(0, lw=0.5, color="gray")
    ax.set_xlabel("delay error [ns]")
    ax.set_ylabel("gain error [dB]")
    ax.set_title("Recovered taps vs installed (tolerance shaded)")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_latency_figure(path, report: LatencyReport) -> None:
    """Mean one-way latency against payload size, one line per direction."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for direction, color in (("real_to_twin", "tab:blue"), ("twin_to_real", "tab:orange")):
        rows = [r for r in report.rows if r.direction == direction and not r.failed]
        if not rows:
            continue
        rows.sort(key=lambda r: r.size_bytes)
        sizes = [r.size_bytes for r in rows]
        ax.plot(sizes, [r.mean_ms for r in rows], "o-", color=color, label=direction)
        ax.fill_between(
            sizes,
            [r.p50_ms for r in rows],
            [r.p95_ms for r in rows],
            color=color,
            alpha=0.15,
        )
    ax.set_xscale("log")
    ax.set_xlabel("payload size [bytes]")
    ax.set_ylabel("one-way latency [ms]  (RTT/2)")
    ax.set_title("Broker latency vs payload size")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_timeline_figure(path, points, title: str = "Link throughput under jamming") -> None:
    """Throughput over time with the jammer-active window shaded."""
    times = [p.time_s for p in points]
    thr = [p.throughput_fraction for p in points]
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.plot(times, thr, "o-", color="tab:blue", ms=4)
    on = [p.time_s for p in points if p.jammer_on]
    if on:
        step = times[1] - times[0] if len(times) > 1 else 1.0
        ax.axvspan(min(on), max(on) + step, color="tab:red", alpha=0.12, label="jammer active")
        ax.legend(loc="lower left")
    ax.set_xlabel("time [s]")
    ax.set_ylabel("throughput fraction")
    ax.set_ylim(-0.05, 1.05)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
