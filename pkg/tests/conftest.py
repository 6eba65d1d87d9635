import numpy as np
import pytest

from rftwin.scenario import GridSpec, LinkId, Scenario, Tap, TapLine


def make_grid(bin_ns=10, num_bins=512, snapshot_us=1000) -> GridSpec:
    return GridSpec(bin_ns, num_bins, snapshot_us)


def make_scenario(
    num_nodes=2,
    antennas_per_node=1,
    duration_ms=1,
    grid=None,
    fill=None,
) -> Scenario:
    """A fully populated scenario; ``fill(link, ms)`` supplies tap lines
    (default: a single unit tap at bin 0 everywhere)."""
    grid = grid or make_grid()
    if fill is None:
        fill = lambda link, ms: TapLine((Tap(0, 1.0 + 0.0j),))
    s = Scenario(grid, num_nodes, antennas_per_node, duration_ms, {})
    for link in s.links():
        for ms in range(duration_ms):
            s.snapshots[(link, ms)] = fill(link, ms)
    return s


def random_tap_line(rng: np.random.Generator, num_bins=512, k=4) -> TapLine:
    """k distinct-bin taps, gains drawn from a ring well away from zero."""
    bins = np.sort(rng.choice(num_bins, size=k, replace=False))
    mags = 10.0 ** (rng.uniform(-8.0, 0.0, size=k) / 20.0)
    phases = rng.uniform(-np.pi, np.pi, size=k)
    gains = mags * np.exp(1j * phases)
    return TapLine(tuple(Tap(int(b), complex(g)) for b, g in zip(bins, gains)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
