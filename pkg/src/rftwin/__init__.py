"""Desk-scale RF channel emulation toolkit.

Scenario model and file format, ray-trace tap extraction, streaming
sparse-FIR emulation, m-sequence channel sounding, scenario replay, a twin
message broker with its latency harness, and a jamming demonstration link.
"""

from .scenario import (
    GridSpec,
    LinkId,
    NOMINAL_GRID,
    Scenario,
    Tap,
    TapLine,
    deserialize_scenario,
    path_loss_db,
    read_scenario,
    serialize_scenario,
    validate_scenario,
    write_scenario,
)
from .rays import RayRecord, RayTrace, bin_rays, build_scenario, select_taps
from .engine import (
    IqChunk,
    LinkFilterState,
    apply_taps,
    mimo_apply,
    mix_at_receiver,
    read_iq,
    update_taps,
    write_iq,
)
from .sounder import (
    CirEstimate,
    SoundingSequence,
    estimate_cir,
    extract_taps_from_cir,
    generate_msequence,
    sound_tap_line,
    validate_channel,
)
from .replay import PlaybackSession, TapStreamFrame, drive_engine, load, play, seek, stop
from .broker import LatencyReport, TwinBroker, TwinClient, measure_latency
from .waveforms import JammerConfig, LinkMetrics, ToyLinkConfig, gen_jammer, run_link

__version__ = "0.1.0"
