"""Scenario playback: streaming tap updates toward emulation engines.

Virtual mode is pull-driven and fully deterministic -- frames come out of
an iterator as fast as the consumer takes them, and nothing is ever
dropped.  Paced mode runs on the wall clock at one frame per snapshot
period per link, delivering to bounded subscriber queues and counting
drops when a consumer falls behind.  A small length-prefixed wire protocol
serves frames over a local TCP socket.
"""

from __future__ import annotations

import json
import socket
import struct
import threading
import time
from dataclasses import dataclass
from queue import Full, Queue

from .engine import IqChunk, LinkFilterState, apply_taps, update_taps
from .scenario import (
    LinkId,
    Scenario,
    ScenarioFormatError,
    ScenarioValidationError,
    Tap,
    TapLine,
    read_scenario,
    validate_scenario,
)

_FRAME_HEADER = struct.Struct("<HHBBIQB")
_FRAME_TAP = struct.Struct("<Hff")
_LEN_PREFIX = struct.Struct("<I")

VIRTUAL = "virtual"
PACED = "paced"


@dataclass(frozen=True)
class TapStreamFrame:
    """One tap line heading for an engine: which link, effective when."""

    link: LinkId
    effective_ms: int
    tap_line: TapLine
    sequence_no: int


def encode_frame(frame: TapStreamFrame) -> bytes:
    """Length-prefixed wire encoding; field encodings match the scenario
    file (little-endian, u16 nodes, u8 antennas, u16/f32/f32 taps)."""
    body = _FRAME_HEADER.pack(
        frame.link.tx_node,
        frame.link.rx_node,
        frame.link.tx_antenna,
        frame.link.rx_antenna,
        frame.effective_ms,
        frame.sequence_no,
        len(frame.tap_line.taps),
    )
    for tap in frame.tap_line.taps:
        gain = complex(tap.gain)
        body += _FRAME_TAP.pack(tap.bin, gain.real, gain.imag)
    return _LEN_PREFIX.pack(len(body)) + body


def decode_frame(body: bytes) -> TapStreamFrame:
    tx, rx, ta, ra, eff_ms, seq, count = _FRAME_HEADER.unpack_from(body, 0)
    taps = []
    offset = _FRAME_HEADER.size
    for _ in range(count):
        bin_idx, re, im = _FRAME_TAP.unpack_from(body, offset)
        offset += _FRAME_TAP.size
        taps.append(Tap(bin_idx, complex(re, im)))
    return TapStreamFrame(
        link=LinkId(tx, rx, ta, ra),
        effective_ms=eff_ms,
        tap_line=TapLine(tuple(taps)),
        sequence_no=seq,
    )


class PlaybackSession:
    """A loaded scenario plus playback cursor, mode, and subscriptions.

    One session drives one playback; ``seek`` moves the cursor between
    plays, ``stop`` ends a paced playback (idempotent).
    """

    def __init__(self, scenario: Scenario, mode: str = VIRTUAL, loop: bool = False):
        if mode not in (VIRTUAL, PACED):
            raise ValueError(f"unknown mode {mode!r}, expected {VIRTUAL!r} or {PACED!r}")
        self.scenario = scenario
        self.mode = mode
        self.loop = loop
        self.position_ms = 0
        self.links = list(scenario.links())
        self._subscribed: list[LinkId] | None = None  # None = everything
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._subscribers: list[_Subscriber] = []
        self._seq: dict[LinkId, int] = {}
        self.late_frames = 0

    def subscribe_links(self, links: list[LinkId] | None) -> None:
        """Restrict playback to these links (None restores all links)."""
        if links is not None:
            known = set(self.links)
            for link in links:
                if link not in known:
                    raise ValueError(f"{link} is not a link of this scenario")
        self._subscribed = list(links) if links is not None else None

    def subscribed_links(self) -> list[LinkId]:
        return list(self._subscribed) if self._subscribed is not None else list(self.links)

    def status(self) -> dict:
        """Snapshot of playback state, JSON-ready."""
        return {
            "mode": self.mode,
            "loop": self.loop,
            "position_ms": self.position_ms,
            "duration_ms": self.scenario.duration_ms,
            "links": len(self.links),
            "subscribed_links": len(self.subscribed_links()),
            "subscribers": len(self._subscribers),
            "dropped_frames": sum(s.drops for s in self._subscribers),
            "late_frames": self.late_frames,
        }


def load(path, mode: str = VIRTUAL, loop: bool = False) -> PlaybackSession:
    """Read, decode, and validate a scenario file into a session.

    Propagates I/O errors as-is, malformed streams as
    :class:`ScenarioFormatError`, and well-formed streams that break model
    invariants as :class:`ScenarioValidationError`.
    """
    scenario = read_scenario(path)
    report = validate_scenario(scenario)
    if report:
        raise ScenarioValidationError(report)
    return PlaybackSession(scenario, mode=mode, loop=loop)


def seek(session: PlaybackSession, time_ms: int) -> None:
    """Move the playback cursor; the next frame emitted is for this time."""
    if not (0 <= time_ms < session.scenario.duration_ms):
        raise ValueError(
            f"seek to {time_ms} ms outside scenario duration "
            f"{session.scenario.duration_ms} ms"
        )
    session.position_ms = time_ms


def stop(session: PlaybackSession) -> None:
    """Stop an in-flight playback; safe to call repeatedly."""
    session._stop.set()
    if session._thread is not None:
        session._thread.join()
        session._thread = None


def _next_seq(session: PlaybackSession, link: LinkId) -> int:
    seq = session._seq.get(link, 0)
    session._seq[link] = seq + 1
    return seq


def play(session: PlaybackSession):
    """Start playback from the cursor.

    Virtual mode returns a frame iterator: per millisecond, one frame per
    subscribed link in lexicographic order, ending after the last
    millisecond unless looping.  Paced mode starts a wall-clock thread
    that pushes frames to attached subscriber queues and returns None;
    use :func:`attach_subscriber` first and :func:`stop` to end it.
    """
    session._stop.clear()
    if session.mode == VIRTUAL:
        return _virtual_frames(session)
    session._thread = threading.Thread(target=_paced_run, args=(session,), daemon=True)
    session._thread.start()
    return None


def _virtual_frames(session: PlaybackSession):
    scenario = session.scenario
    while not session._stop.is_set():
        ms = session.position_ms
        for link in session.subscribed_links():
            if session._stop.is_set():
                return
            yield TapStreamFrame(
                link=link,
                effective_ms=ms,
                tap_line=scenario.tap_line(link, ms),
                sequence_no=_next_seq(session, link),
            )
        ms += 1
        if ms >= scenario.duration_ms:
            if not session.loop:
                session.position_ms = 0
                return
            ms = 0
        session.position_ms = ms


class _Subscriber:
    """Bounded frame queue for one paced-mode consumer."""

    def __init__(self, maxsize: int, links: list[LinkId] | None):
        self.queue: Queue = Queue(maxsize=maxsize)
        self.links = set(links) if links is not None else None
        self.drops = 0

    def wants(self, link: LinkId) -> bool:
        return self.links is None or link in self.links

    def offer(self, frame: TapStreamFrame) -> None:
        try:
            self.queue.put_nowait(frame)
        except Full:
            self.drops += 1


def attach_subscriber(
    session: PlaybackSession,
    maxsize: int = 64,
    links: list[LinkId] | None = None,
) -> _Subscriber:
    """Register a paced-mode consumer; returns its queue wrapper."""
    sub = _Subscriber(maxsize, links)
    session._subscribers.append(sub)
    return sub


def _paced_run(session: PlaybackSession) -> None:
    scenario = session.scenario
    period_s = scenario.grid.snapshot_period_us / 1e6
    t0 = time.perf_counter()
    emitted = 0
    while not session._stop.is_set():
        ms = session.position_ms
        target = t0 + emitted * period_s
        now = time.perf_counter()
        if now < target:
            if session._stop.wait(target - now):
                break
        elif now - target > period_s:
            session.late_frames += 1
        for link in session.subscribed_links():
            frame = TapStreamFrame(
                link=link,
                effective_ms=ms,
                tap_line=scenario.tap_line(link, ms),
                sequence_no=_next_seq(session, link),
            )
            for sub in session._subscribers:
                if sub.wants(link):
                    sub.offer(frame)
        emitted += 1
        ms += 1
        if ms >= scenario.duration_ms:
            if not session.loop:
                session.position_ms = 0
                break
            ms = 0
        session.position_ms = ms


def drive_engine(
    session: PlaybackSession,
    states: dict[LinkId, LinkFilterState],
    inputs: dict[LinkId, IqChunk],
) -> dict[LinkId, IqChunk]:
    """Deterministically couple playback to filter states.

    For each link, every snapshot's tap line is scheduled at its exact
    boundary sample and the input stream (which must start at index 0) is
    filtered through in one pass.  Input shorter than the scenario simply
    ends early; input longer than the scenario holds the last tap line.
    """
    if set(states) != set(inputs):
        raise ValueError("states and inputs must cover the same links")
    outputs: dict[LinkId, IqChunk] = {}
    scenario = session.scenario
    for link, state in states.items():
        if state.grid != scenario.grid:
            raise ValueError(f"engine grid for {link} does not match the scenario grid")
        chunk = inputs[link]
        if chunk.start_index != 0:
            raise ValueError(f"input stream for {link} must start at sample 0")
        spns = state.samples_per_snapshot
        for ms in range(scenario.duration_ms):
            update_taps(state, scenario.tap_line(link, ms), ms * spns)
        outputs[link] = apply_taps(chunk, state)
    return outputs


def serve_frames(session: PlaybackSession, host: str = "127.0.0.1", port: int = 0):
    """Serve one playback over TCP: each connection receives every frame
    for the session's subscribed links, length-prefixed, then EOF.

    Returns ``(server_socket, bound_port, thread)``; close the socket or
    call :func:`stop` to shut down.  Virtual mode paces itself by socket
    backpressure (blocking sends); paced mode drops via subscriber queues.
    """
    server = socket.create_server((host, port))
    bound_port = server.getsockname()[1]

    def _serve() -> None:
        server.settimeout(0.2)
        conns: list[socket.socket] = []
        try:
            while not session._stop.is_set():
                try:
                    conn, _ = server.accept()
                except socket.timeout:
                    continue
                except OSError:
                    break
                conns.append(conn)
                threading.Thread(
                    target=_stream_to, args=(session, conn), daemon=True
                ).start()
        finally:
            for conn in conns:
                try:
                    conn.close()
                except OSError:
                    pass

    thread = threading.Thread(target=_serve, daemon=True)
    thread.start()
    return server, bound_port, thread


def _stream_to(session: PlaybackSession, conn: socket.socket) -> None:
    try:
        if session.mode == VIRTUAL:
            # Every connection replays the whole stream with its own cursor
            # and sequence counters; the parent's stop event ends them all.
            own = PlaybackSession(session.scenario, mode=VIRTUAL, loop=session.loop)
            own.subscribe_links(session._subscribed)
            own.position_ms = session.position_ms
            own._stop = session._stop
            for frame in _virtual_frames(own):
                conn.sendall(encode_frame(frame))
        else:
            sub = attach_subscriber(session)
            while not session._stop.is_set():
                try:
                    frame = sub.queue.get(timeout=0.2)
                except Exception:
                    continue
                conn.sendall(encode_frame(frame))
    except OSError:
        pass
    finally:
        try:
            conn.shutdown(socket.SHUT_WR)
        except OSError:
            pass
        try:
            conn.close()
        except OSError:
            pass


def read_frames(sock: socket.socket):
    """Iterate frames from a tap-stream connection until EOF."""
    buf = b""
    while True:
        while len(buf) < _LEN_PREFIX.size:
            data = sock.recv(65536)
            if not data:
                return
            buf += data
        (length,) = _LEN_PREFIX.unpack_from(buf, 0)
        while len(buf) < _LEN_PREFIX.size + length:
            data = sock.recv(65536)
            if not data:
                raise ConnectionError("tap stream truncated mid-frame")
            buf += data
        body = buf[_LEN_PREFIX.size : _LEN_PREFIX.size + length]
        buf = buf[_LEN_PREFIX.size + length :]
        yield decode_frame(body)


def frame_to_json(frame: TapStreamFrame) -> str:
    """One-line JSON rendering used by the CLI frame dump."""
    return json.dumps(
        {
            "tx": frame.link.tx_node,
            "rx": frame.link.rx_node,
            "tx_ant": frame.link.tx_antenna,
            "rx_ant": frame.link.rx_antenna,
            "effective_ms": frame.effective_ms,
            "sequence_no": frame.sequence_no,
            "taps": [
                {"bin": t.bin, "re": complex(t.gain).real, "im": complex(t.gain).imag}
                for t in frame.tap_line.taps
            ],
        }
    )
