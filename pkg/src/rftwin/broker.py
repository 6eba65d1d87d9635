"""Point-to-point twin message broker.

A deliberately small TCP pub/sub hub: topic-keyed fan-out, at-most-once
delivery, per-(publisher, topic) FIFO toward each subscriber, CRC-checked
payloads.  Wire frames are ``u32 length | u8 type | body``, little-endian
throughout.  Also home to the latency harness that characterizes the hub
the way a deployment would: timed echo exchanges at payload sizes from
one byte to a megabyte, one-way figures reported as RTT/2 off a single
clock.
"""

from __future__ import annotations

import csv
import math
import socket
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field
from queue import Empty, Queue

_LEN = struct.Struct("<I")
_TYPE = struct.Struct("<B")

T_CONNECT = 1
T_SUB = 2
T_UNSUB = 3
T_PUB = 4
T_DELIVER = 5
T_PING = 6
T_PONG = 7
T_ACK = 8

MAX_TOPIC_BYTES = 255
DEFAULT_MAX_PAYLOAD = 4 * 1024 * 1024
DEFAULT_SIZES = (1, 100, 1024, 10 * 1024, 100 * 1024, 1024 * 1024)

#: Kernel-level cap on how long a single zero-progress socket write may
#: block.  Reads stay unbounded (subscribers legitimately idle); writes
#: must not, or one subscriber that stops draining stalls every other
#: conversation multiplexed onto the writing thread.
SEND_TIMEOUT_S = 5


def _bound_sends(sock: socket.socket, seconds: int = SEND_TIMEOUT_S) -> None:
    sock.setsockopt(
        socket.SOL_SOCKET, socket.SO_SNDTIMEO, struct.pack("@ll", seconds, 0)
    )

_ACK_BODY = struct.Struct("<BQ")
_PUB_FIXED = struct.Struct("<QQI")  # publish_seq, timestamp_ns, payload_len
_DELIVER_FIXED = struct.Struct("<QQQI")  # sender_id, publish_seq, timestamp_ns, payload_len
_PING_FIXED = struct.Struct("<QI")  # token, payload_len
_CRC = struct.Struct("<I")


class BrokerError(Exception):
    """Base class for broker/client failures."""


class TopicError(BrokerError):
    """Topic empty, too long, or not valid UTF-8."""


class PayloadTooLargeError(BrokerError):
    """Payload exceeds the configured maximum."""


class NotConnectedError(BrokerError):
    """Operation attempted on a closed or never-opened connection."""


class IntegrityError(BrokerError):
    """Delivered payload failed its checksum."""


def _check_topic(topic: str) -> bytes:
    if not topic:
        raise TopicError("topic must be non-empty")
    encoded = topic.encode("utf-8")
    if len(encoded) > MAX_TOPIC_BYTES:
        raise TopicError(f"topic is {len(encoded)} bytes, maximum {MAX_TOPIC_BYTES}")
    return encoded


def _read_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = b""
    while len(buf) < n:
        try:
            data = sock.recv(n - len(buf))
        except OSError:
            return None
        if not data:
            return None
        buf += data
    return buf


def _read_frame(sock: socket.socket, max_frame: int) -> tuple[int, bytes] | None:
    head = _read_exact(sock, _LEN.size)
    if head is None:
        return None
    (length,) = _LEN.unpack(head)
    if length < 1 or length > max_frame:
        return None  # protocol violation; caller drops the connection
    body = _read_exact(sock, length)
    if body is None:
        return None
    return body[0], body[1:]


def _frame(ftype: int, body: bytes) -> bytes:
    return _LEN.pack(1 + len(body)) + _TYPE.pack(ftype) + body


@dataclass(frozen=True)
class DeliveredMessage:
    """A publication as seen by a subscriber."""

    sender_id: int
    topic: str
    payload: bytes
    publish_seq: int
    timestamp_ns: int


class _BrokerConn:
    def __init__(self, sock: socket.socket, client_id: int):
        self.sock = sock
        self.client_id = client_id
        self.name = ""
        self.write_lock = threading.Lock()
        self.alive = True

    def send(self, data: bytes) -> bool:
        with self.write_lock:
            if not self.alive:
                return False
            try:
                self.sock.sendall(data)
                return True
            except OSError:
                self.alive = False
                return False


class TwinBroker:
    """The hub itself.  ``start`` binds and serves until ``stop``.

    Delivery of a publication happens synchronously on the publisher's
    reader thread, one subscriber at a time under that subscriber's write
    lock, which is what makes per-(publisher, topic) ordering FIFO at every
    subscriber.  Nothing is ever retried or buffered for a dead consumer:
    at most once.
    """

    def __init__(
        self,
        host: str = "127.0.0.1",
        port: int = 0,
        max_payload: int = DEFAULT_MAX_PAYLOAD,
    ):
        self.host = host
        self.port = port
        self.max_payload = max_payload
        self._server: socket.socket | None = None
        self._accept_thread: threading.Thread | None = None
        self._stop = threading.Event()
        self._lock = threading.Lock()
        self._subs: dict[str, list[_BrokerConn]] = {}
        self._conns: list[_BrokerConn] = []
        self._next_client_id = 1
        self.delivered_count = 0

    @property
    def address(self) -> tuple[str, int]:
        if self._server is None:
            raise BrokerError("broker is not running")
        return self._server.getsockname()[:2]

    def start(self) -> "TwinBroker":
        self._server = socket.create_server((self.host, self.port))
        self._server.settimeout(0.2)
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._server is not None:
            try:
                self._server.close()
            except OSError:
                pass
        if self._accept_thread is not None:
            self._accept_thread.join()
            self._accept_thread = None
        with self._lock:
            conns = list(self._conns)
        for conn in conns:
            try:
                conn.sock.close()
            except OSError:
                pass

    def __enter__(self) -> "TwinBroker":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def _accept_loop(self) -> None:
        assert self._server is not None
        while not self._stop.is_set():
            try:
                sock, _ = self._server.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            _bound_sends(sock)
            with self._lock:
                conn = _BrokerConn(sock, self._next_client_id)
                self._next_client_id += 1
                self._conns.append(conn)
            threading.Thread(target=self._serve_conn, args=(conn,), daemon=True).start()

    def _drop_conn(self, conn: _BrokerConn) -> None:
        conn.alive = False
        with self._lock:
            if conn in self._conns:
                self._conns.remove(conn)
            for subs in self._subs.values():
                if conn in subs:
                    subs.remove(conn)
        try:
            conn.sock.close()
        except OSError:
            pass

    def _serve_conn(self, conn: _BrokerConn) -> None:
        # Frame cap: payload plus topic plus the fixed DELIVER overhead.
        max_frame = self.max_payload + MAX_TOPIC_BYTES + 64
        try:
            while not self._stop.is_set():
                got = _read_frame(conn.sock, max_frame)
                if got is None:
                    break
                ftype, body = got
                if not self._dispatch(conn, ftype, body):
                    break
        finally:
            self._drop_conn(conn)

    def _dispatch(self, conn: _BrokerConn, ftype: int, body: bytes) -> bool:
        try:
            if ftype == T_CONNECT:
                (name_len,) = struct.unpack_from("<H", body, 0)
                conn.name = body[2 : 2 + name_len].decode("utf-8", "replace")
                return conn.send(_frame(T_ACK, _ACK_BODY.pack(T_CONNECT, conn.client_id)))
            if ftype in (T_SUB, T_UNSUB):
                topic_len = body[0]
                topic = body[1 : 1 + topic_len].decode("utf-8")
                with self._lock:
                    subs = self._subs.setdefault(topic, [])
                    if ftype == T_SUB and conn not in subs:
                        subs.append(conn)
                    if ftype == T_UNSUB and conn in subs:
                        subs.remove(conn)
                return conn.send(_frame(T_ACK, _ACK_BODY.pack(ftype, 0)))
            if ftype == T_PUB:
                return self._handle_pub(conn, body)
            if ftype == T_PING:
                return conn.send(_frame(T_PONG, body))
            return False  # unknown type: protocol violation
        except (IndexError, struct.error, UnicodeDecodeError):
            return False

    def _handle_pub(self, conn: _BrokerConn, body: bytes) -> bool:
        topic_len = body[0]
        topic = body[1 : 1 + topic_len].decode("utf-8")
        offset = 1 + topic_len
        publish_seq, timestamp_ns, payload_len = _PUB_FIXED.unpack_from(body, offset)
        offset += _PUB_FIXED.size
        if payload_len > self.max_payload:
            return False
        payload = body[offset : offset + payload_len]
        if len(payload) != payload_len:
            return False
        (crc,) = _CRC.unpack_from(body, offset + payload_len)
        if crc != zlib.crc32(payload):
            return False  # corrupted in flight; drop the connection
        deliver = _frame(
            T_DELIVER,
            bytes([topic_len])
            + body[1 : 1 + topic_len]
            + _DELIVER_FIXED.pack(conn.client_id, publish_seq, timestamp_ns, payload_len)
            + payload
            + _CRC.pack(crc),
        )
        with self._lock:
            targets = list(self._subs.get(topic, ()))
        for target in targets:
            if target.send(deliver):
                self.delivered_count += 1
        return conn.send(_frame(T_ACK, _ACK_BODY.pack(T_PUB, publish_seq)))


class TwinClient:
    """One endpoint attached to the broker.

    Publish/subscribe/unsubscribe block on the broker's ack; deliveries
    land in an internal queue drained with :meth:`get`.  Payload checksums
    are verified on receipt.
    """

    def __init__(self, address: tuple[str, int], name: str = "", timeout: float = 10.0):
        self.name = name
        self.timeout = timeout
        self._sock = socket.create_connection(address, timeout=timeout)
        # The connect timeout must not linger on the socket: the reader
        # blocks between frames for as long as the broker stays quiet, and
        # a lingering timeout would make it mistake idleness for death.
        self._sock.settimeout(None)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        _bound_sends(self._sock)
        self._inbox: Queue = Queue()
        self._acks: Queue = Queue()
        self._pongs: Queue = Queue()
        self._closed = threading.Event()
        self._send_lock = threading.Lock()
        self._seq: dict[str, int] = {}
        self._seq_lock = threading.Lock()
        self.client_id = 0
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()
        name_bytes = (name or "").encode("utf-8")
        self._send(_frame(T_CONNECT, struct.pack("<H", len(name_bytes)) + name_bytes))
        self.client_id = self._wait_ack(T_CONNECT)

    def _send(self, data: bytes) -> None:
        if self._closed.is_set():
            raise NotConnectedError("client is closed")
        with self._send_lock:
            try:
                self._sock.sendall(data)
            except OSError as exc:
                self._closed.set()
                raise NotConnectedError(f"send failed: {exc}") from exc

    def _wait_ack(self, expected_type: int) -> int:
        deadline = time.monotonic() + self.timeout
        while True:
            remain = deadline - time.monotonic()
            if remain <= 0:
                raise BrokerError(f"timed out waiting for ack of frame type {expected_type}")
            try:
                acked_type, value = self._acks.get(timeout=remain)
            except Empty:
                continue
            if acked_type == expected_type:
                return value

    def _read_loop(self) -> None:
        max_frame = DEFAULT_MAX_PAYLOAD + MAX_TOPIC_BYTES + 64
        while not self._closed.is_set():
            got = _read_frame(self._sock, max_frame)
            if got is None:
                self._closed.set()
                return
            ftype, body = got
            if ftype == T_ACK:
                self._acks.put(_ACK_BODY.unpack(body))
            elif ftype == T_PONG:
                self._pongs.put(body)
            elif ftype == T_DELIVER:
                try:
                    self._inbox.put(self._decode_deliver(body))
                except IntegrityError as exc:
                    self._inbox.put(exc)

    @staticmethod
    def _decode_deliver(body: bytes) -> DeliveredMessage:
        topic_len = body[0]
        topic = body[1 : 1 + topic_len].decode("utf-8")
        offset = 1 + topic_len
        sender_id, publish_seq, timestamp_ns, payload_len = _DELIVER_FIXED.unpack_from(
            body, offset
        )
        offset += _DELIVER_FIXED.size
        payload = body[offset : offset + payload_len]
        (crc,) = _CRC.unpack_from(body, offset + payload_len)
        if crc != zlib.crc32(payload):
            raise IntegrityError(f"checksum mismatch on topic {topic!r}")
        return DeliveredMessage(sender_id, topic, payload, publish_seq, timestamp_ns)

    def subscribe(self, topic: str) -> None:
        """Blocking; effective for messages published after the ack."""
        encoded = _check_topic(topic)
        self._send(_frame(T_SUB, bytes([len(encoded)]) + encoded))
        self._wait_ack(T_SUB)

    def unsubscribe(self, topic: str) -> None:
        encoded = _check_topic(topic)
        self._send(_frame(T_UNSUB, bytes([len(encoded)]) + encoded))
        self._wait_ack(T_UNSUB)

    def publish(self, topic: str, payload: bytes, wait_ack: bool = True) -> int:
        """Send one message; returns its per-(client, topic) sequence number."""
        encoded = _check_topic(topic)
        if len(payload) > DEFAULT_MAX_PAYLOAD:
            raise PayloadTooLargeError(
                f"payload is {len(payload)} bytes, maximum {DEFAULT_MAX_PAYLOAD}"
            )
        with self._seq_lock:
            seq = self._seq.get(topic, 0)
            self._seq[topic] = seq + 1
        body = (
            bytes([len(encoded)])
            + encoded
            + _PUB_FIXED.pack(seq, time.time_ns(), len(payload))
            + payload
            + _CRC.pack(zlib.crc32(payload))
        )
        self._send(_frame(T_PUB, body))
        if wait_ack:
            self._wait_ack(T_PUB)
        return seq

    def get(self, timeout: float | None = None) -> DeliveredMessage | None:
        """Next delivered message, or None on timeout.  Raises
        :class:`IntegrityError` if the delivery failed its checksum."""
        try:
            msg = self._inbox.get(timeout=timeout)
        except Empty:
            return None
        if isinstance(msg, IntegrityError):
            raise msg
        return msg

    def ping(self, payload: bytes = b"") -> float:
        """Round trip to the broker and back, in seconds."""
        token = time.monotonic_ns() & 0xFFFFFFFFFFFFFFFF
        t0 = time.perf_counter()
        self._send(_frame(T_PING, _PING_FIXED.pack(token, len(payload)) + payload))
        deadline = time.monotonic() + self.timeout
        while True:
            remain = deadline - time.monotonic()
            if remain <= 0:
                raise BrokerError("ping timed out")
            try:
                body = self._pongs.get(timeout=remain)
            except Empty:
                continue
            (got_token, _) = _PING_FIXED.unpack_from(body, 0)
            if got_token == token:
                return time.perf_counter() - t0

    def close(self) -> None:
        self._closed.set()
        # shutdown (not just close) so the FIN goes out now and the reader
        # thread's blocking recv returns instead of pinning the fd open --
        # otherwise the broker keeps delivering to a subscriber that will
        # never drain again.
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self._sock.close()
        except OSError:
            pass
        if self._reader is not threading.current_thread():
            self._reader.join(timeout=1.0)

    def __enter__(self) -> "TwinClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


@dataclass(frozen=True)
class LatencyRow:
    """One (payload size, direction) aggregate of the latency harness."""

    size_bytes: int
    direction: str  # "real_to_twin" or "twin_to_real"
    mean_ms: float
    p50_ms: float
    p95_ms: float
    n: int
    failed: bool = False


@dataclass
class LatencyReport:
    rows: list[LatencyRow] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["size_bytes", "direction", "mean_ms", "p50_ms", "p95_ms", "n"])
            for row in self.rows:
                writer.writerow(
                    [
                        row.size_bytes,
                        row.direction,
                        f"{row.mean_ms:.3f}",
                        f"{row.p50_ms:.3f}",
                        f"{row.p95_ms:.3f}",
                        row.n,
                    ]
                )

    def to_text(self) -> str:
        """Aligned two-direction table, one row per payload size."""
        by_size: dict[int, dict[str, LatencyRow]] = {}
        for row in self.rows:
            by_size.setdefault(row.size_bytes, {})[row.direction] = row
        lines = [
            f"{'Packet Size':<14}{'Real to Twin [ms]':>20}{'Twin to Real [ms]':>20}",
            "-" * 54,
        ]
        for size in sorted(by_size):
            cells = []
            for direction in ("real_to_twin", "twin_to_real"):
                row = by_size[size].get(direction)
                if row is None or row.failed:
                    cells.append("unresponsive")
                else:
                    cells.append(f"{row.mean_ms:.3f}")
            lines.append(f"{format_size(size):<14}{cells[0]:>20}{cells[1]:>20}")
        lines.append("")
        lines.append(
            "One-way figures are RTT/2 measured on a single clock; both ends "
            "of each exchange ran on this host."
        )
        return "\n".join(lines)


def format_size(n: int) -> str:
    """1 -> '1 Byte', 10240 -> '10 Kilobytes', 1048576 -> '1 Megabyte'."""
    for unit, name in ((1024 * 1024, "Megabyte"), (1024, "Kilobyte"), (1, "Byte")):
        if n % unit == 0 and n >= unit:
            count = n // unit
            plural = "s" if count != 1 else ""
            return f"{count} {name}{plural}"
    return f"{n} Bytes"


def _percentile(sorted_vals: list[float], q: float) -> float:
    if not sorted_vals:
        return math.nan
    idx = q * (len(sorted_vals) - 1)
    lo = math.floor(idx)
    hi = math.ceil(idx)
    if lo == hi:
        return sorted_vals[lo]
    frac = idx - lo
    return sorted_vals[lo] * (1 - frac) + sorted_vals[hi] * frac


def _echo_loop(client: TwinClient, in_topic: str, out_topic: str, stop: threading.Event) -> None:
    while not stop.is_set():
        msg = client.get(timeout=0.1)
        if msg is None or msg.topic != in_topic:
            continue
        try:
            client.publish(out_topic, msg.payload, wait_ack=False)
        except BrokerError:
            return


def measure_latency(
    address: tuple[str, int] | None = None,
    sizes: tuple[int, ...] = DEFAULT_SIZES,
    samples: int = 100,
    seed: int = 0,
    timeout: float = 5.0,
) -> LatencyReport:
    """Characterize broker latency with timed echo exchanges.

    Two endpoints connect to the broker; for each payload size the
    initiating side publishes seeded random bytes and waits for the far
    side's echo, ``samples`` times per direction, after one uncounted
    warm-up.  One-way latency is RTT/2 on the initiator's clock.  An
    unresponsive far side marks that row failed without aborting the rest.
    """
    import numpy as np

    own_broker: TwinBroker | None = None
    if address is None:
        own_broker = TwinBroker().start()
        address = own_broker.address
    rng = np.random.default_rng(seed)
    report = LatencyReport()
    stop = threading.Event()
    try:
        # Forward path: a "real"-side initiator publishes, the twin echoes.
        # Reverse path: the roles swap.  Each echo endpoint is a dedicated
        # client whose inbox is owned by its echo thread.
        real = TwinClient(address, "real-echo")
        twin = TwinClient(address, "twin-echo")
        twin.subscribe("rtt/fwd/ping")
        real.subscribe("rtt/rev/ping")
        echo_threads = [
            threading.Thread(
                target=_echo_loop, args=(twin, "rtt/fwd/ping", "rtt/fwd/echo", stop),
                daemon=True,
            ),
            threading.Thread(
                target=_echo_loop, args=(real, "rtt/rev/ping", "rtt/rev/echo", stop),
                daemon=True,
            ),
        ]
        for t in echo_threads:
            t.start()
        for size in sizes:
            payload = rng.integers(0, 256, size=size, dtype=np.uint8).tobytes()
            for direction, topic in (
                ("real_to_twin", "rtt/fwd"),
                ("twin_to_real", "rtt/rev"),
            ):
                initiator = TwinClient(address, f"init-{direction}")
                initiator.subscribe(f"{topic}/echo")
                rtts: list[float] = []
                failed = False
                for i in range(samples + 1):  # first exchange is warm-up
                    t0 = time.perf_counter()
                    initiator.publish(f"{topic}/ping", payload, wait_ack=False)
                    got = None
                    deadline = time.monotonic() + timeout
                    while time.monotonic() < deadline:
                        msg = initiator.get(timeout=0.1)
                        if msg is not None and msg.payload == payload:
                            got = msg
                            break
                    if got is None:
                        failed = True
                        break
                    if i > 0:
                        rtts.append(time.perf_counter() - t0)
                initiator.close()
                if failed or not rtts:
                    report.rows.append(
                        LatencyRow(size, direction, math.nan, math.nan, math.nan, 0, True)
                    )
                    continue
                one_way = sorted(r * 1000.0 / 2.0 for r in rtts)
                report.rows.append(
                    LatencyRow(
                        size_bytes=size,
                        direction=direction,
                        mean_ms=sum(one_way) / len(one_way),
                        p50_ms=_percentile(one_way, 0.50),
                        p95_ms=_percentile(one_way, 0.95),
                        n=len(one_way),
                    )
                )
        stop.set()
        real.close()
        twin.close()
    finally:
        stop.set()
        if own_broker is not None:
            own_broker.stop()
    return report
