"""Pub/sub bus, Twist wire codec, UDP transport and the fixed-rate heartbeat.

Frame layout (68 bytes, little-endian)::

    0   u16  magic 0x4C56 ("VL" on the wire, low byte first)
    2   u8   version (1)
    3   u8   flags (bit 0 = stale)
    4   u32  seq
    8   u64  timestamp_ns
    16  6xf64 linear x,y,z then angular x,y,z
    64  u32  crc32 of bytes 0..63
"""

from __future__ import annotations

import logging
import math
import os
import queue
import socket
import struct
import threading
import time
import zlib
from collections import deque
from dataclasses import dataclass
from typing import Any, Callable, Protocol

from .action_space import ActionCommand

log = logging.getLogger(__name__)

FRAME_MAGIC = 0x4C56
FRAME_VERSION = 1
FRAME_SIZE = 68
FLAG_STALE = 0x01
DEFAULT_PORT = 47474
PORT_ENV = "LITEVLA_BRIDGE_PORT"

_HEADER = struct.Struct("<HBBIQ")
_BODY = struct.Struct("<HBBIQ6d")
_CRC = struct.Struct("<I")


@dataclass(frozen=True)
class TwistMessage:
    linear: tuple[float, float, float] = (0.0, 0.0, 0.0)
    angular: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @classmethod
    def from_command(cls, cmd: ActionCommand) -> "TwistMessage":
        return cls((float(cmd.linear_velocity), 0.0, 0.0), (0.0, 0.0, float(cmd.angular_velocity)))

    def to_command(self) -> ActionCommand:
        return ActionCommand(self.linear[0], self.angular[2])


ZERO_TWIST = TwistMessage()


@dataclass(frozen=True)
class CommandFrame:
    """What the heartbeat publishes on its output topic each tick."""

    twist: TwistMessage
    seq: int
    timestamp_ns: int
    stale: bool


# --- wire codec -------------------------------------------------------------


class FrameError(ValueError):
    pass


class FrameLengthError(FrameError):
    pass


class FrameMagicError(FrameError):
    pass


class FrameVersionError(FrameError):
    pass


class FrameCrcError(FrameError):
    pass


def encode_twist(msg: TwistMessage, seq: int, timestamp_ns: int, stale: bool = False) -> bytes:
    body = _BODY.pack(
        FRAME_MAGIC,
        FRAME_VERSION,
        FLAG_STALE if stale else 0,
        seq,
        timestamp_ns,
        *msg.linear,
        *msg.angular,
    )
    return body + _CRC.pack(zlib.crc32(body))


def decode_twist(data: bytes) -> tuple[TwistMessage, int, int, bool]:
    if len(data) != FRAME_SIZE:
        raise FrameLengthError(f"frame must be {FRAME_SIZE} bytes, got {len(data)}")
    data = bytes(data)
    # crc first so a corrupted magic/version byte is still reported as corruption
    (crc,) = _CRC.unpack_from(data, 64)
    if zlib.crc32(data[:64]) != crc:
        raise FrameCrcError("crc mismatch")
    magic, version, flags, seq, ts, *vals = _BODY.unpack_from(data)
    if magic != FRAME_MAGIC:
        raise FrameMagicError(f"bad magic 0x{magic:04X}")
    if version != FRAME_VERSION:
        raise FrameVersionError(f"unsupported frame version {version}")
    return TwistMessage(tuple(vals[:3]), tuple(vals[3:])), seq, ts, bool(flags & FLAG_STALE)


# --- clocks -----------------------------------------------------------------


class Clock(Protocol):
    def now_ns(self) -> int: ...


class MonotonicClock:
    def now_ns(self) -> int:
        return time.monotonic_ns()


class SimClock:
    """Manually advanced integer-nanosecond clock."""

    def __init__(self, start_ns: int = 0):
        self._t = int(start_ns)

    def now_ns(self) -> int:
        return self._t

    def advance_to(self, t_ns: int) -> None:
        if t_ns < self._t:
            raise ValueError("simulated clock cannot run backwards")
        self._t = int(t_ns)


# --- bus --------------------------------------------------------------------


class Subscription:
    """Handle returned by :meth:`Bus.subscribe`.

    With a callback, delivery is synchronous on the publisher's thread
    (serialized per subscription); otherwise messages queue until read.
    """

    def __init__(self, bus: "Bus", topic: str, callback: Callable[[Any], None] | None):
        self.bus = bus
        self.topic = topic
        self._callback = callback
        self._queue: queue.SimpleQueue = queue.SimpleQueue()
        self._deliver_lock = threading.Lock()
        self.closed = False

    def _deliver(self, msg: Any) -> None:
        if self._callback is None:
            self._queue.put(msg)
            return
        with self._deliver_lock:
            self._callback(msg)

    def get(self, timeout: float | None = None) -> Any:
        return self._queue.get(timeout=timeout)

    def get_nowait(self) -> Any:
        return self._queue.get_nowait()

    def drain(self) -> list:
        out = []
        while True:
            try:
                out.append(self._queue.get_nowait())
            except queue.Empty:
                return out

    def close(self) -> None:
        self.bus._unsubscribe(self)
        self.closed = True


class _Topic:
    def __init__(self, name: str):
        self.name = name
        self.retained: Any = None
        self.has_retained = False
        self.subscribers: list[Subscription] = []


class Bus:
    """In-process topic bus with one retained message per topic."""

    def __init__(self):
        self._lock = threading.RLock()
        self._topics: dict[str, _Topic] = {}

    def _topic(self, name: str) -> _Topic:
        t = self._topics.get(name)
        if t is None:
            t = self._topics[name] = _Topic(name)
        return t

    def publish(self, topic: str, message: Any) -> None:
        # holding the lock across delivery keeps per-publisher order for all subscribers
        with self._lock:
            t = self._topic(topic)
            t.retained = message
            t.has_retained = True
            subs = list(t.subscribers)
            for sub in subs:
                sub._deliver(message)

    def subscribe(self, topic: str, callback: Callable[[Any], None] | None = None) -> Subscription:
        with self._lock:
            t = self._topic(topic)
            sub = Subscription(self, topic, callback)
            t.subscribers.append(sub)
            if t.has_retained:
                sub._deliver(t.retained)
            return sub

    def retained(self, topic: str) -> Any:
        with self._lock:
            t = self._topics.get(topic)
            return t.retained if t is not None else None

    def _unsubscribe(self, sub: Subscription) -> None:
        with self._lock:
            t = self._topics.get(sub.topic)
            if t is not None and sub in t.subscribers:
                t.subscribers.remove(sub)


def publish(bus: Bus, topic: str, message: Any) -> None:
    bus.publish(topic, message)


def subscribe(bus: Bus, topic: str, callback: Callable[[Any], None] | None = None) -> Subscription:
    return bus.subscribe(topic, callback)


# --- heartbeat --------------------------------------------------------------


class HeartbeatController:
    """Republishes the latest command on ``output_topic`` at a fixed rate.

    Commands arriving on ``command_topic`` are :class:`TwistMessage` (or
    :class:`ActionCommand`) values, timestamped on receipt with the injected
    clock. A tick whose latest command is older than ``staleness_limit``
    seconds, or that has no command at all, emits a zero twist flagged stale.

    Under a :class:`SimClock` the owner drives ticks by calling
    :meth:`run_until`; with a wall clock :meth:`start` runs a thread.
    """

    def __init__(
        self,
        bus: Bus,
        command_topic: str,
        output_topic: str,
        rate: float = 100.0,
        staleness_limit: float = 0.301,
        clock: Clock | None = None,
    ):
        if not rate > 0 or not math.isfinite(rate):
            raise ValueError(f"rate must be positive and finite, got {rate}")
        if not staleness_limit > 0:
            raise ValueError("staleness_limit must be positive (use math.inf to disable)")
        self.bus = bus
        self.command_topic = command_topic
        self.output_topic = output_topic
        self.rate = float(rate)
        self.staleness_limit = staleness_limit
        self.clock = clock or MonotonicClock()
        self.period_ns = 1e9 / self.rate
        self.ticks = 0
        self.stale_ticks = 0
        self._latest: TwistMessage | None = None
        self._latest_ns = 0
        self._cmd_lock = threading.Lock()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._start_ns = self.clock.now_ns()
        self._sub = bus.subscribe(command_topic, self._on_command)

    def _on_command(self, msg) -> None:
        if isinstance(msg, ActionCommand):
            msg = TwistMessage.from_command(msg)
        with self._cmd_lock:
            self._latest = msg
            self._latest_ns = self.clock.now_ns()

    def next_tick_ns(self) -> int:
        return self._start_ns + round(self.ticks * self.period_ns)

    def tick(self) -> CommandFrame:
        now = self.clock.now_ns()
        with self._cmd_lock:
            latest, stamp = self._latest, self._latest_ns
        stale = latest is None or (now - stamp) > self.staleness_limit * 1e9
        frame = CommandFrame(ZERO_TWIST if stale else latest, self.ticks, now, stale)
        self.ticks += 1
        self.stale_ticks += stale
        self.bus.publish(self.output_topic, frame)
        return frame

    def run_until(self, t_ns: int, clock: SimClock | None = None) -> int:
        """Fire every tick scheduled strictly before ``t_ns`` (simulated clock)."""
        clock = clock or self.clock
        fired = 0
        while self.next_tick_ns() < t_ns:
            clock.advance_to(self.next_tick_ns())
            self.tick()
            fired += 1
        return fired

    def start(self) -> "HeartbeatController":
        if self._thread is not None:
            raise RuntimeError("heartbeat already running")
        self._start_ns = self.clock.now_ns()
        self.ticks = 0
        self._thread = threading.Thread(target=self._loop, name="heartbeat", daemon=True)
        self._thread.start()
        return self

    def _loop(self) -> None:
        while not self._stop.is_set():
            wait = (self.next_tick_ns() - self.clock.now_ns()) / 1e9
            if wait > 0 and self._stop.wait(wait):
                break
            self.tick()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
            self._thread = None
        self._sub.close()


def heartbeat_controller(bus, command_topic, output_topic, rate=100.0, staleness_limit=0.301, clock=None) -> HeartbeatController:
    return HeartbeatController(bus, command_topic, output_topic, rate, staleness_limit, clock)


# --- UDP transport ----------------------------------------------------------


def bridge_port(default: int = DEFAULT_PORT) -> int:
    raw = os.environ.get(PORT_ENV)
    return int(raw) if raw else default


class UdpBridge:
    """Forwards a bus topic to UDP frames and UDP frames back onto a topic.

    Outbound: every :class:`CommandFrame` / :class:`TwistMessage` on
    ``out_topic`` is sent as one datagram to ``peer``. Inbound: valid frames
    received on the bound socket are published to ``in_topic`` as
    :class:`CommandFrame`; corrupt frames are counted and dropped.
    """

    def __init__(
        self,
        bus: Bus,
        in_topic: str | None = None,
        out_topic: str | None = None,
        bind: tuple[str, int] = ("127.0.0.1", DEFAULT_PORT),
        peer: tuple[str, int] | None = None,
        clock: Clock | None = None,
    ):
        self.bus = bus
        self.in_topic = in_topic
        self.out_topic = out_topic
        self.peer = peer
        self.clock = clock or MonotonicClock()
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind(bind)
        self.sock.settimeout(0.05)
        self.rejected = 0
        self.received = 0
        self.sent = 0
        self._seq = 0
        self._last_seq: dict[tuple, int] = {}
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._sub = bus.subscribe(out_topic, self._send) if out_topic and peer else None

    @property
    def address(self) -> tuple[str, int]:
        return self.sock.getsockname()

    def _send(self, msg) -> None:
        if isinstance(msg, CommandFrame):
            twist, stale = msg.twist, msg.stale
        elif isinstance(msg, ActionCommand):
            twist, stale = TwistMessage.from_command(msg), False
        else:
            twist, stale = msg, False
        frame = encode_twist(twist, self._seq & 0xFFFFFFFF, self.clock.now_ns(), stale)
        self._seq += 1
        self.sock.sendto(frame, self.peer)
        self.sent += 1

    def receive_once(self) -> CommandFrame | None:
        try:
            data, addr = self.sock.recvfrom(2048)
        except socket.timeout:
            return None
        try:
            twist, seq, ts, stale = decode_twist(data)
        except FrameError as exc:
            self.rejected += 1
            log.debug("dropped frame from %s: %s", addr, exc)
            return None
        last = self._last_seq.get(addr)
        if last is not None and seq <= last:
            self.rejected += 1
            log.debug("dropped out-of-order frame seq=%d from %s", seq, addr)
            return None
        self._last_seq[addr] = seq
        self.received += 1
        frame = CommandFrame(twist, seq, ts, stale)
        if self.in_topic:
            self.bus.publish(self.in_topic, frame)
        return frame

    def start(self) -> "UdpBridge":
        self._thread = threading.Thread(target=self._loop, name="udp-bridge", daemon=True)
        self._thread.start()
        return self

    def _loop(self) -> None:
        while not self._stop.is_set():
            self.receive_once()

    def close(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
        if self._sub is not None:
            self._sub.close()
        self.sock.close()
