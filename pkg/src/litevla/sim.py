"""Synthetic closed-loop world, reasoning backends and the latency benchmark."""

from __future__ import annotations

import base64
import logging
import math
import selectors
import shlex
import subprocess
import time
from dataclasses import dataclass, field, replace
from typing import Protocol, Sequence

import numpy as np

from .action_space import (
    DEFAULT_VOCAB,
    ActionCommand,
    ActionTokenSeq,
    ActionVocabulary,
    DecodeError,
    encode_command,
)
from .bridge import Bus, HeartbeatController, SimClock, TwistMessage
from .parser import ActionRejected, format_action, parse_action_line, parse_tokens
from .policy import (
    DEFAULT_INSTRUCTIONS,
    DecodeConfig,
    GoalInstruction,
    Observation,
    PolicyParams,
    greedy_decode,
)
from .stats import LatencyReport, compute_stats

log = logging.getLogger(__name__)

ARENA = 2.0
TARGET_MARGIN = 1.8
COLOR_NAMES = ("red", "green", "blue")
V_GAIN, V_MAX = 0.5, 0.5
W_GAIN, W_MAX = 2.0, 1.5
# distance that maps to the top image row
VIEW_RANGE = 2.0 * math.sqrt(2.0) * ARENA

BACKEND_PROVENANCE = {"n_ctx": 512, "max_tokens": 12, "layers": 42}


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]; values already in range are returned unchanged."""
    if -math.pi < a <= math.pi:
        return a
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


@dataclass(frozen=True)
class Target:
    x: float
    y: float
    color: int


@dataclass
class WorldState:
    x: float
    y: float
    heading: float
    targets: list[Target]
    active_goal: int = 0
    time: float = 0.0

    @property
    def pose(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.heading)

    @property
    def active_target(self) -> Target:
        return self.targets[self.active_goal]

    def distance(self) -> float:
        t = self.active_target
        return math.hypot(t.x - self.x, t.y - self.y)

    def heading_error(self) -> float:
        t = self.active_target
        return wrap_angle(math.atan2(t.y - self.y, t.x - self.x) - self.heading)

    def goal(self) -> GoalInstruction:
        color = self.active_target.color
        return GoalInstruction(DEFAULT_INSTRUCTIONS[color], color)


def random_world(seed: int, n_targets: int = 3) -> WorldState:
    """Robot and ``n_targets`` distinctly colored targets, >= 0.5 m apart."""
    rng = np.random.default_rng(seed)
    x, y = rng.uniform(-TARGET_MARGIN, TARGET_MARGIN, 2)
    heading = wrap_angle(rng.uniform(-math.pi, math.pi))
    points = [(x, y)]
    targets = []
    colors = rng.permutation(len(COLOR_NAMES))[:n_targets]
    for color in colors:
        while True:
            tx, ty = rng.uniform(-TARGET_MARGIN, TARGET_MARGIN, 2)
            if all(math.hypot(tx - px, ty - py) >= 0.5 for px, py in points):
                break
        points.append((tx, ty))
        targets.append(Target(float(tx), float(ty), int(color)))
    return WorldState(float(x), float(y), heading, targets, int(rng.integers(n_targets)))


# --- perception ---------------------------------------------------------------


def render_observation(world: WorldState, H: int = 16, W: int = 16) -> Observation:
    """Egocentric polar view of the targets in front of the robot.

    Columns encode bearing (left edge = +90 degrees, right edge = -90),
    rows encode the square root of distance (bottom = near). Each visible
    target is splatted bilinearly over a 2x2 pixel block in its color
    channel, so sub-pixel position survives in the intensities. A target
    dead ahead lands on columns ``W/2 - 1`` and ``W/2`` with equal weight.
    """
    img = np.zeros((H, W, 3))
    c, s = math.cos(world.heading), math.sin(world.heading)
    for t in world.targets:
        dx, dy = t.x - world.x, t.y - world.y
        forward = c * dx + s * dy
        left = -s * dx + c * dy
        if forward <= 0.0:
            continue
        bearing = math.atan2(left, forward)
        dist = math.hypot(dx, dy)
        col = (W / 2 - 0.5) - bearing / (math.pi / 2) * (W / 2)
        row = (H - 0.5) - math.sqrt(min(dist, VIEW_RANGE) / VIEW_RANGE) * (H - 1)
        _splat(img[:, :, t.color], row, col)
    return Observation(np.clip(img, 0.0, 1.0), world.goal())


def _splat(channel: np.ndarray, row: float, col: float) -> None:
    H, W = channel.shape
    r0, c0 = math.floor(row), math.floor(col)
    fr, fc = row - r0, col - c0
    for r, wr in ((r0, 1.0 - fr), (r0 + 1, fr)):
        for cc, wc in ((c0, 1.0 - fc), (c0 + 1, fc)):
            if 0 <= r < H and 0 <= cc < W:
                channel[r, cc] += wr * wc


# --- expert and dynamics --------------------------------------------------------


def expert_policy(world: WorldState) -> ActionCommand:
    v = min(max(V_GAIN * world.distance(), 0.0), V_MAX)
    w = min(max(W_GAIN * world.heading_error(), -W_MAX), W_MAX)
    return ActionCommand(v, w)


def step_unicycle(pose: tuple[float, float, float], cmd: ActionCommand, dt: float) -> tuple[float, float, float]:
    x, y, th = pose
    v, w = cmd.linear_velocity, cmd.angular_velocity
    x = min(max(x + v * math.cos(th) * dt, -ARENA), ARENA)
    y = min(max(y + v * math.sin(th) * dt, -ARENA), ARENA)
    return (x, y, wrap_angle(th + w * dt))


# --- backends ---------------------------------------------------------------------


class ReasoningBackend(Protocol):
    config: dict

    def infer(self, obs: Observation, world: WorldState | None = None) -> ActionTokenSeq: ...


class ToyPolicyBackend:
    def __init__(self, params: PolicyParams, vocab: ActionVocabulary = DEFAULT_VOCAB, decode: DecodeConfig = DecodeConfig()):
        if not params.frozen:
            params = params.copy().freeze()
        self.params = params
        self.vocab = vocab
        self.decode = decode
        self.config = dict(BACKEND_PROVENANCE, n_ctx=decode.context_budget, max_tokens=decode.max_tokens)

    def infer(self, obs, world=None) -> ActionTokenSeq:
        return greedy_decode(self.params, obs, self.decode, self.vocab)


class ExpertBackend:
    """Privileged backend: reads the true world state, tokenizes the expert."""

    def __init__(self, vocab: ActionVocabulary = DEFAULT_VOCAB):
        self.vocab = vocab
        self.config = dict(BACKEND_PROVENANCE)

    def infer(self, obs, world=None) -> ActionTokenSeq:
        if world is None:
            raise ValueError("ExpertBackend needs the world state")
        return encode_command(expert_policy(world), self.vocab)


class DelayInjectingBackend:
    """Busy-waits ``delay_s`` per decision, then defers to ``inner`` (or a fixed pair)."""

    def __init__(self, delay_s: float, inner: ReasoningBackend | None = None, tokens: Sequence[int] = (16, 16)):
        self.delay_s = delay_s
        self.inner = inner
        self.tokens = ActionTokenSeq(tokens)
        self.config = dict(BACKEND_PROVENANCE, synthetic_delay_ms=delay_s * 1e3)

    def infer(self, obs, world=None) -> ActionTokenSeq:
        deadline = time.perf_counter() + self.delay_s
        while time.perf_counter() < deadline:
            pass
        if self.inner is not None:
            return self.inner.infer(obs, world)
        return self.tokens


class BackendError(RuntimeError):
    pass


class ExternalProcessBackend:
    """Line-protocol adapter around a child process.

    Request: ``OBS <base64 of float32 little-endian HxWx3 image> GOAL <id>\\n``.
    Reply: one ``ACTION <v> <w>`` line. A missing, late or malformed reply
    raises :class:`BackendError`; the closed loop turns that into a fail-safe.
    """

    def __init__(self, command: str | Sequence[str], timeout: float = 1.0, vocab: ActionVocabulary = DEFAULT_VOCAB):
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = timeout
        self.vocab = vocab
        self.config = dict(BACKEND_PROVENANCE, command=argv)
        self.proc = subprocess.Popen(argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE, bufsize=0)
        self._sel = selectors.DefaultSelector()
        self._sel.register(self.proc.stdout, selectors.EVENT_READ)
        self._buf = b""

    @staticmethod
    def request_line(obs: Observation) -> bytes:
        payload = base64.b64encode(np.ascontiguousarray(obs.image, dtype="<f4").tobytes())
        return b"OBS " + payload + b" GOAL " + str(obs.goal.goal_id).encode() + b"\n"

    def infer(self, obs, world=None) -> ActionTokenSeq:
        if self.proc.poll() is not None:
            raise BackendError(f"backend process exited with {self.proc.returncode}")
        try:
            self.proc.stdin.write(self.request_line(obs))
        except BrokenPipeError as exc:
            raise BackendError("backend closed its input") from exc
        line = self._read_line(time.monotonic() + self.timeout)
        try:
            return parse_tokens(line, self.vocab)
        except ActionRejected as exc:
            raise BackendError(f"backend reply rejected: {exc}") from exc

    def _read_line(self, deadline: float) -> bytes:
        while b"\n" not in self._buf:
            remaining = deadline - time.monotonic()
            if remaining <= 0 or not self._sel.select(remaining):
                # a late reply would desynchronize the protocol
                self.close()
                raise BackendError("backend reply timed out")
            chunk = self.proc.stdout.read(4096)
            if not chunk:
                raise BackendError("backend closed its output")
            self._buf += chunk
        line, _, self._buf = self._buf.partition(b"\n")
        return line + b"\n"

    def close(self) -> None:
        if self.proc.poll() is None:
            self.proc.kill()
        self.proc.wait()
        try:
            self._sel.close()
        except Exception:
            pass


def decode_request_line(line: bytes, H: int = 16, W: int = 16) -> tuple[np.ndarray, int]:
    """Inverse of :meth:`ExternalProcessBackend.request_line`."""
    parts = line.strip().split(b" ")
    if len(parts) != 4 or parts[0] != b"OBS" or parts[2] != b"GOAL":
        raise ValueError("malformed request line")
    img = np.frombuffer(base64.b64decode(parts[1], validate=True), dtype="<f4").astype(np.float64)
    return img.reshape(H, W, 3), int(parts[3])


# --- pipeline step ----------------------------------------------------------------


def decide(backend: ReasoningBackend, obs: Observation, world: WorldState | None, vocab: ActionVocabulary) -> tuple[ActionTokenSeq, ActionCommand]:
    """Infer, serialize to an action line, and parse it back (fail-stop)."""
    tokens = backend.infer(obs, world)
    return tokens, parse_action_line(format_action(tokens), vocab)


# --- closed loop --------------------------------------------------------------------


@dataclass(frozen=True)
class EpisodeConfig:
    controller_dt: float = 0.01
    reasoning_period: float = 0.1505
    max_duration: float = 30.0
    success_radius: float = 0.1
    goal_shift_time: float | None = None
    staleness_limit: float | None = None
    n_targets: int = 3
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.controller_dt < self.reasoning_period:
            raise ValueError("need 0 < controller_dt < reasoning_period")
        if not self.success_radius > 0:
            raise ValueError("success_radius must be positive")

    @property
    def effective_staleness(self) -> float:
        return self.staleness_limit if self.staleness_limit is not None else 2.0 * self.reasoning_period


@dataclass
class Decision:
    time: float
    tokens: tuple[int, ...] | None
    command: ActionCommand
    failsafe: bool = False


@dataclass
class EpisodeResult:
    success: bool
    steps: int
    final_distance: float
    trajectory: list[tuple[float, float, float]] = field(default_factory=list)
    decision_log: list[Decision] = field(default_factory=list)
    failsafe_count: int = 0
    stale_ticks: int = 0
    duration: float = 0.0
    shift_time: float | None = None

    def to_dict(self) -> dict:
        return {
            "success": self.success,
            "steps": self.steps,
            "final_distance": self.final_distance,
            "failsafe_count": self.failsafe_count,
            "stale_ticks": self.stale_ticks,
            "duration": self.duration,
        }


def _shift_target(world: WorldState, last_w: float, rng: np.random.Generator) -> None:
    """Teleport the active target to a spot demanding a turn against ``last_w``."""
    want = -1.0 if last_w >= 0 else 1.0
    for _ in range(10_000):
        tx, ty = rng.uniform(-TARGET_MARGIN, TARGET_MARGIN, 2)
        err = wrap_angle(math.atan2(ty - world.y, tx - world.x) - world.heading)
        if math.copysign(1.0, err) == want and math.pi / 4 <= abs(err) <= 3 * math.pi / 4 and math.hypot(tx - world.x, ty - world.y) >= 0.5:
            break
    old = world.active_target
    world.targets[world.active_goal] = Target(float(tx), float(ty), old.color)


def run_closed_loop(
    backend: ReasoningBackend,
    config: EpisodeConfig = EpisodeConfig(),
    seed: int | None = None,
    vocab: ActionVocabulary = DEFAULT_VOCAB,
    world: WorldState | None = None,
) -> EpisodeResult:
    """One simulated-clock episode.

    Reasoning fires every ``reasoning_period`` and publishes its command on
    the bus; the heartbeat republishes at ``1 / controller_dt`` and the robot
    integrates whatever the heartbeat emits. At equal timestamps the
    reasoning event runs first.
    """
    seed = config.seed if seed is None else seed
    world = world if world is not None else random_world(seed, config.n_targets)
    clock = SimClock()
    bus = Bus()
    hb = HeartbeatController(bus, "cmd_vel_request", "cmd_vel", 1.0 / config.controller_dt, config.effective_staleness, clock)
    result = EpisodeResult(False, 0, world.distance())
    shift_rng = np.random.default_rng([seed, 1])

    def on_frame(frame):
        pose = step_unicycle(world.pose, frame.twist.to_command(), config.controller_dt)
        world.x, world.y, world.heading = pose
        result.trajectory.append(pose)
        result.steps += 1

    bus.subscribe("cmd_vel", on_frame)
    period_ns = round(config.reasoning_period * 1e9)
    end_ns = round(config.max_duration * 1e9)
    shift_ns = None if config.goal_shift_time is None else round(config.goal_shift_time * 1e9)
    last_w = 0.0
    k = 0
    while True:
        t_reason, t_tick = k * period_ns, hb.next_tick_ns()
        t_next = min(t_reason, t_tick)
        if t_next >= end_ns:
            break
        if shift_ns is not None and result.shift_time is None and shift_ns <= t_next:
            clock.advance_to(shift_ns)
            _shift_target(world, last_w, shift_rng)
            result.shift_time = shift_ns / 1e9
        clock.advance_to(t_next)
        if t_reason <= t_tick:
            world.time = t_reason / 1e9
            cmd = _reason(backend, world, vocab, result)
            last_w = cmd.angular_velocity
            bus.publish("cmd_vel_request", TwistMessage.from_command(cmd))
            k += 1
        else:
            hb.tick()
            if world.distance() <= config.success_radius:
                result.success = True
                break
    result.final_distance = world.distance()
    result.stale_ticks = hb.stale_ticks
    result.duration = clock.now_ns() / 1e9
    return result


def _reason(backend, world, vocab, result: EpisodeResult) -> ActionCommand:
    obs = render_observation(world)
    try:
        tokens, cmd = decide(backend, obs, world, vocab)
    except (BackendError, DecodeError, ActionRejected) as exc:
        log.info("fail-safe at t=%.4f: %s", world.time, exc)
        cmd = ActionCommand(0.0, 0.0)
        result.failsafe_count += 1
        result.decision_log.append(Decision(world.time, None, cmd, failsafe=True))
        return cmd
    result.decision_log.append(Decision(world.time, tuple(tokens), cmd))
    return cmd


# --- dataset --------------------------------------------------------------------


def collect_dataset(
    n_episodes: int,
    seed: int = 0,
    config: EpisodeConfig = EpisodeConfig(),
    vocab: ActionVocabulary = DEFAULT_VOCAB,
    driver: ReasoningBackend | None = None,
):
    """Expert-labelled observations rendered at the reasoning cadence.

    Episode ``i`` uses a world derived from ``(seed, i)``. The expert drives
    unless ``driver`` is given, in which case the driver's commands are
    executed and the expert only labels the visited states (DAgger-style
    aggregation).
    """
    recorder = _LabellingBackend(vocab, driver)
    data = []
    for i in range(n_episodes):
        world = random_world(int(np.random.default_rng([seed, i]).integers(2**31)), config.n_targets)
        recorder.samples = []
        run_closed_loop(recorder, config, seed=seed, vocab=vocab, world=world)
        data.extend(recorder.samples)
    return data


class _LabellingBackend(ExpertBackend):
    def __init__(self, vocab, driver=None):
        super().__init__(vocab)
        self.driver = driver
        self.samples: list = []

    def infer(self, obs, world=None):
        label = super().infer(obs, world)
        self.samples.append((obs, label))
        if self.driver is None:
            return label
        return self.driver.infer(obs, world)


# --- latency benchmark ---------------------------------------------------------------


def run_latency_bench(
    backend: ReasoningBackend,
    runs: int = 300,
    warmup: int = 10,
    seed: int = 0,
    vocab: ActionVocabulary = DEFAULT_VOCAB,
    timer=time.perf_counter,
) -> LatencyReport:
    """Wall-clock end-to-end latency per decision (render + infer + parse).

    The first ``warmup`` decisions are timed but excluded from the stats.
    """
    if runs < 1:
        raise ValueError("runs after warm-up must be >= 1")
    if warmup < 0:
        raise ValueError("warmup must be >= 0")
    worlds = [random_world(seed + i) for i in range(8)]
    samples = []
    for i in range(warmup + runs):
        world = worlds[i % len(worlds)]
        t0 = timer()
        obs = render_observation(world)
        decide(backend, obs, world, vocab)
        samples.append((timer() - t0) * 1e3)
    report = compute_stats(samples[warmup:])
    return replace(report, warmup_excluded=warmup, warmup_ms=samples[:warmup])
