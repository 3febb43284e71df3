"""Ordered steering distribution: client -> head -> every rank.

The head assigns each accepted command a contiguous sequence number and a
deterministic application step (latest observed sim step + delay_steps), so
every rank mutates identical state at an identical step boundary.  Ranks
acknowledge per command; the head tracks the acknowledged low-water mark and
declares a rank lost after an ack timeout.

Visualization parameters ride the same connections but are fanned out to the
render loops only, tagged with an apply-at-frame so all ranks switch cameras
on the same composited frame; they never touch simulation state.

Wire formats (little-endian):
  command  "STER" seq u64, apply_at_step u64, kind u8, name_len u16, name, value f64
  ack      "SACK" rank u16, seq u64
  viz      "VIZP" apply_at_frame u64, kind u8, count u16, values f64 x count
"""

from __future__ import annotations

import logging
import struct
import threading
import time
from dataclasses import dataclass, field

log = logging.getLogger(__name__)

STER_FMT = "<4sQQBH"
STER_FMT_SIZE = struct.calcsize(STER_FMT)
SACK_FMT = "<4sHQ"
SACK_SIZE = struct.calcsize(SACK_FMT)
VIZP_FMT = "<4sQBH"
VIZP_FMT_SIZE = struct.calcsize(VIZP_FMT)

KIND_SET_PARAM = 0
KIND_PAUSE = 1
KIND_RESUME = 2
KIND_TERMINATE = 3

KIND_NAMES = {
    KIND_SET_PARAM: "set_param",
    KIND_PAUSE: "pause",
    KIND_RESUME: "resume",
    KIND_TERMINATE: "terminate",
}
KIND_IDS = {name: kid for kid, name in KIND_NAMES.items()}

CONTROL_KINDS = ("pause", "resume", "terminate")

VIZ_SET_CAMERA = 16
VIZ_SET_COLOR_RANGE = 17
VIZ_SET_RADIUS = 18
VIZ_SET_MODE = 19

DEFAULT_DELAY_STEPS = 2
ACK_TIMEOUT_S = 2.0

# parameters the head accepts for SetParam; value predicate rejects nonsense
# before it is ever broadcast
ACCEPTED_PARAMS = {
    "dt": lambda v: v > 0,
    "target_temperature": lambda v: True,
}


@dataclass(frozen=True)
class SteeringCommand:
    seq: int
    kind: str  # set_param | pause | resume | terminate
    apply_at_step: int
    name: str = ""
    value: float = 0.0
    issued_at: float = 0.0

    def encode(self) -> bytes:
        name_bytes = self.name.encode()
        return (
            struct.pack(STER_FMT, b"STER", self.seq, self.apply_at_step,
                        KIND_IDS[self.kind], len(name_bytes))
            + name_bytes
            + struct.pack("<d", self.value)
        )


def decode_command(data: bytes, offset: int = 0) -> tuple[SteeringCommand, int]:
    magic, seq, apply_at, kind_id, name_len = struct.unpack_from(STER_FMT, data, offset)
    if magic != b"STER":
        raise ValueError(f"bad steering magic {magic!r}")
    pos = offset + STER_FMT_SIZE
    name = data[pos:pos + name_len].decode()
    pos += name_len
    (value,) = struct.unpack_from("<d", data, pos)
    pos += 8
    if kind_id not in KIND_NAMES:
        raise ValueError(f"unknown steering kind id {kind_id}")
    return SteeringCommand(seq, KIND_NAMES[kind_id], apply_at, name, value), pos


def encode_ack(rank: int, seq: int) -> bytes:
    return struct.pack(SACK_FMT, b"SACK", rank, seq)


def decode_ack(data: bytes, offset: int = 0) -> tuple[int, int]:
    magic, rank, seq = struct.unpack_from(SACK_FMT, data, offset)
    if magic != b"SACK":
        raise ValueError(f"bad ack magic {magic!r}")
    return rank, seq


@dataclass(frozen=True)
class VizParam:
    kind: int  # VIZ_* id
    values: tuple
    apply_at_frame: int = 0

    def encode(self) -> bytes:
        return (struct.pack(VIZP_FMT, b"VIZP", self.apply_at_frame, self.kind, len(self.values))
                + struct.pack(f"<{len(self.values)}d", *self.values))


def decode_viz(data: bytes, offset: int = 0) -> tuple[VizParam, int]:
    magic, apply_at, kind, count = struct.unpack_from(VIZP_FMT, data, offset)
    if magic != b"VIZP":
        raise ValueError(f"bad viz magic {magic!r}")
    pos = offset + VIZP_FMT_SIZE
    values = struct.unpack_from(f"<{count}d", data, pos)
    return VizParam(kind, values, apply_at), pos + count * 8


class Rejected(ValueError):
    """Submission refused by the head; the reason goes back to the client."""


class SteeringHead:
    """Sequencer and fan-out hub, hosted on the head node.

    Rank transports register a sink callable taking encoded command bytes;
    acks flow back via .ack().  Submission is thread-safe.
    """

    def __init__(self, rank_count: int, delay_steps: int = DEFAULT_DELAY_STEPS,
                 ack_timeout_s: float = ACK_TIMEOUT_S):
        self.rank_count = rank_count
        self.delay_steps = delay_steps
        self.ack_timeout_s = ack_timeout_s
        self._lock = threading.Lock()
        self._next_seq = 1
        self._observed_step = 0
        self._observed_frame = 0
        self._sinks: dict[int, object] = {}
        self._acked: dict[int, int] = {}  # rank -> highest contiguous acked seq
        self._pending: dict[int, tuple[SteeringCommand, float, set]] = {}
        self._lost: set[int] = set()
        self.command_log: list[SteeringCommand] = []

    # transports ---------------------------------------------------------

    def add_rank_sink(self, rank: int, sink) -> None:
        with self._lock:
            self._sinks[rank] = sink
            self._acked.setdefault(rank, 0)

    def observe_step(self, sim_step: int) -> None:
        with self._lock:
            if sim_step > self._observed_step:
                self._observed_step = sim_step

    def observe_frame(self, frame_seq: int) -> None:
        with self._lock:
            if frame_seq > self._observed_frame:
                self._observed_frame = frame_seq

    # steering path ------------------------------------------------------

    def submit(self, kind: str, name: str = "", value: float = 0.0) -> SteeringCommand:
        """Assign seq and apply step, broadcast; raises Rejected for bad input."""
        if kind == "set_param":
            check = ACCEPTED_PARAMS.get(name)
            if check is None:
                raise Rejected(f"unknown parameter {name!r}")
            if not check(value):
                raise Rejected(f"invalid value {value!r} for {name}")
        elif kind not in CONTROL_KINDS:
            raise Rejected(f"unknown command kind {kind!r}")
        with self._lock:
            cmd = SteeringCommand(
                seq=self._next_seq,
                kind=kind,
                apply_at_step=self._observed_step + self.delay_steps,
                name=name,
                value=value,
                issued_at=time.time(),
            )
            self._next_seq += 1
            self.command_log.append(cmd)
            self._pending[cmd.seq] = (cmd, time.monotonic(), set())
            sinks = list(self._sinks.items())
        self.broadcast(cmd, sinks)
        return cmd

    def broadcast(self, cmd: SteeringCommand, sinks=None) -> None:
        if sinks is None:
            with self._lock:
                sinks = list(self._sinks.items())
        data = cmd.encode()
        for rank, sink in sinks:
            try:
                sink(data)
            except Exception as exc:
                log.warning("head: rank %d stream broken: %s", rank, exc)
                self._mark_lost(rank)

    def submit_viz(self, kind: int, values: tuple) -> VizParam:
        """Stamp a viz parameter with its apply-at frame.  Delivery is the
        caller's job and must go to render loops only: viz traffic never
        touches the simulation path."""
        if kind not in (VIZ_SET_CAMERA, VIZ_SET_COLOR_RANGE, VIZ_SET_RADIUS, VIZ_SET_MODE):
            raise Rejected(f"unknown viz kind {kind}")
        with self._lock:
            return VizParam(kind, tuple(values), self._observed_frame + self.delay_steps)

    # ack tracking ---------------------------------------------------------

    def ack(self, rank: int, seq: int) -> None:
        with self._lock:
            entry = self._pending.get(seq)
            if entry is not None:
                entry[2].add(rank)
                if len(entry[2]) >= len(self._sinks):
                    del self._pending[seq]
            if seq == self._acked.get(rank, 0) + 1:
                self._acked[rank] = seq

    def low_water_mark(self) -> int:
        with self._lock:
            if not self._acked:
                return 0
            return min(self._acked.values())

    def check_timeouts(self) -> None:
        now = time.monotonic()
        with self._lock:
            for seq, (cmd, sent_at, acked_by) in list(self._pending.items()):
                if now - sent_at > self.ack_timeout_s:
                    for rank in self._sinks:
                        if rank not in acked_by:
                            log.warning("head: rank %d missed ack for seq %d", rank, seq)
                            self._lost.add(rank)
                    del self._pending[seq]

    def _mark_lost(self, rank: int) -> None:
        with self._lock:
            self._lost.add(rank)

    def rank_states(self) -> list[bool]:
        self.check_timeouts()
        with self._lock:
            return [r not in self._lost for r in range(self.rank_count)]

    @property
    def degraded(self) -> bool:
        return not all(self.rank_states())


class RankInbox:
    """Per-rank command queue drained only at step boundaries."""

    def __init__(self, rank: int):
        self.rank = rank
        self._lock = threading.Lock()
        self._queue: list[SteeringCommand] = []
        self.late_count = 0
        self.acks_sent: list[int] = []

    def feed(self, cmd: SteeringCommand) -> None:
        with self._lock:
            self._queue.append(cmd)
            self._queue.sort(key=lambda c: c.seq)

    def feed_bytes(self, data: bytes) -> None:
        cmd, _ = decode_command(data)
        self.feed(cmd)

    def poll(self, current_step: int, paused: bool = False) -> list[SteeringCommand]:
        """Commands to apply at this boundary, in seq order.

        Step-gated: apply_at_step <= current_step (later arrivals count as
        late).  While paused the step counter is frozen, so control commands
        (and everything queued before them) bypass the gate; they apply at
        the frozen step identically on every rank.
        """
        with self._lock:
            bypass_seq = -1
            if paused:
                control = [c.seq for c in self._queue if c.kind in CONTROL_KINDS]
                if control:
                    bypass_seq = max(control)
            ready = [c for c in self._queue
                     if c.apply_at_step <= current_step or c.seq <= bypass_seq]
            self._queue = [c for c in self._queue if c not in ready]
            self.late_count += sum(1 for c in ready if c.apply_at_step < current_step)
        return ready


class RenderInbox:
    """Per-rank viz-parameter queue, applied on frame boundaries."""

    def __init__(self):
        self._lock = threading.Lock()
        self._queue: list[VizParam] = []

    def feed(self, param: VizParam) -> None:
        with self._lock:
            self._queue.append(param)

    def feed_bytes(self, data: bytes) -> None:
        param, _ = decode_viz(data)
        self.feed(param)

    def poll(self, current_frame: int) -> list[VizParam]:
        with self._lock:
            ready = [p for p in self._queue if p.apply_at_frame <= current_frame]
            self._queue = [p for p in self._queue if p.apply_at_frame > current_frame]
        return ready
