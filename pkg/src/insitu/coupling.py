"""One-call in-situ enablement for an existing Simulation.

`SnapshotPublisher.attach(sim)` hooks the simulation's step listeners and
publishes a snapshot to this rank's shared segment every `every` steps; the
segment is sized up front and grows through the normal reallocation
handshake if the particle count rises.  Cleanup happens at interpreter exit,
so instrumenting an existing program is genuinely two lines: the import and
the attach call.
"""

from __future__ import annotations

import atexit

from insitu.config import next_power_of_two
from insitu.shmem import HEADER_SIZE, SegmentName, SegmentWriter
from insitu.snapshot import RECORD_BYTES


class SnapshotPublisher:
    def __init__(self, writer: SegmentWriter, every: int = 1):
        self._writer = writer
        self._every = max(1, every)
        self._closed = False

    @classmethod
    def attach(cls, sim, prefix: str = "insitu", every: int | None = None) -> "SnapshotPublisher":
        capacity = next_power_of_two(2 * (HEADER_SIZE + max(1, len(sim.pos)) * RECORD_BYTES))
        writer = SegmentWriter(SegmentName(sim.rank, 0, prefix), capacity)
        publisher = cls(writer, every or sim.config.steps_per_publish)
        publisher.publish(sim)
        sim.step_listeners.append(publisher.on_step)
        atexit.register(publisher.close)
        return publisher

    def on_step(self, sim) -> None:
        if sim.sim_step % self._every == 0:
            self.publish(sim)

    def publish(self, sim) -> None:
        if not self._closed:
            self._writer = self._writer.publish(sim.snapshot()).writer

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._writer.close(terminated=True)
