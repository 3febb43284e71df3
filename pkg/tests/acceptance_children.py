"""Child-process roles for the acceptance suite's cross-process scenarios."""

import os
import sys
import time

import numpy as np

from insitu.shmem import SegmentName, SegmentReader, SegmentWriter
from insitu.snapshot import ParticleSnapshot


def patterned_snapshot(step: int, count: int) -> ParticleSnapshot:
    """Payload derived from the step: any torn mix of two snapshots differs
    somewhere from every consistent pattern."""
    value = np.float32((step % 100003) * 0.25)
    pos = np.full((count, 3), value, dtype=np.float32)
    vel = np.full((count, 3), value * 2.0, dtype=np.float32)
    return ParticleSnapshot(step, step * 1e-3, pos, vel)


def writer_torn(prefix: str, stop_path: str, count: int = 32) -> None:
    writer = SegmentWriter(SegmentName(0, 0, prefix), 1 << 14)
    step = 0
    while not os.path.exists(stop_path):
        step += 1
        writer = writer.publish(patterned_snapshot(step, count)).writer
    writer.close(terminated=True)


def reader_stalled(prefix: str, stop_path: str) -> None:
    """Attach and hold the mapping mid-read until told to stop: the most
    obstructive thing a reader could legally do to the writer."""
    name = SegmentName(0, 0, prefix)
    deadline = time.monotonic() + 30
    while True:
        try:
            reader = SegmentReader(name)
            break
        except Exception:
            if time.monotonic() > deadline:
                raise
            time.sleep(0.01)
    while not os.path.exists(stop_path):
        time.sleep(0.02)
    reader.detach()


def reader_toggle(prefix: str, cmd_path: str) -> None:
    """Attach/detach a stalled reader on command: lets the wait-freedom test
    interleave reader-present and reader-absent measurement blocks."""
    name = SegmentName(0, 0, prefix)
    reader = None
    last = None
    while True:
        try:
            cmd = open(cmd_path).read().strip()
        except FileNotFoundError:
            cmd = ""
        if cmd == "quit":
            break
        if cmd != last:
            if cmd == "attach" and reader is None:
                reader = SegmentReader(name)
            elif cmd == "detach" and reader is not None:
                reader.detach()
                reader = None
            last = cmd
        time.sleep(0.005)
    if reader is not None:
        reader.detach()


def writer_grow(prefix: str, stop_path: str) -> None:
    """Publish snapshots whose particle count grows 128x, then terminate."""
    writer = SegmentWriter(SegmentName(0, 0, prefix), 4096)
    count = 100
    step = 0
    while count <= 12800:
        step += 1
        writer = writer.publish(patterned_snapshot(step, count)).writer
        count *= 2
        time.sleep(0.05)
    writer.close(terminated=True)


ROLES = {
    "writer_torn": writer_torn,
    "reader_stalled": reader_stalled,
    "reader_toggle": reader_toggle,
    "writer_grow": writer_grow,
}


if __name__ == "__main__":
    role = sys.argv[1]
    ROLES[role](*sys.argv[2:])
