"""Lock-free single-writer/single-reader snapshot channel over shared memory.

One named segment per (rank, epoch).  The writer brackets every publish with
a generation counter (odd while writing); readers validate by re-reading the
counter, so the writer never waits for the reader in any code path.  When a
snapshot outgrows the segment the writer creates a successor (capacity = next
power of two >= 2x the need), publishes there, and marks the old header
superseded; readers follow the epoch chain and the old segment is unlinked
once its reader count drops to zero (or after a reaping timeout).

Segments are plain POSIX shared memory (files under /dev/shm), created with
os.open + mmap rather than multiprocessing.shared_memory so that no Python
resource tracker ever unlinks a segment behind another process's back.

64-byte little-endian header, 8-byte alignment for all atomics:
  0   magic            8s   "INSITU01"
  8   layout_version   u32  (= 1)
  12  reader_count     u32  maintained by attach/detach
  16  generation       u64  even = stable, odd = write in progress
  24  capacity_bytes   u64
  32  particle_count   u64
  40  sim_step         u64
  48  sim_time         f64
  56  flags            u32  bit 0 = superseded, bit 1 = producer terminated
  60  successor_epoch  u32

Generation and flags use real atomics with acquire/release ordering when the
native kernel backend is loaded; the pure-python fallback degrades to plain
stores, which preserves the protocol on x86-64 (total store order) only.
"""

from __future__ import annotations

import os
import struct
import time
from dataclasses import dataclass

import numpy as np

from insitu import _kernels as K
from insitu.config import next_power_of_two
from insitu.snapshot import RECORD_BYTES, ParticleSnapshot

MAGIC = b"INSITU01"
LAYOUT_VERSION = 1
HEADER_SIZE = 64

OFF_MAGIC = 0
OFF_VERSION = 8
OFF_READERS = 12
OFF_GENERATION = 16
OFF_CAPACITY = 24
OFF_COUNT = 32
OFF_STEP = 40
OFF_TIME = 48
OFF_FLAGS = 56
OFF_SUCCESSOR = 60

FLAG_SUPERSEDED = 0x1
FLAG_TERMINATED = 0x2

ACQUIRE_RETRIES = 16
REAP_TIMEOUT_S = 5.0

SHM_DIR = "/dev/shm"


class SegmentError(Exception):
    pass


class SegmentExists(SegmentError):
    pass


class SegmentNotFound(SegmentError):
    pass


class SegmentIncompatible(SegmentError):
    pass


class SegmentResourceError(SegmentError):
    pass


@dataclass(frozen=True)
class SegmentName:
    rank_id: int
    epoch: int
    prefix: str = "insitu"

    def __str__(self) -> str:
        return f"{self.prefix}.r{self.rank_id}.e{self.epoch}"

    def successor(self) -> "SegmentName":
        return SegmentName(self.rank_id, self.epoch + 1, self.prefix)

    def path(self) -> str:
        return os.path.join(SHM_DIR, str(self))

    @staticmethod
    def parse(text: str) -> "SegmentName":
        prefix, r, e = text.rsplit(".", 2)
        if not (r.startswith("r") and e.startswith("e")):
            raise ValueError(f"not a segment name: {text!r}")
        return SegmentName(int(r[1:]), int(e[1:]), prefix)


def _unlink_quiet(name: SegmentName) -> None:
    try:
        os.unlink(name.path())
    except FileNotFoundError:
        pass


def list_segments(prefix: str = "insitu") -> list[SegmentName]:
    out = []
    for entry in os.listdir(SHM_DIR):
        if entry.startswith(prefix + ".r"):
            try:
                out.append(SegmentName.parse(entry))
            except ValueError:
                continue
    return sorted(out, key=lambda s: (s.rank_id, s.epoch))


class _Mapping:
    """A mapped segment; owns the mmap and its exported views."""

    def __init__(self, name: SegmentName, create: bool, capacity: int = 0):
        import mmap as mmap_mod

        self.name = name
        if create:
            try:
                fd = os.open(name.path(), os.O_RDWR | os.O_CREAT | os.O_EXCL, 0o600)
            except FileExistsError:
                raise SegmentExists(f"segment {name} already exists") from None
            try:
                os.ftruncate(fd, capacity)
                self.mm = mmap_mod.mmap(fd, capacity)
            except OSError as exc:
                os.close(fd)
                _unlink_quiet(name)
                raise SegmentResourceError(str(exc)) from exc
            os.close(fd)
        else:
            try:
                fd = os.open(name.path(), os.O_RDWR)
            except FileNotFoundError:
                raise SegmentNotFound(f"segment {name} does not exist") from None
            try:
                size = os.fstat(fd).st_size
                self.mm = mmap_mod.mmap(fd, size)
            finally:
                os.close(fd)
        self.view = memoryview(self.mm)
        self.u8 = self.view.cast("B")

    def close(self) -> None:
        if self.mm is None:
            return
        self.u8.release()
        self.view.release()
        self.mm.close()
        self.mm = None


def _read_header(u8) -> dict:
    magic, version = struct.unpack_from("<8sI", u8, 0)
    return {
        "magic": magic,
        "layout_version": version,
        "reader_count": K.hdr_load_u32(u8, OFF_READERS),
        "generation": K.hdr_load_u64(u8, OFF_GENERATION),
        "capacity_bytes": K.hdr_load_u64(u8, OFF_CAPACITY),
        "particle_count": K.hdr_load_u64(u8, OFF_COUNT),
        "sim_step": K.hdr_load_u64(u8, OFF_STEP),
        "sim_time": struct.unpack_from("<d", u8, OFF_TIME)[0],
        "flags": K.hdr_load_u32(u8, OFF_FLAGS),
        "successor_epoch": K.hdr_load_u32(u8, OFF_SUCCESSOR),
    }


@dataclass
class PublishResult:
    grew: bool
    writer: "SegmentWriter"


class SegmentWriter:
    """The sole producer of a segment chain."""

    def __init__(self, name: SegmentName, capacity_bytes: int, _retired: list | None = None):
        if capacity_bytes < HEADER_SIZE + RECORD_BYTES:
            raise ValueError(
                f"capacity {capacity_bytes} below minimum {HEADER_SIZE + RECORD_BYTES}"
            )
        self.name = name
        self.capacity = capacity_bytes
        self._map = _Mapping(name, create=True, capacity=capacity_bytes)
        self._generation = 0
        self._retired = _retired if _retired is not None else []
        u8 = self._map.u8
        struct.pack_into("<8sI", u8, 0, MAGIC, LAYOUT_VERSION)
        K.hdr_store_u64(u8, OFF_CAPACITY, capacity_bytes)
        K.hdr_store_u64(u8, OFF_GENERATION, 0)
        K.hdr_store_u32(u8, OFF_FLAGS, 0)

    def publish(self, snap: ParticleSnapshot) -> PublishResult:
        need = HEADER_SIZE + snap.count * RECORD_BYTES
        if need > self.capacity:
            return self._grow_and_publish(snap, need)
        u8 = self._map.u8
        g = self._generation
        K.hdr_store_u64(u8, OFF_GENERATION, g + 1)
        if snap.count:
            dst = np.frombuffer(self._map.mm, dtype=np.float32,
                                count=snap.count * 6, offset=HEADER_SIZE)
            dst[:] = snap.records().reshape(-1)
        struct.pack_into("<QQd", u8, OFF_COUNT, snap.count, snap.sim_step, snap.sim_time)
        K.hdr_store_u64(u8, OFF_GENERATION, g + 2)
        self._generation = g + 2
        self.reap_retired()
        return PublishResult(False, self)

    def _grow_and_publish(self, snap: ParticleSnapshot, need: int) -> PublishResult:
        new_cap = next_power_of_two(2 * need)
        try:
            succ = SegmentWriter(self.name.successor(), new_cap, _retired=self._retired)
        except (SegmentExists, SegmentResourceError) as exc:
            raise SegmentResourceError(f"cannot grow {self.name}: {exc}") from exc
        succ.publish(snap)
        u8 = self._map.u8
        K.hdr_store_u32(u8, OFF_SUCCESSOR, self.name.epoch + 1)
        K.hdr_store_u32(u8, OFF_FLAGS, K.hdr_load_u32(u8, OFF_FLAGS) | FLAG_SUPERSEDED)
        self._retired.append((self.name, self._map, time.monotonic()))
        succ.reap_retired()
        return PublishResult(True, succ)

    def reap_retired(self, timeout_s: float = REAP_TIMEOUT_S) -> None:
        """Unlink superseded segments once reader-free (or stale past timeout)."""
        now = time.monotonic()
        keep = []
        for name, mapping, since in self._retired:
            readers = K.hdr_load_u32(mapping.u8, OFF_READERS)
            if readers == 0 or (now - since) >= timeout_s:
                _unlink_quiet(name)
                mapping.close()
            else:
                keep.append((name, mapping, since))
        self._retired[:] = keep

    def close(self, terminated: bool = True, unlink: bool = True) -> None:
        if self._map.mm is None:
            return
        u8 = self._map.u8
        if terminated:
            K.hdr_store_u32(u8, OFF_FLAGS, K.hdr_load_u32(u8, OFF_FLAGS) | FLAG_TERMINATED)
        for name, mapping, _ in self._retired:
            _unlink_quiet(name)
            mapping.close()
        self._retired.clear()
        if unlink:
            _unlink_quiet(self.name)
        self._map.close()

    def header(self) -> dict:
        return _read_header(self._map.u8)


def create_segment(name: SegmentName, capacity_bytes: int) -> SegmentWriter:
    return SegmentWriter(name, capacity_bytes)


@dataclass
class AcquireResult:
    kind: str  # "fresh" | "unchanged" | "superseded" | "terminated"
    snapshot: ParticleSnapshot | None = None
    successor: SegmentName | None = None

    FRESH = "fresh"
    UNCHANGED = "unchanged"
    SUPERSEDED = "superseded"
    TERMINATED = "terminated"


class SegmentReader:
    """The sole (per-segment) consumer; never blocks the writer."""

    def __init__(self, name: SegmentName):
        self.name = name
        self._map = _Mapping(name, create=False)
        u8 = self._map.u8
        magic, version = struct.unpack_from("<8sI", u8, 0)
        if magic != MAGIC:
            self._map.close()
            raise SegmentIncompatible(f"{name}: bad magic {magic!r}")
        if version != LAYOUT_VERSION:
            self._map.close()
            raise SegmentIncompatible(f"{name}: layout version {version} != {LAYOUT_VERSION}")
        self.last_seen_generation = 0
        self._detached = False
        K.hdr_add_u32(u8, OFF_READERS, 1)

    def acquire(self, retries: int = ACQUIRE_RETRIES) -> AcquireResult:
        u8 = self._map.u8
        flags = K.hdr_load_u32(u8, OFF_FLAGS)
        if flags & FLAG_SUPERSEDED:
            epoch = K.hdr_load_u32(u8, OFF_SUCCESSOR)
            return AcquireResult(AcquireResult.SUPERSEDED,
                                 successor=SegmentName(self.name.rank_id, epoch, self.name.prefix))
        if flags & FLAG_TERMINATED:
            return AcquireResult(AcquireResult.TERMINATED)
        for _ in range(max(1, retries)):
            g1 = K.hdr_load_u64(u8, OFF_GENERATION)
            if g1 & 1:
                continue
            if g1 == self.last_seen_generation:
                return AcquireResult(AcquireResult.UNCHANGED)
            count, step = struct.unpack_from("<QQ", u8, OFF_COUNT)
            sim_time = struct.unpack_from("<d", u8, OFF_TIME)[0]
            if HEADER_SIZE + count * RECORD_BYTES > len(self._map.mm):
                continue  # torn header, retry
            records = np.frombuffer(self._map.mm, dtype=np.float32,
                                    count=int(count) * 6, offset=HEADER_SIZE).copy()
            K.read_fence()
            g2 = K.hdr_load_u64(u8, OFF_GENERATION)
            if g1 == g2:
                self.last_seen_generation = g1
                return AcquireResult(
                    AcquireResult.FRESH,
                    snapshot=ParticleSnapshot.from_records(int(step), sim_time, records),
                )
        return AcquireResult(AcquireResult.UNCHANGED)

    def acquire_inplace(self, fn, retries: int = ACQUIRE_RETRIES):
        """Zero-copy path: fn(positions_view, velocities_view, sim_step, sim_time)
        runs against the shared payload; its result is returned only if the
        generation was stable across the whole call, else None.  The views
        must not escape fn."""
        u8 = self._map.u8
        flags = K.hdr_load_u32(u8, OFF_FLAGS)
        if flags & (FLAG_SUPERSEDED | FLAG_TERMINATED):
            return None
        for _ in range(max(1, retries)):
            g1 = K.hdr_load_u64(u8, OFF_GENERATION)
            if g1 & 1 or g1 == 0:
                continue
            count, step = struct.unpack_from("<QQ", u8, OFF_COUNT)
            sim_time = struct.unpack_from("<d", u8, OFF_TIME)[0]
            if HEADER_SIZE + count * RECORD_BYTES > len(self._map.mm):
                continue
            records = np.frombuffer(self._map.mm, dtype=np.float32,
                                    count=int(count) * 6, offset=HEADER_SIZE).reshape(-1, 6)
            result = fn(records[:, :3], records[:, 3:], int(step), sim_time)
            del records
            K.read_fence()
            g2 = K.hdr_load_u64(u8, OFF_GENERATION)
            if g1 == g2:
                self.last_seen_generation = g1
                return result
        return None

    def detach(self) -> None:
        if self._detached:
            return
        self._detached = True
        K.hdr_add_u32(self._map.u8, OFF_READERS, 0xFFFFFFFF)  # -1 mod 2^32
        self._map.close()

    def header(self) -> dict:
        return _read_header(self._map.u8)


def attach_reader(name: SegmentName) -> SegmentReader:
    return SegmentReader(name)


class SnapshotChainReader:
    """Follows the supersede chain; hands out monotone-step fresh snapshots."""

    def __init__(self, name: SegmentName, wait_timeout_s: float = 10.0):
        deadline = time.monotonic() + wait_timeout_s
        while True:
            try:
                self._reader = SegmentReader(name)
                break
            except SegmentNotFound:
                if time.monotonic() >= deadline:
                    raise
                time.sleep(0.01)
        self.terminated = False
        self.epochs_followed = [name.epoch]

    def poll(self) -> ParticleSnapshot | None:
        """Newest fresh snapshot, or None; sets .terminated at end of stream."""
        while True:
            res = self._reader.acquire()
            if res.kind == AcquireResult.FRESH:
                return res.snapshot
            if res.kind == AcquireResult.UNCHANGED:
                return None
            if res.kind == AcquireResult.TERMINATED:
                self.terminated = True
                return None
            # superseded: hop to the successor
            succ = res.successor
            old = self._reader
            self._reader = SegmentReader(succ)
            old.detach()
            self.epochs_followed.append(succ.epoch)

    def acquire_inplace(self, fn):
        return self._reader.acquire_inplace(fn)

    def close(self) -> None:
        self._reader.detach()


def dump_header(name: SegmentName) -> str:
    """shmdump: human-readable header of any live segment."""
    reader = None
    try:
        mapping = _Mapping(name, create=False)
    except SegmentNotFound:
        raise
    try:
        hdr = _read_header(mapping.u8)
    finally:
        mapping.close()
    lines = [f"segment {name}"]
    for key, val in hdr.items():
        if key == "flags":
            bits = []
            if val & FLAG_SUPERSEDED:
                bits.append("superseded")
            if val & FLAG_TERMINATED:
                bits.append("terminated")
            val = f"0x{val:x}" + (f" ({', '.join(bits)})" if bits else "")
        lines.append(f"  {key:16} {val}")
    return "\n".join(lines)
