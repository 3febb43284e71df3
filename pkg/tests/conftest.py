import os
import sys
import threading
import uuid

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from insitu.shmem import list_segments


@pytest.fixture
def shm_prefix():
    """Unique shared-memory namespace per test, reaped afterwards."""
    prefix = f"insitu-t{uuid.uuid4().hex[:8]}"
    yield prefix
    for seg in list_segments(prefix):
        try:
            os.unlink(seg.path())
        except OSError:
            pass


def run_ranks_threaded(rank_count, fn):
    """Drive one callable per rank concurrently; returns per-rank results.

    Multi-rank engines rendezvous inside construction and step, so every
    rank must run on its own thread even in-process.
    """
    results = [None] * rank_count
    errors = []

    def _wrap(rank):
        try:
            results[rank] = fn(rank)
        except Exception as exc:  # propagated after join
            errors.append((rank, exc))

    threads = [threading.Thread(target=_wrap, args=(r,)) for r in range(rank_count)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=120)
    if errors:
        raise errors[0][1]
    return results


def sorted_by_id(sims):
    """Global (positions, velocities) in particle-id order across ranks."""
    ids = np.concatenate([s.ids for s in sims])
    pos = np.concatenate([s.pos for s in sims])
    vel = np.concatenate([s.vel for s in sims])
    order = np.argsort(ids)
    return pos[order], vel[order]
