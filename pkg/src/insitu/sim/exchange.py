"""Neighbor exchange between slab ranks: ghosts, migration, reductions.

Ranks form a ring along x.  The engine only needs two primitives: a paired
left/right trade and a one-hop ring pass (from which deterministic
allreduce is built).  Three implementations: in-process loopback (one rank),
queue-based ring for threaded harnesses, and the socket ring used by real
rank processes (see insitu.net for framing).
"""

from __future__ import annotations

import queue

import numpy as np


class ExchangeError(RuntimeError):
    pass


class BaseExchange:
    rank: int
    rank_count: int

    def trade(self, tag: str, to_left: np.ndarray, to_right: np.ndarray):
        raise NotImplementedError

    def ring_pass(self, payload: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def allreduce_sum(self, values) -> np.ndarray:
        """Deterministic global sum: contributions added in rank order."""
        values = np.atleast_1d(np.asarray(values, dtype=np.float64))
        k = self.rank_count
        contributions = {self.rank: values}
        circulating = np.concatenate([[float(self.rank)], values])
        for _ in range(k - 1):
            circulating = self.ring_pass(circulating)
            contributions[int(circulating[0])] = circulating[1:]
        total = np.zeros_like(values)
        for r in sorted(contributions):
            total = total + contributions[r]
        return total


class LoopbackExchange(BaseExchange):
    """Single rank: both neighbors are the rank itself, so what I send left
    arrives from my right and vice versa."""

    def __init__(self):
        self.rank = 0
        self.rank_count = 1

    def trade(self, tag, to_left, to_right):
        return to_right, to_left

    def ring_pass(self, payload):
        return payload


class LocalRingGroup:
    """Queue-backed ring for multi-rank runs inside one process (tests)."""

    def __init__(self, rank_count: int):
        self.rank_count = rank_count
        self._boxes = [
            {"from_left": queue.Queue(), "from_right": queue.Queue()}
            for _ in range(rank_count)
        ]

    def endpoint(self, rank: int) -> "LocalRingExchange":
        return LocalRingExchange(self, rank)


class LocalRingExchange(BaseExchange):
    def __init__(self, group: LocalRingGroup, rank: int):
        self._group = group
        self.rank = rank
        self.rank_count = group.rank_count

    def trade(self, tag, to_left, to_right):
        k = self.rank_count
        left = (self.rank - 1) % k
        right = (self.rank + 1) % k
        self._group._boxes[left]["from_right"].put((tag, to_left))
        self._group._boxes[right]["from_left"].put((tag, to_right))
        tag_l, from_left = self._group._boxes[self.rank]["from_left"].get(timeout=30)
        tag_r, from_right = self._group._boxes[self.rank]["from_right"].get(timeout=30)
        if tag_l != tag or tag_r != tag:
            raise ExchangeError(f"tag mismatch: sent {tag}, got {tag_l}/{tag_r}")
        return from_left, from_right

    def ring_pass(self, payload):
        right = (self.rank + 1) % self.rank_count
        self._group._boxes[right]["from_left"].put(("RING", payload))
        tag, received = self._group._boxes[self.rank]["from_left"].get(timeout=30)
        if tag != "RING":
            raise ExchangeError(f"expected RING, got {tag}")
        return received
