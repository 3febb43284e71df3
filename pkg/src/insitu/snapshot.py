"""The unit of simulation-to-renderer handoff."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

RECORD_BYTES = 24  # 3 x f32 position + 3 x f32 velocity


@dataclass
class ParticleSnapshot:
    sim_step: int
    sim_time: float
    positions: np.ndarray  # (n, 3) float32
    velocities: np.ndarray  # (n, 3) float32

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float32)
        self.velocities = np.ascontiguousarray(self.velocities, dtype=np.float32)
        if self.positions.shape != self.velocities.shape or (
            self.positions.size and self.positions.shape[1] != 3
        ):
            raise ValueError("positions/velocities must both be (n, 3)")

    @property
    def count(self) -> int:
        return len(self.positions)

    def records(self) -> np.ndarray:
        """Interleaved (n, 6) float32 records: the shared-memory layout."""
        out = np.empty((self.count, 6), dtype=np.float32)
        out[:, :3] = self.positions
        out[:, 3:] = self.velocities
        return out

    @staticmethod
    def from_records(sim_step: int, sim_time: float, records: np.ndarray) -> "ParticleSnapshot":
        records = records.reshape(-1, 6)
        return ParticleSnapshot(sim_step, sim_time, records[:, :3].copy(), records[:, 3:].copy())

    @staticmethod
    def empty(sim_step: int = 0, sim_time: float = 0.0) -> "ParticleSnapshot":
        z = np.zeros((0, 3), dtype=np.float32)
        return ParticleSnapshot(sim_step, sim_time, z, z.copy())
