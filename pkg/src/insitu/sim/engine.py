"""Slab-decomposed Lennard-Jones molecular dynamics with steering hooks.

Reduced LJ units throughout (sigma = eps = m = 1).  The box is periodic in
all three axes; ranks own x slabs and exchange ghosts/migrants with their
ring neighbors each step.  Initialization generates the *global* particle
set from the seed and keeps the slab subset, so any rank count starts from
identical physics.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from insitu import _kernels as K
from insitu.config import ConfigError, SimConfig, slab_bounds
from insitu.sim.exchange import BaseExchange, LoopbackExchange
from insitu.snapshot import ParticleSnapshot

log = logging.getLogger(__name__)

# steerable simulation parameters and their validity checks
STEERABLE_PARAMS = {
    "dt": lambda v: v > 0,
    "target_temperature": lambda v: True,  # <= 0 disables the thermostat
}


class InstabilityError(RuntimeError):
    """A particle moved further than the ghost width in one step (dt too large)."""


@dataclass(frozen=True)
class RankDomain:
    rank_id: int
    slab_min_x: float
    slab_max_x: float
    ghost_width: float

    @staticmethod
    def for_rank(config: SimConfig, rank: int) -> "RankDomain":
        lo, hi = slab_bounds(config.box_length, config.rank_count, rank)
        return RankDomain(rank, lo, hi, config.cutoff)


def lj_force_energy(r: float, cutoff: float) -> tuple[float, float]:
    """Truncated-and-shifted LJ pair law: (force magnitude, potential)."""
    if r <= 0:
        raise ValueError(f"pair distance must be positive, got {r}")
    if r >= cutoff:
        return 0.0, 0.0
    inv6 = r**-6
    u_shift = 4.0 * (cutoff**-12 - cutoff**-6)
    potential = 4.0 * inv6 * (inv6 - 1.0) - u_shift
    force = 24.0 * (2.0 * r**-13 - r**-7)
    return force, potential


def _global_particles(config: SimConfig) -> tuple[np.ndarray, np.ndarray]:
    """Perturbed-lattice positions and momentum-free velocities for the whole
    box, deterministic in the seed alone."""
    n = config.particle_count
    rng = np.random.default_rng(config.seed)
    m = max(1, math.ceil(n ** (1.0 / 3.0)))
    while m * m * m < n:
        m += 1
    spacing = config.box_length / m
    idx = np.arange(n)
    lattice = np.column_stack([idx // (m * m), (idx // m) % m, idx % m]).astype(np.float64)
    pos = (lattice + 0.5) * spacing
    pos += rng.uniform(-0.1, 0.1, (n, 3)) * spacing
    pos %= config.box_length

    vel = rng.normal(0.0, 1.0, (n, 3))
    vel -= vel.mean(axis=0)
    if n > 1:
        t_now = float((vel * vel).sum()) / (3.0 * n)
        if t_now > 0 and config.target_temperature > 0:
            vel *= math.sqrt(config.target_temperature / t_now)
    return pos, vel


class Simulation:
    """One rank's share of the simulation.

    Multi-rank runs must drive all ranks concurrently, construction included:
    both __init__ (initial force evaluation) and step() perform collective
    neighbor exchanges.  See insitu.runtime for the process-based driver.
    """

    def __init__(self, config: SimConfig, rank: int = 0, exchange: BaseExchange | None = None):
        config.validate()
        if rank >= config.rank_count or rank < 0:
            raise ConfigError(f"rank {rank} out of range for rank_count {config.rank_count}")
        self.config = config
        self.rank = rank
        self.domain = RankDomain.for_rank(config, rank)
        self.exchange = exchange if exchange is not None else LoopbackExchange()
        if self.exchange.rank_count != config.rank_count:
            raise ConfigError("exchange rank_count does not match config")

        pos, vel = _global_particles(config)
        mine = (pos[:, 0] >= self.domain.slab_min_x) & (pos[:, 0] < self.domain.slab_max_x)
        self.pos = pos[mine].copy()
        self.vel = vel[mine].copy()
        self.ids = np.flatnonzero(mine).astype(np.int64)

        self.dt = config.dt
        self.target_temperature = config.target_temperature
        self.thermostat_on = config.thermostat_on
        self.paused = False
        self.sim_step = 0
        self.sim_time = 0.0
        self.applied_commands: list[tuple[int, int]] = []  # (seq, step) log
        self.step_listeners: list = []  # called as fn(self) after each step

        self.forces = np.zeros_like(self.pos)
        self.potential_share = 0.0
        self._recompute_forces()

    # -- decomposition plumbing ------------------------------------------------

    def _boundary_strips(self) -> tuple[np.ndarray, np.ndarray]:
        """Ghost copies for the neighbors, x-shifted across the periodic seam."""
        cutoff = self.config.cutoff
        box = self.config.box_length
        low = self.pos[:, 0] < self.domain.slab_min_x + cutoff
        high = self.pos[:, 0] >= self.domain.slab_max_x - cutoff
        to_left = self.pos[low].copy()
        to_right = self.pos[high].copy()
        if self.rank == 0:
            to_left[:, 0] += box
        if self.rank == self.config.rank_count - 1:
            to_right[:, 0] -= box
        return to_left, to_right

    def _exchange_ghosts(self) -> np.ndarray:
        to_left, to_right = self._boundary_strips()
        from_left, from_right = self.exchange.trade("GHST", to_left, to_right)
        return np.concatenate([from_left, from_right], axis=0)

    def _migrate(self) -> None:
        k = self.config.rank_count
        box = self.config.box_length
        if k == 1:
            return
        edges = np.array([slab_bounds(box, k, r)[0] for r in range(1, k)])
        dest = np.searchsorted(edges, self.pos[:, 0], side="right")
        hop = (dest - self.rank) % k
        if np.any((hop != 0) & (hop != 1) & (hop != k - 1)):
            bad = int(np.flatnonzero((hop != 0) & (hop != 1) & (hop != k - 1))[0])
            raise InstabilityError(
                f"rank {self.rank} step {self.sim_step}: particle id {self.ids[bad]} "
                f"jumped {int(hop[bad])} slabs in one step; reduce dt"
            )
        # k == 2 makes left and right the same neighbor; route those right
        go_right = dest == (self.rank + 1) % k
        go_left = (dest == (self.rank - 1) % k) & ~go_right
        stay = ~(go_left | go_right)

        def _pack(mask):
            out = np.empty((int(mask.sum()), 7), dtype=np.float64)
            out[:, 0] = self.ids[mask].astype(np.float64)
            out[:, 1:4] = self.pos[mask]
            out[:, 4:7] = self.vel[mask]
            return out

        from_left, from_right = self.exchange.trade("MIGR", _pack(go_left), _pack(go_right))
        arrivals = np.concatenate([from_left, from_right], axis=0)
        self.ids = np.concatenate([self.ids[stay], arrivals[:, 0].astype(np.int64)])
        self.pos = np.concatenate([self.pos[stay], arrivals[:, 1:4]], axis=0)
        self.vel = np.concatenate([self.vel[stay], arrivals[:, 4:7]], axis=0)

    def _recompute_forces(self) -> None:
        ghosts = self._exchange_ghosts()
        combined = np.concatenate([self.pos, ghosts], axis=0) if len(ghosts) else self.pos
        self.forces, self.potential_share = K.lj_forces(
            np.ascontiguousarray(combined),
            len(self.pos),
            self.config.cutoff,
            self.config.box_length,
            self.config.box_length,
        )

    # -- time stepping ---------------------------------------------------------

    def step(self) -> None:
        """One velocity-Verlet step (no-op while paused)."""
        if self.paused:
            return
        dt = self.dt
        cutoff = self.config.cutoff
        box = self.config.box_length

        self.vel += 0.5 * dt * self.forces
        max_move = float(np.abs(self.vel).max(initial=0.0)) * dt
        if max_move > cutoff:
            raise InstabilityError(
                f"rank {self.rank} step {self.sim_step}: displacement {max_move:.3g} "
                f"exceeds ghost width {cutoff}; reduce dt"
            )
        self.pos += dt * self.vel
        self.pos %= box
        self._migrate()
        self._recompute_forces()
        self.vel += 0.5 * dt * self.forces

        if self.thermostat_on and self.target_temperature > 0:
            ke_n = self.exchange.allreduce_sum(
                [0.5 * float((self.vel * self.vel).sum()), float(len(self.pos))]
            )
            t_now = 2.0 * ke_n[0] / (3.0 * ke_n[1]) if ke_n[1] > 0 else 0.0
            if t_now > 0:
                self.vel *= math.sqrt(self.target_temperature / t_now)

        self.sim_step += 1
        self.sim_time += dt
        for listener in self.step_listeners:
            listener(self)

    # -- observables -----------------------------------------------------------

    def total_energy(self) -> tuple[float, float]:
        """(kinetic, potential) share of this rank; shares sum to the global
        energy.  Potential reflects the last force evaluation, which is always
        consistent with the current positions."""
        ke = 0.5 * float((self.vel * self.vel).sum())
        return ke, self.potential_share

    def snapshot(self) -> ParticleSnapshot:
        return ParticleSnapshot(
            self.sim_step,
            self.sim_time,
            self.pos.astype(np.float32),
            self.vel.astype(np.float32),
        )

    def momentum(self) -> np.ndarray:
        return self.vel.sum(axis=0)

    # -- steering --------------------------------------------------------------

    def apply_steering(self, cmd) -> bool:
        """Apply one command at a step boundary; False if rejected."""
        kind = cmd.kind
        applied = True
        if kind == "set_param":
            check = STEERABLE_PARAMS.get(cmd.name)
            if check is None or not check(cmd.value):
                log.warning("rank %d: rejecting SetParam(%r, %r)", self.rank, cmd.name, cmd.value)
                return False
            if cmd.name == "dt":
                self.dt = float(cmd.value)
            elif cmd.name == "target_temperature":
                self.target_temperature = float(cmd.value)
                self.thermostat_on = cmd.value > 0
        elif kind == "pause":
            self.paused = True
        elif kind == "resume":
            self.paused = False
        elif kind == "terminate":
            pass  # the runtime owns shutdown; logging the application is enough
        else:
            log.warning("rank %d: unknown steering kind %r", self.rank, kind)
            return False
        if applied:
            self.applied_commands.append((cmd.seq, self.sim_step))
        return applied
