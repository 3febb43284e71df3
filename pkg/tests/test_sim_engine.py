import math

import numpy as np
import pytest

from insitu.config import ConfigError, SimConfig
from insitu.sim.engine import InstabilityError, Simulation, lj_force_energy
from insitu.sim.exchange import LocalRingGroup
from insitu.steering import SteeringCommand

from conftest import run_ranks_threaded, sorted_by_id
from oracles import brute_lj


def small_config(**kw):
    defaults = dict(particle_count=64, box_length=8.0, dt=0.001, seed=3)
    defaults.update(kw)
    return SimConfig(**defaults)


class TestConfig:
    def test_rank_count_must_be_power_of_two(self):
        with pytest.raises(ConfigError):
            SimConfig(rank_count=3).validate()

    def test_box_must_exceed_twice_cutoff(self):
        with pytest.raises(ConfigError):
            SimConfig(box_length=5.0, cutoff=2.5).validate()

    def test_bad_dt_and_cutoff(self):
        with pytest.raises(ConfigError):
            SimConfig(dt=0.0).validate()
        with pytest.raises(ConfigError):
            SimConfig(cutoff=-1.0).validate()

    def test_rank_out_of_range(self):
        with pytest.raises(ConfigError):
            Simulation(small_config(), rank=1)


class TestInit:
    def test_momentum_zero_by_construction(self):
        sim = Simulation(SimConfig(particle_count=8, box_length=10.0))
        assert len(sim.pos) == 8
        assert np.abs(sim.momentum()).max() < 1e-12

    def test_deterministic_given_seed(self):
        a = Simulation(small_config())
        b = Simulation(small_config())
        assert np.array_equal(a.pos, b.pos)
        assert np.array_equal(a.vel, b.vel)

    def test_different_seed_differs(self):
        a = Simulation(small_config(seed=1))
        b = Simulation(small_config(seed=2))
        assert not np.array_equal(a.pos, b.pos)

    def test_positions_inside_box(self):
        sim = Simulation(small_config(particle_count=200, box_length=9.0))
        assert (sim.pos >= 0).all() and (sim.pos < 9.0).all()


class TestPairLaw:
    def test_zero_force_at_minimum(self):
        force, _ = lj_force_energy(2 ** (1 / 6), 2.5)
        assert abs(force) < 1e-12

    def test_unshifted_potential_zero_at_sigma(self):
        _, potential = lj_force_energy(1.0, 2.5)
        u_c = 4.0 * (2.5**-12 - 2.5**-6)
        assert potential == pytest.approx(-u_c, abs=1e-15)

    def test_beyond_cutoff_is_zero(self):
        assert lj_force_energy(3.0, 2.5) == (0.0, 0.0)

    def test_nonpositive_distance_rejected(self):
        with pytest.raises(ValueError):
            lj_force_energy(0.0, 2.5)
        with pytest.raises(ValueError):
            lj_force_energy(-1.0, 2.5)


def place_particles(sim, positions, velocities):
    """Test helper: override the generated state with an exact configuration."""
    sim.pos = np.asarray(positions, dtype=np.float64)
    sim.vel = np.asarray(velocities, dtype=np.float64)
    sim.ids = np.arange(len(sim.pos), dtype=np.int64)
    sim._recompute_forces()


class TestStep:
    def test_pair_at_minimum_stays_at_rest(self):
        sim = Simulation(SimConfig(particle_count=2, box_length=10.0, dt=0.001))
        r0 = 2 ** (1 / 6)
        place_particles(sim, [[5 - r0 / 2, 5, 5], [5 + r0 / 2, 5, 5]], np.zeros((2, 3)))
        for _ in range(1):
            sim.step()
        assert np.abs(sim.vel).max() < 1e-12

    def test_free_flight(self):
        sim = Simulation(SimConfig(particle_count=1, box_length=10.0, dt=0.01))
        place_particles(sim, [[5.0, 5.0, 5.0]], [[1.0, 0.0, 0.0]])
        sim.step()
        assert sim.pos[0, 0] == pytest.approx(5.01, abs=1e-12)
        assert sim.sim_step == 1
        assert sim.sim_time == pytest.approx(0.01)

    def test_instability_raises(self):
        sim = Simulation(SimConfig(particle_count=2, box_length=10.0, dt=1.0))
        place_particles(sim, [[5.0, 5.0, 5.0], [5.0, 5.0, 5.0 + 1e-3]], np.zeros((2, 3)))
        with pytest.raises(InstabilityError):
            for _ in range(50):
                sim.step()


class TestEnergy:
    def test_kinetic_zero_when_at_rest(self):
        sim = Simulation(SimConfig(particle_count=4, box_length=10.0))
        place_particles(sim, sim.pos.copy(), np.zeros_like(sim.vel))
        kinetic, _ = sim.total_energy()
        assert kinetic == 0.0

    def test_potential_zero_beyond_cutoff(self):
        sim = Simulation(SimConfig(particle_count=2, box_length=12.0))
        place_particles(sim, [[3.0, 6, 6], [3.0 + 2.5 + 1e-6, 6, 6]], np.zeros((2, 3)))
        _, potential = sim.total_energy()
        assert potential == 0.0

    def test_energy_matches_brute_force(self):
        cfg = small_config(particle_count=64, box_length=8.0)
        sim = Simulation(cfg)
        _, potential = sim.total_energy()
        _, expected = brute_lj(sim.pos, cfg.box_length, cfg.cutoff)
        assert potential == pytest.approx(expected, abs=1e-10)

    def test_nve_drift_below_tolerance(self):
        cfg = SimConfig(particle_count=100, box_length=10.0, dt=0.001, seed=7)
        sim = Simulation(cfg)
        e0 = sum(sim.total_energy())
        for _ in range(1000):
            sim.step()
        e1 = sum(sim.total_energy())
        assert abs(e1 - e0) / abs(e0) < 1e-3

    def test_momentum_conserved(self):
        cfg = SimConfig(particle_count=64, box_length=8.0, dt=0.001, seed=5)
        sim = Simulation(cfg)
        for _ in range(1000):
            sim.step()
        assert np.abs(sim.momentum()).max() < 1e-8


class TestCellListForces:
    @pytest.mark.parametrize("n,box", [(32, 8.0), (128, 8.0), (256, 10.0)])
    def test_matches_brute_force(self, n, box):
        cfg = SimConfig(particle_count=n, box_length=box, seed=n)
        sim = Simulation(cfg)
        expected, _ = brute_lj(sim.pos, box, cfg.cutoff)
        assert np.abs(sim.forces - expected).max() < 1e-10

    def test_matches_brute_force_after_steps(self):
        cfg = SimConfig(particle_count=128, box_length=8.0, dt=0.001, seed=11)
        sim = Simulation(cfg)
        for _ in range(50):
            sim.step()
        expected, _ = brute_lj(sim.pos, cfg.box_length, cfg.cutoff)
        assert np.abs(sim.forces - expected).max() < 1e-10

    def test_multirank_forces_match_brute_force(self):
        cfg = SimConfig(particle_count=128, box_length=10.0, seed=13, rank_count=2)
        group = LocalRingGroup(2)

        def make(rank):
            return Simulation(cfg, rank, group.endpoint(rank))

        sims = run_ranks_threaded(2, make)
        ids = np.concatenate([s.ids for s in sims])
        forces = np.concatenate([s.forces for s in sims])[np.argsort(ids)]
        pos, _ = sorted_by_id(sims)
        expected, _ = brute_lj(pos, cfg.box_length, cfg.cutoff)
        assert np.abs(forces - expected).max() < 1e-10


class TestDecompositionTransparency:
    @pytest.mark.parametrize("k", [2, 4])
    def test_k_rank_matches_single_rank(self, k):
        box = 12.0
        cfg1 = SimConfig(particle_count=96, box_length=box, dt=0.001, seed=17, rank_count=1)
        ref = Simulation(cfg1)
        for _ in range(100):
            ref.step()
        ref_pos = ref.pos[np.argsort(ref.ids)]

        cfgk = SimConfig(particle_count=96, box_length=box, dt=0.001, seed=17, rank_count=k)
        group = LocalRingGroup(k)

        def run_rank(rank):
            sim = Simulation(cfgk, rank, group.endpoint(rank))
            for _ in range(100):
                sim.step()
            return sim

        sims = run_ranks_threaded(k, run_rank)
        pos, _ = sorted_by_id(sims)
        assert len(pos) == 96
        diff = np.abs(pos - ref_pos)
        diff = np.minimum(diff, box - diff)  # periodic wrap tolerance
        assert diff.max() < 1e-6

    def test_multirank_energy_share_sums(self):
        cfg = SimConfig(particle_count=64, box_length=8.0, seed=3, rank_count=2)
        ref = Simulation(SimConfig(particle_count=64, box_length=8.0, seed=3, rank_count=1))
        group = LocalRingGroup(2)
        sims = run_ranks_threaded(2, lambda r: Simulation(cfg, r, group.endpoint(r)))
        total = sum(sum(s.total_energy()) for s in sims)
        assert total == pytest.approx(sum(ref.total_energy()), abs=1e-10)


def cmd(seq, kind, name="", value=0.0, step=0):
    return SteeringCommand(seq, kind, step, name, value)


class TestSteeringHooks:
    def test_set_dt(self):
        sim = Simulation(small_config())
        assert sim.apply_steering(cmd(1, "set_param", "dt", 0.002))
        assert sim.dt == 0.002
        assert sim.applied_commands == [(1, 0)]

    def test_pause_makes_step_noop(self):
        sim = Simulation(small_config())
        sim.apply_steering(cmd(1, "pause"))
        pos = sim.pos.copy()
        sim.step()
        assert sim.sim_step == 0
        assert np.array_equal(sim.pos, pos)
        sim.apply_steering(cmd(2, "resume"))
        sim.step()
        assert sim.sim_step == 1

    def test_unknown_parameter_rejected(self):
        sim = Simulation(small_config())
        dt = sim.dt
        assert not sim.apply_steering(cmd(1, "set_param", "viscosity", 1.0))
        assert sim.dt == dt
        assert sim.applied_commands == []

    def test_thermostat_drives_temperature(self):
        cfg = SimConfig(particle_count=125, box_length=10.0, dt=0.001, seed=9)
        sim = Simulation(cfg)
        sim.apply_steering(cmd(1, "set_param", "target_temperature", 0.5))
        for _ in range(50):
            sim.step()
        n = len(sim.pos)
        temperature = float((sim.vel**2).sum()) / (3.0 * n)
        assert temperature == pytest.approx(0.5, rel=0.05)

    def test_step_listeners_fire(self):
        sim = Simulation(small_config())
        seen = []
        sim.step_listeners.append(lambda s: seen.append(s.sim_step))
        sim.step()
        sim.step()
        assert seen == [1, 2]
