#!/usr/bin/env python3
"""Minimal molecular-dynamics demo: Lennard-Jones particles in a periodic box."""

import argparse

from insitu.config import SimConfig
from insitu.sim.engine import Simulation


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--particles", type=int, default=500)
    parser.add_argument("--steps", type=int, default=2000)
    parser.add_argument("--report-every", type=int, default=200)
    args = parser.parse_args()

    config = SimConfig(particle_count=args.particles, box_length=10.0, dt=0.001, seed=42)
    sim = Simulation(config)

    for _ in range(args.steps):
        sim.step()
        if sim.sim_step % args.report_every == 0:
            kinetic, potential = sim.total_energy()
            print(f"step {sim.sim_step:6d}  E = {kinetic + potential:+.6f}")


if __name__ == "__main__":
    main()
