"""Run configuration: simulation parameters and the per-run launch spec."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path


class ConfigError(ValueError):
    """A configuration violates its documented invariants."""


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class SimConfig:
    """Simulation parameters, in reduced Lennard-Jones units (sigma = eps = m = 1).

    target_temperature doubles as the initial velocity scale; the rescaling
    thermostat is active only while it is > 0 *and* thermostat_on is set
    (steerable at runtime via ``SetParam("target_temperature", t)``).
    """

    particle_count: int = 1000
    box_length: float = 12.0
    dt: float = 0.001
    cutoff: float = 2.5
    target_temperature: float = 1.0
    seed: int = 1
    rank_count: int = 1
    steps_per_publish: int = 1
    thermostat_on: bool = False

    def validate(self) -> None:
        if self.particle_count < 1:
            raise ConfigError("particle_count must be >= 1")
        if self.dt <= 0:
            raise ConfigError("dt must be > 0")
        if self.cutoff <= 0:
            raise ConfigError("cutoff must be > 0")
        if self.box_length <= 2 * self.cutoff:
            raise ConfigError(
                f"box_length {self.box_length} must exceed 2 x cutoff "
                f"({2 * self.cutoff}) for the cell grid to be valid"
            )
        if not is_power_of_two(self.rank_count):
            raise ConfigError(
                f"rank_count {self.rank_count} is not a power of two "
                "(required by the compositing exchange)"
            )
        if self.steps_per_publish < 1:
            raise ConfigError("steps_per_publish must be >= 1")
        slab_width = self.box_length / self.rank_count
        if self.cutoff > slab_width:
            raise ConfigError(
                f"slab width {slab_width:.3f} is below the ghost width "
                f"({self.cutoff}); use fewer ranks or a larger box"
            )


# keys accepted in config files, mapped to their parser
_CONFIG_KEYS = {
    "particle_count": int,
    "box_length": float,
    "dt": float,
    "cutoff": float,
    "target_temperature": float,
    "seed": int,
    "rank_count": int,
    "steps_per_publish": int,
    "thermostat_on": lambda s: s.strip().lower() in ("1", "true", "yes", "on"),
}


def load_sim_config(path: str | Path) -> SimConfig:
    """Parse a ``key = value`` config file (``#`` comments, blank lines ok)."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:
            key, _, val = line.partition("=")
        else:
            key, _, val = line.partition(" ")
        key, val = key.strip(), val.strip()
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = _CONFIG_KEYS[key](val)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {val!r}") from exc
    cfg = SimConfig(**values)
    cfg.validate()
    return cfg


@dataclass(frozen=True)
class RunSpec:
    """Everything a spawned rank needs to run; identical on every rank.

    The launcher distributes one RunSpec to all processes; each verifies the
    checksum at startup so a mismatched spec aborts instead of desyncing.
    """

    sim: SimConfig = field(default_factory=SimConfig)
    width: int = 256
    height: int = 256
    mode: str = "opaque"  # "opaque" | "vdi"
    encoding: int = 0  # FrameMessage encoding id
    sphere_radius: float = 0.3
    opacity: float = 0.7
    s_max: int = 8
    delay_steps: int = 2
    max_steps: int = 0  # 0 = run until Terminate
    listen_port: int = 8765
    headless: bool = False
    shm_prefix: str = "insitu"
    benchmark: bool = False
    bench_frames: int = 360
    steering_script: str = ""
    stats_dir: str = ""
    abort_on_peer_loss: bool = False
    # per-step sim pacing; shapes benchmark workloads so free-spinning sims
    # do not starve the render processes on small machines
    sim_throttle_s: float = 0.0
    # pairwise rendezvous timeout per compositing stage
    stage_timeout_s: float = 2.0

    def validate(self) -> None:
        self.sim.validate()
        if self.width < 1 or self.height < 1:
            raise ConfigError("image size must be positive")
        if self.mode not in ("opaque", "vdi"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.encoding not in (0, 1, 2):
            raise ConfigError(f"unknown encoding {self.encoding}")
        if self.mode == "vdi" and self.encoding != 2:
            raise ConfigError("vdi mode requires encoding 2")
        if self.sphere_radius <= 0:
            raise ConfigError("sphere_radius must be > 0")
        if not 0 < self.opacity <= 1:
            raise ConfigError("opacity must be in (0, 1]")
        if self.s_max < 1:
            raise ConfigError("s_max must be >= 1")
        if self.delay_steps < 1:
            raise ConfigError("delay_steps must be >= 1")

    def checksum(self) -> str:
        payload = repr(sorted(asdict(self).items())).encode()
        return hashlib.sha256(payload).hexdigest()

    def with_(self, **kwargs) -> "RunSpec":
        return replace(self, **kwargs)


def next_power_of_two(n: int) -> int:
    if n < 1:
        return 1
    return 1 << (n - 1).bit_length()


def slab_bounds(box_length: float, rank_count: int, rank: int) -> tuple[float, float]:
    """Exact, gap-free slab partition of [0, box_length) along x."""
    lo = box_length * rank / rank_count
    hi = box_length * (rank + 1) / rank_count
    if rank == rank_count - 1:
        hi = box_length
    return lo, hi


def log2_int(n: int) -> int:
    if not is_power_of_two(n):
        raise ValueError(f"{n} is not a power of two")
    return int(math.log2(n))
