"""Command-line entry points: run, bench, shmdump, replay."""

from __future__ import annotations

import argparse
import logging
import sys

from insitu.config import RunSpec, SimConfig, load_sim_config

ENCODING_IDS = {"raw": 0, "rle": 1, "vdi": 2}


def _add_run_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="simulation config file (key = value lines)")
    parser.add_argument("--ranks", type=int, help="rank count (power of two)")
    parser.add_argument("--particles", type=int, help="total particle count")
    parser.add_argument("--box", type=float, help="box edge length (sigma)")
    parser.add_argument("--dt", type=float, help="time step (LJ units)")
    parser.add_argument("--cutoff", type=float, help="interaction cutoff (sigma)")
    parser.add_argument("--temperature", type=float, help="initial temperature")
    parser.add_argument("--seed", type=int, help="RNG seed")
    parser.add_argument("--steps-per-publish", type=int, help="sim steps per snapshot")
    parser.add_argument("--steps", type=int, default=0,
                        help="stop after N steps (0 = run until Terminate)")
    parser.add_argument("--size", default="256x256", help="frame size WxH")
    parser.add_argument("--mode", choices=("opaque", "vdi"), default="opaque")
    parser.add_argument("--encoding", choices=tuple(ENCODING_IDS), default="raw")
    parser.add_argument("--port", type=int, default=8765, help="stream listen port")
    parser.add_argument("--delay-steps", type=int, default=2,
                        help="steering apply-at-step delay")
    parser.add_argument("--radius", type=float, default=0.3, help="sphere radius (sigma)")
    parser.add_argument("--headless", action="store_true", help="no stream server")
    parser.add_argument("--shm-prefix", default="insitu",
                        help="shared-memory name prefix (isolates concurrent runs)")
    parser.add_argument("--stats-dir", default="", help="write per-process stats JSON here")


def _spec_from_args(args, steering_script: str = "") -> RunSpec:
    if args.config:
        sim = load_sim_config(args.config)
    else:
        sim = SimConfig()
    overrides = {}
    for field, attr in [
        ("particle_count", "particles"), ("box_length", "box"), ("dt", "dt"),
        ("cutoff", "cutoff"), ("target_temperature", "temperature"),
        ("seed", "seed"), ("rank_count", "ranks"), ("steps_per_publish", "steps_per_publish"),
    ]:
        value = getattr(args, attr, None)
        if value is not None:
            overrides[field] = value
    if overrides:
        from dataclasses import replace
        sim = replace(sim, **overrides)
    try:
        w, h = (int(v) for v in args.size.lower().split("x"))
    except ValueError:
        raise SystemExit(f"bad --size {args.size!r}, expected WxH")
    encoding = ENCODING_IDS[args.encoding]
    if args.mode == "vdi":
        encoding = ENCODING_IDS["vdi"]
    spec = RunSpec(
        sim=sim, width=w, height=h, mode=args.mode, encoding=encoding,
        sphere_radius=args.radius, delay_steps=args.delay_steps,
        max_steps=args.steps, listen_port=args.port, headless=args.headless,
        shm_prefix=args.shm_prefix, steering_script=steering_script,
        stats_dir=args.stats_dir,
    )
    spec.validate()
    return spec


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="insitu",
                                     description="desk-scale in-situ visualization runtime")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="launch sim+render rank processes")
    _add_run_args(p_run)

    p_bench = sub.add_parser("bench", help="scripted benchmark; prints a JSON report")
    _add_run_args(p_bench)
    p_bench.add_argument("--frames", type=int, default=360, help="frames to measure")
    p_bench.add_argument("--skip-kernels", action="store_true",
                         help="skip the backend comparison section")
    p_bench.add_argument("--report", help="also write the report to this file")

    p_dump = sub.add_parser("shmdump", help="print a shared segment's header")
    p_dump.add_argument("name", help="segment name, e.g. insitu.r0.e0")

    p_replay = sub.add_parser("replay", help="run with a scripted steering schedule")
    p_replay.add_argument("script", help="steering script: '<step> <command> [args]' lines")
    _add_run_args(p_replay)

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")

    if args.command == "run":
        from insitu.runtime import run
        return run(_spec_from_args(args))

    if args.command == "bench":
        from insitu.runtime import run_benchmark
        spec = _spec_from_args(args).with_(bench_frames=args.frames, benchmark=True)
        report = run_benchmark(spec, skip_kernels=args.skip_kernels)
        text = report.to_json()
        print(text)
        if report.fps_mean < 60.0:
            print(f"warning: frame rate {report.fps_mean:.1f} fps below the 60 fps target",
                  file=sys.stderr)
        if report.reproject_ms >= 20.0:
            print(f"warning: reprojection {report.reproject_ms:.1f} ms above the 20 ms target",
                  file=sys.stderr)
        if args.report:
            with open(args.report, "w") as fh:
                fh.write(text)
        return 0

    if args.command == "shmdump":
        from insitu.shmem import SegmentName, SegmentNotFound, dump_header
        try:
            print(dump_header(SegmentName.parse(args.name)))
        except SegmentNotFound as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        return 0

    if args.command == "replay":
        from insitu.runtime import run
        return run(_spec_from_args(args, steering_script=args.script))

    return 2


if __name__ == "__main__":
    raise SystemExit(main())
