"""Command-line entry point: simulate, run, profile, oracle."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

from . import oracles
from .detection_io import write_detection_stream
from .ego_speed import write_gps_log, write_pulse_log
from .pipeline import (ConfigError, InputError, StageError, StageTiming, emit_timeline,
                       iter_run, load_config, profile_report, with_overrides)
from .geometry import CameraModel
from .simulator import ScenarioError, collect, load_scenario, simulate, write_ground_truth

EXIT_OK, EXIT_CONFIG, EXIT_INPUT = 0, 2, 3


def _pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, type=Path, help="pipeline config (YAML)")
    p.add_argument("--mode", choices=("staged", "sequential"))
    p.add_argument("--risk", dest="risk_mode", choices=("ttc", "mc"))
    p.add_argument("--rollouts", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--speed-source", choices=("lane", "gps", "none"))
    p.add_argument("--out-timeline", type=Path)
    p.add_argument("--out-profile", type=Path)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="monorisk", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="write detection/pulse/GPS/truth streams for a scenario")
    sim.add_argument("--config", required=True, type=Path, help="scenario config (YAML)")
    sim.add_argument("--seed", type=int)
    sim.add_argument("--out-dir", required=True, type=Path)

    run = sub.add_parser("run", help="run the pipeline and write the risk timeline")
    _pipeline_flags(run)

    prof = sub.add_parser("profile", help="run the pipeline and print the timing report")
    _pipeline_flags(prof)
    prof.add_argument("--format", choices=("text", "json"), default="text")

    orc = sub.add_parser("oracle", help="run brute-force reference checks")
    orc.add_argument("check", choices=("ttc", "tracker", "geometry", "all"))
    orc.add_argument("--seed", type=int, default=0)
    orc.add_argument("--n", type=int, help="sample count override")
    return parser


def _write(path: Optional[Path], data: bytes) -> None:
    if path is None:
        sys.stdout.buffer.write(data)
        sys.stdout.flush()
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)


def _cmd_simulate(args) -> int:
    scenario = load_scenario(args.config)
    if args.seed is not None:
        scenario = scenario.with_seed(args.seed)
    data = collect(simulate(scenario))
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "detections.jsonl").write_bytes(write_detection_stream(data["detections"]))
    (out / "pulses.jsonl").write_bytes(write_pulse_log(data["pulses"]))
    (out / "gps.jsonl").write_bytes(write_gps_log(data["gps"]))
    (out / "truth.jsonl").write_bytes(write_ground_truth(data["truth"]))
    print(f"wrote {len(data['detections'])} frames to {out}")
    return EXIT_OK


def _configured(args):
    config = load_config(args.config)
    return with_overrides(config, mode=args.mode, risk_mode=args.risk_mode,
                          rollouts=args.rollouts, seed=args.seed,
                          speed_source=args.speed_source, out_timeline=args.out_timeline,
                          out_profile=args.out_profile)


def _cmd_run(args) -> int:
    config = _configured(args)
    timing = StageTiming()
    # stream straight to the destination so long runs keep bounded memory
    if config.out_timeline is None:
        for r in iter_run(config, timing):
            _write(None, emit_timeline([r]))
    else:
        config.out_timeline.parent.mkdir(parents=True, exist_ok=True)
        with open(config.out_timeline, "wb") as fh:
            for r in iter_run(config, timing):
                fh.write(emit_timeline([r]))
    if config.out_profile is not None:
        _write(config.out_profile, profile_report(timing, "json"))
    return EXIT_OK


def _cmd_profile(args) -> int:
    config = _configured(args)
    timing = StageTiming()
    with open(config.out_timeline, "wb") if config.out_timeline else _Null() as fh:
        for r in iter_run(config, timing):
            fh.write(emit_timeline([r]))
    if config.out_profile is not None:
        _write(config.out_profile, profile_report(timing, "json"))
    _write(None, profile_report(timing, args.format))
    return EXIT_OK


class _Null:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False

    def write(self, data):
        pass


def _default_camera() -> CameraModel:
    return CameraModel(focal_length_px=700.0, mount_height_m=1.5, horizon_row_px=360.0,
                       principal_col_px=640.0, image_width_px=1280, image_height_px=720)


def _cmd_oracle(args) -> int:
    checks = ("ttc", "tracker", "geometry") if args.check == "all" else (args.check,)
    report = {}
    for name in checks:
        if name == "ttc":
            report[name] = oracles.ttc_agreement(args.n or 1000, args.seed)
        elif name == "tracker":
            report[name] = oracles.tracker_posterior_check(seeds=args.n or 50)
        else:
            report[name] = oracles.geometry_roundtrip(_default_camera(), args.n or 10_000, args.seed)
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    handler = {"simulate": _cmd_simulate, "run": _cmd_run, "profile": _cmd_profile,
               "oracle": _cmd_oracle}[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ScenarioError as exc:
        code = EXIT_CONFIG if args.command == "simulate" else EXIT_INPUT
        print(f"scenario error: {exc}", file=sys.stderr)
        return code
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except StageError as exc:
        print(f"pipeline error: {exc}", file=sys.stderr)
        return EXIT_INPUT if isinstance(exc.cause, InputError) else 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
