"""Command-line entry point.

Subcommands:
  sim          run the supervisor against the simulator, optionally serving
               telemetry for a console
  replay       re-emit the telemetry stream recorded in a run log
  check-frames verify a motor frame dump decodes/re-encodes bit-exactly
  map-dump     summarize a serialized elevation grid

`sim` exits 0 on a clean run, 1 on a diverged simulation; bad flags exit 2.
The default bind address comes from QUADSTACK_BIND when --listen is given
without a value.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import motor_bus
from .gateway import TelemetryServer, encode_payload
from .mapping import grid_to_message
from .model import load_model_file, reference_model
from .policy import load_policy
from .runtime import SimRunner
from .sim import make_terrain
from .supervisor import Supervisor

DEFAULT_BIND = os.environ.get("QUADSTACK_BIND", "127.0.0.1:8765")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quadstack")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("sim", help="run the control stack in simulation")
    p_sim.add_argument("--config", help="robot config YAML (default: reference)")
    p_sim.add_argument("--terrain", default="flat",
                       choices=["flat", "stairs", "slope"])
    p_sim.add_argument("--rise", type=float, default=0.17)
    p_sim.add_argument("--run", type=float, default=0.29, dest="run_len")
    p_sim.add_argument("--grade", type=float, default=0.2)
    p_sim.add_argument("--policy", help="policy weights file")
    p_sim.add_argument("--gait", default="scripted", choices=["scripted", "policy"])
    p_sim.add_argument("--listen", nargs="?", const=DEFAULT_BIND, default=None,
                       metavar="HOST:PORT", help="serve telemetry")
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--duration", type=float, default=10.0)
    p_sim.add_argument("--log", help="write a run log (one JSON record per tick)")
    p_sim.add_argument("--frames", help="write the motor frame dump here")
    p_sim.add_argument("--map-out", help="write the final elevation grid here")
    p_sim.add_argument("--rays", type=int, default=600)
    p_sim.add_argument("--cmd", type=float, nargs=3, default=(0.3, 0.0, 0.0),
                       metavar=("VX", "VY", "WZ"))
    p_sim.add_argument("--no-mapping", action="store_true")
    p_sim.add_argument("--realtime", action=argparse.BooleanOptionalAction,
                       default=None, help="pace to wall clock "
                                          "(default: only when listening)")

    p_replay = sub.add_parser("replay", help="re-emit telemetry from a run log")
    p_replay.add_argument("log")

    p_check = sub.add_parser("check-frames", help="verify a frame dump")
    p_check.add_argument("dump")

    p_map = sub.add_parser("map-dump", help="summarize a grid file")
    p_map.add_argument("file")
    p_map.add_argument("--ascii", action="store_true",
                       help="render an ascii height map")
    return parser


def cmd_sim(args) -> int:
    model = load_model_file(args.config) if args.config else reference_model()

    if args.terrain == "stairs":
        terrain = make_terrain("stairs", rise=args.rise, run=args.run_len)
    elif args.terrain == "slope":
        terrain = make_terrain("slope", grade=args.grade)
    else:
        terrain = make_terrain("flat")

    policy = load_policy(args.policy) if args.policy else None
    if args.gait == "policy" and policy is None:
        print("error: --gait policy requires --policy", file=sys.stderr)
        return 2

    supervisor = Supervisor(model, policy=policy)

    server = None
    if args.listen:
        host, _, port = args.listen.rpartition(":")
        server = TelemetryServer(host or "127.0.0.1", int(port)).start()
        print(f"telemetry on {server.host}:{server.port}")

    realtime = args.realtime if args.realtime is not None else bool(server)
    runner = SimRunner(model, terrain, supervisor, seed=args.seed,
                       server=server, mapping_enabled=not args.no_mapping,
                       lidar_rays=args.rays, realtime=realtime,
                       log_path=args.log)

    # headless runs drive themselves; an operator drives listening runs
    autostart = server is None
    status = runner.run(args.duration, autostart=autostart,
                        auto_cmd=tuple(args.cmd), gait=args.gait)

    if args.frames:
        with open(args.frames, "w", encoding="utf-8") as f:
            f.write(motor_bus.dump_frames(runner.bus.frame_log))
    if args.map_out:
        with open(args.map_out, "w", encoding="utf-8") as f:
            json.dump(grid_to_message(runner.grid), f, sort_keys=True)
            f.write("\n")

    final = runner.state
    print(f"t={final.t:.2f}s mode={supervisor.mode.value} "
          f"base=({final.base_position[0]:+.3f}, {final.base_position[1]:+.3f}, "
          f"{final.base_position[2]:+.3f})"
          + (" [diverged]" if status else ""))
    return status


def cmd_replay(args) -> int:
    try:
        with open(args.log, "r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                record = json.loads(line)
                payload = encode_payload(record["robot_state"])
                sys.stdout.write(payload.decode("utf-8") + "\n")
    except (OSError, json.JSONDecodeError, KeyError) as e:
        print(f"error: bad run log: {e}", file=sys.stderr)
        return 1
    return 0


def cmd_check_frames(args) -> int:
    try:
        with open(args.dump, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    errors = motor_bus.check_frames(text)
    if errors:
        for err in errors:
            print(err, file=sys.stderr)
        print(f"FAIL: {len(errors)} frame(s) not bit-exact")
        return 1
    n = len([l for l in text.splitlines() if l.strip() and not l.startswith("#")])
    print(f"OK: {n} frames bit-exact")
    return 0


def cmd_map_dump(args) -> int:
    import numpy as np

    from .mapping import grid_from_message
    try:
        with open(args.file, "r", encoding="utf-8") as f:
            msg = json.load(f)
        grid = grid_from_message(msg)
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as e:
        print(f"error: bad grid file: {e}", file=sys.stderr)
        return 1
    valid = grid.valid
    print(f"grid {grid.size}x{grid.size} @ {grid.resolution} m/cell, "
          f"origin ({grid.origin[0]:.2f}, {grid.origin[1]:.2f})")
    print(f"valid cells: {int(valid.sum())}/{grid.size * grid.size}")
    if valid.any():
        h = grid.height[valid]
        print(f"height range: [{h.min():.3f}, {h.max():.3f}] m, "
              f"mean variance {grid.variance()[valid].mean():.2e} m^2")
    if args.ascii and valid.any():
        ramp = " .:-=+*#%@"
        h = np.where(valid, grid.height, np.nan)
        lo, hi = np.nanmin(h), np.nanmax(h)
        span = (hi - lo) or 1.0
        stride = max(1, grid.size // 64)
        for j in range(grid.size - 1, -1, -stride):
            row = ""
            for i in range(0, grid.size, stride):
                if not valid[i, j]:
                    row += "?"
                else:
                    row += ramp[int((grid.height[i, j] - lo) / span * (len(ramp) - 1))]
            print(row)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "sim":
        return cmd_sim(args)
    if args.command == "replay":
        return cmd_replay(args)
    if args.command == "check-frames":
        return cmd_check_frames(args)
    if args.command == "map-dump":
        return cmd_map_dump(args)
    return 2


if __name__ == "__main__":
    sys.exit(main())
