"""Command line entry points.

Subcommands:
  run         run a scenario to convergence, write report.csv/report.json
              and the final state sequence; exit 0 on convergence, 2 when
              the iteration budget ran out, 1 on error
  serve       expose a session over a WebSocket for UI clients
  gen-stairs  emit a staircase scenario document
  export-map  voxelize a scenario and write the occupied-cell records
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import maps, orchestrator, world
from .orchestrator import load_edit_script, run_learning
from .world import ScenarioError, generate_stairs, load_scenario, save_scenario


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="quadnav", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario headlessly")
    run.add_argument("--scenario", required=True, help="scenario JSON file")
    run.add_argument("--edits", help="edit script JSON file (iteration-keyed)")
    run.add_argument("--max-iters", type=int, default=20)
    run.add_argument("--out", default=".", help="output directory for reports")
    run.add_argument("--no-timing", action="store_true",
                     help="zero the wall_time_s column for golden-file comparisons")

    serve = sub.add_parser("serve", help="serve the session protocol")
    serve.add_argument("--listen", required=True, help="host:port to bind")
    serve.add_argument("--scenario", help="scenario to preload")

    gen = sub.add_parser("gen-stairs", help="generate a staircase scenario")
    gen.add_argument("--steps", type=int, required=True)
    gen.add_argument("--rise", type=float, default=0.1)
    gen.add_argument("--run", type=float, default=0.3, dest="run_depth")
    gen.add_argument("--width", type=float, default=1.0)
    gen.add_argument("--out", required=True, help="output scenario path")

    exp = sub.add_parser("export-map", help="voxelize a scenario to a record stream")
    exp.add_argument("--scenario", required=True)
    exp.add_argument("--out", required=True)
    return p


def cmd_run(args) -> int:
    try:
        scenario = load_scenario(Path(args.scenario).read_text())
    except (OSError, ScenarioError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    edits = None
    if args.edits:
        try:
            edits = load_edit_script(Path(args.edits).read_text())
        except (OSError, ValueError) as e:
            print(f"error: bad edit script: {e}", file=sys.stderr)
            return 1
    try:
        report = run_learning(scenario, max_iterations=args.max_iters, edits=edits)
    except orchestrator.OrchestratorError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    include_timing = not args.no_timing
    (out / "report.csv").write_text(report.to_csv(include_timing=include_timing))
    (out / "report.json").write_text(
        json.dumps(report.to_json(include_timing=include_timing), indent=2, sort_keys=True) + "\n"
    )
    (out / "final_path.jsonl").write_text(orchestrator.export_final_path(report.final_path))
    for m in report.iterations:
        wt = m.wall_time if include_timing else 0.0
        print(f"iteration {m.iteration}: states={m.path_length_states} "
              f"requests={m.request_count} expansions={m.global_expansions} "
              f"wall={wt:.3f}s")
    if report.converged:
        print(f"converged after {len(report.iterations)} iterations")
        return 0
    print("did not converge within the iteration budget", file=sys.stderr)
    return 2


def cmd_serve(args) -> int:
    from .session import serve_forever

    host, _, port = args.listen.rpartition(":")
    if not host:
        host = "127.0.0.1"
    try:
        port_num = int(port)
    except ValueError:
        print(f"error: bad listen address {args.listen!r}", file=sys.stderr)
        return 1
    scenario = None
    if args.scenario:
        try:
            scenario = load_scenario(Path(args.scenario).read_text())
        except (OSError, ScenarioError) as e:
            print(f"error: {e}", file=sys.stderr)
            return 1
    try:
        serve_forever(host, port_num, scenario)
    except OSError as e:
        print(f"error: cannot bind {args.listen}: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("shutting down")
    return 0


def cmd_gen_stairs(args) -> int:
    try:
        boxes = generate_stairs(args.steps, args.rise, args.run_depth, args.width)
    except ScenarioError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    total_run = args.steps * args.run_depth
    top = args.steps * args.rise
    floor = world.BoxObstacle(
        center=[total_run / 2.0 - 1.0, 0.0, -0.05],
        half_extents=[total_run / 2.0 + 1.5, args.width / 2.0 + 0.2, 0.05],
        id="floor",
    )
    scenario = world.Scenario(
        boxes=[floor] + boxes,
        start_pose=([-0.6, 0.0, 0.22], 0.0),
        goal_pose=([total_run + 0.7, 0.0, top + 0.22], 0.0),
    )
    Path(args.out).write_text(save_scenario(scenario))
    print(f"wrote {args.out}")
    return 0


def cmd_export_map(args) -> int:
    try:
        scenario = load_scenario(Path(args.scenario).read_text())
        vmap = world.voxelize(scenario)
    except (OSError, ScenarioError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    Path(args.out).write_text(maps.export_voxel_records(vmap))
    print(f"wrote {args.out} ({len(vmap.occupied)} occupied cells)")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "run": cmd_run,
        "serve": cmd_serve,
        "gen-stairs": cmd_gen_stairs,
        "export-map": cmd_export_map,
    }
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
