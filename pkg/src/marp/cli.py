"""Command-line entry point: ``marp gen|run|bench|replay|solve|plot-data``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import harness
from .env import FAMILIES, ScenarioError, generate_scenario, load_map, load_scenario, save_scenario
from .ne_oracle import CbsError, bounded_cbs, cbs


def _cmd_gen(args) -> int:
    if not args.family:
        raise SystemExit("gen: --family is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for seed in range(args.base_seed, args.base_seed + args.count):
        sc = generate_scenario(args.family, args.opponent_class, seed, chase_p=args.chase_p)
        stem = f"{args.family}-{args.opponent_class}-{seed}"
        map_name = f"{stem}.map"
        (out / map_name).write_text(sc.map.to_text())
        save_scenario(sc, out / f"{stem}.scen", map_path=map_name)
        print(out / f"{stem}.scen")
    return 0


def _scenario_from_args(args):
    if args.scenario:
        return load_scenario(args.scenario)
    if not args.family:
        raise SystemExit("run: give --scenario FILE or --family NAME")
    return generate_scenario(args.family, args.opponent_class, args.seed, chase_p=args.chase_p)


def _cmd_run(args) -> int:
    sc = _scenario_from_args(args)
    episode_seed = args.seed if args.episode_seed is None else args.episode_seed
    rec = harness.run_episode(sc, args.planner, episode_seed, goal_ghosting=args.ghosting,
                              until_all_arrive=True if args.all else None)
    if args.render:
        states = [s for s, _ in rec.trajectory]
        if rec.final_state is not None:
            states.append(rec.final_state)
        sys.stdout.write(harness.render(sc, states))
    if args.dump:
        with open(args.dump, "w") as fh:
            json.dump(rec.to_json(sc), fh)
    status = "error" if rec.failed else "collided" if rec.collided else "timeout" if rec.timed_out else "arrived"
    print(f"planner={rec.planner} status={status} length={rec.modelling_path_length} "
          f"steps={len(rec.step_ms)} fallbacks={rec.fallbacks}")
    if rec.error:
        print(rec.error, file=sys.stderr)
        return 1
    return 0


def _cmd_bench(args) -> int:
    with open(args.config) as fh:
        data = yaml.safe_load(fh)
    if args.runs is not None:
        data["runs"] = args.runs
    config = harness.SuiteConfig.from_dict(data)
    rows = harness.run_suite(config)
    text = harness.to_csv(rows, timings=not args.no_timings)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_replay(args) -> int:
    with open(args.record) as fh:
        data = json.load(fh)
    rec, same = harness.replay_episode(data)
    print(f"{'match' if same else 'MISMATCH'}: {len(rec.trajectory)} steps, length {rec.modelling_path_length}")
    return 0 if same else 1


def _cmd_solve(args) -> int:
    sc = load_scenario(args.agents) if args.map is None else None
    if args.map is not None:
        with open(args.agents) as fh:
            data = yaml.safe_load(fh)
        grid = load_map(args.map)
        starts = [tuple(a["start"]) for a in data["agents"]]
        goals = [tuple(a["goal"]) for a in data["agents"]]
    else:
        grid, starts, goals = sc.map, sc.starts, sc.goals
    timeout = None if args.timeout is None else args.timeout / 1000.0
    try:
        if args.w > 0:
            plan = bounded_cbs(grid, starts, goals, args.w, timeout=timeout)
        else:
            plan = cbs(grid, starts, goals, timeout=timeout)
    except CbsError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(plan.format())
    print(f"sum_of_costs {plan.sum_of_costs}")
    return 0


def _cmd_plot_data(args) -> int:
    text = harness.plot_data(Path(args.csv).read_text())
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="marp", description="Multi-agent route planning benchmark.")
    p.add_argument("-v", "--verbose", action="store_true", help="log planner fallbacks and warnings")
    sub = p.add_subparsers(dest="command", required=True)

    def scenario_source(sp):
        sp.add_argument("--family", choices=sorted(FAMILIES))
        sp.add_argument("--class", dest="opponent_class", default="rational",
                        choices=("rational", "malicious", "selfplay"))
        sp.add_argument("--chase-p", type=float, default=0.5)

    g = sub.add_parser("gen", help="write scenario and map files")
    scenario_source(g)
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--base-seed", type=int, default=0)
    g.add_argument("--out", default=".")
    g.set_defaults(func=_cmd_gen)

    r = sub.add_parser("run", help="play one episode")
    scenario_source(r)
    r.add_argument("--scenario", help="scenario file (overrides --family)")
    r.add_argument("--seed", type=int, default=0, help="scenario seed, and episode seed unless --episode-seed")
    r.add_argument("--episode-seed", type=int)
    r.add_argument("--planner", default="safe")
    r.add_argument("--ghosting", action="store_true", help="arrived agents stop occupying their goal")
    r.add_argument("--all", action="store_true", help="keep going until every agent is done")
    r.add_argument("--render", action="store_true", help="print an ASCII frame per step")
    r.add_argument("--dump", help="write the episode record as JSON")
    r.set_defaults(func=_cmd_run)

    b = sub.add_parser("bench", help="run a suite config and print the CSV summary")
    b.add_argument("config")
    b.add_argument("--runs", type=int)
    b.add_argument("--out")
    b.add_argument("--no-timings", action="store_true", help="zero the timing column (byte-stable output)")
    b.set_defaults(func=_cmd_bench)

    rp = sub.add_parser("replay", help="re-run a dumped episode and compare")
    rp.add_argument("record")
    rp.set_defaults(func=_cmd_replay)

    s = sub.add_parser("solve", help="plan for all agents with the conflict-based solver")
    s.add_argument("--map", help="map file; if omitted the scenario's own map is used")
    s.add_argument("--agents", required=True, help="scenario file listing starts and goals")
    s.add_argument("--w", type=float, default=0.0, help="suboptimality bound; 0 solves optimally")
    s.add_argument("--timeout", type=float, help="milliseconds")
    s.set_defaults(func=_cmd_solve)

    pd = sub.add_parser("plot-data", help="long-format rows from a bench CSV")
    pd.add_argument("csv")
    pd.add_argument("--out")
    pd.set_defaults(func=_cmd_plot_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (OSError, ScenarioError, ValueError, KeyError) as exc:
        print(f"marp {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
