import json
import math

import numpy as np
import pytest

from marp.env import FAMILIES, GridMap, Scenario, generate_scenario, with_scenario
from marp.harness import (
    CSV_FIELDS,
    SuiteConfig,
    agent_seeds,
    build_agents,
    compute_bounds,
    penalized_length,
    plot_data,
    render,
    replay_episode,
    run_episode,
    run_episodes,
    run_suite,
    summarize,
    to_csv,
)
from marp.opponents import ChasingAgent, RandomAgent, ShortestPathAgent
from marp.planners import SafePlanner


def test_agent_seeds_are_independent_and_stable():
    a = [g.random() for g in agent_seeds(3, 4)]
    b = [g.random() for g in agent_seeds(3, 4)]
    assert a == b and len(set(a)) == 4


def test_build_agents_follows_specs():
    grid = GridMap.from_rows(["....", "...."])
    sc = Scenario(grid, ((0, 0), (0, 3), (1, 0), (1, 3)), ((1, 3), (1, 0), (0, 3), (0, 1)), 0,
                  ("sp", "rand:0.2", "chase:1"), 10, 0)
    agents = build_agents(sc, "safe", 0)
    assert isinstance(agents[0], SafePlanner)
    assert isinstance(agents[1], ShortestPathAgent)
    assert isinstance(agents[2], RandomAgent) and agents[2].p == 0.2
    assert isinstance(agents[3], ChasingAgent) and agents[3].target == 0


def test_episode_ends_at_goal_and_counts_steps():
    grid = GridMap.from_rows(["....."])
    sc = Scenario(grid, ((0, 0), (0, 4)), ((0, 3), (0, 4)), 0, ("sp",), 10, 0)
    rec = run_episode(sc, "astar", 0)
    assert rec.reached_goal and rec.modelling_path_length == 3
    assert len(rec.trajectory) == 3


def test_collision_and_timeout_are_penalized():
    grid = GridMap.from_rows(["...."])
    crash = Scenario(grid, ((0, 0), (0, 3)), ((0, 3), (0, 0)), 0, ("sp",), 10, 0)
    rec = run_episode(crash, "astar", 0)
    assert rec.collided and penalized_length(rec, 10) == 10
    stuck = Scenario(GridMap.from_rows(["..."]), ((0, 0), (0, 1)), ((0, 2), (0, 1)), 0, ("sp",), 6, 0)
    rec = run_episode(stuck, "safe", 0)
    assert rec.timed_out and rec.modelling_path_length == 6
    assert penalized_length(rec, 6) == 6


def test_failed_construction_is_recorded():
    sc = generate_scenario("large50a", "rational", 0)
    rec = run_episode(sc, "qmdp", 0)
    assert rec.failed and "CapacityError" in rec.error


def test_selfplay_runs_until_everyone_is_done():
    sc = generate_scenario("small2a", "selfplay", 2)
    rec = run_episode(sc, "safe", 2)
    assert len(rec.agents) == 2
    for out in rec.agents:
        assert out.arrived or out.collided or out.timed_out


def test_replay_is_bit_identical():
    sc = generate_scenario("small2a", "rational", 5)
    rec = run_episode(sc, "mcts:budget=15", 9)
    dumped = json.loads(json.dumps(rec.to_json(sc)))
    again, same = replay_episode(dumped)
    assert same
    assert again.fingerprint() == rec.fingerprint()


def test_different_seeds_differ():
    sc = with_scenario(generate_scenario("small2a", "rational", 0), opponent_specs=("rand:0.5",))
    fps = {json.dumps(run_episode(sc, "safe", s).fingerprint()["trajectory"]) for s in range(4)}
    assert len(fps) > 1


def test_summary_matches_recount():
    cfg = SuiteConfig(family="small2a", planners=["astar"], runs=12)
    records = run_episodes(cfg, "astar")
    row = summarize(cfg, "astar", records)
    assert row.collision_ratio == sum(r.collided for r in records) / 12
    pen = [penalized_length(r, 32) for r in records]
    assert row.mean_penalized == pytest.approx(np.mean(pen))
    raw = [r.modelling_path_length for r in records if r.reached_goal]
    assert row.mean_raw == pytest.approx(np.mean(raw))


def test_bounds_hold_for_every_episode():
    cfg = SuiteConfig(family="small2a", planners=["safe"], runs=15)
    records = run_episodes(cfg, "safe")
    upper = FAMILIES["small2a"].max_steps
    for k, rec in enumerate(records):
        sc = generate_scenario("small2a", "rational", k)
        lower = compute_bounds([sc], "rational").lower_mean
        pen = penalized_length(rec, upper)
        if rec.collided:
            assert pen == upper
        else:
            assert lower <= pen <= upper


def test_selfplay_bound_uses_joint_plan():
    sc = generate_scenario("small2a", "selfplay", 1)
    b = compute_bounds([sc], "selfplay")
    assert b.upper == 32 and b.lower_mean > 0


def test_csv_schema_and_plot_data():
    cfg = SuiteConfig(family="tiny2a", planners=["astar", "safe"], runs=3)
    text = to_csv(run_suite(cfg), timings=False)
    lines = text.splitlines()
    assert lines[0] == ",".join(CSV_FIELDS)
    assert len(lines) == 3
    long = plot_data(text).splitlines()
    assert long[0] == "scenario_family,planner,class,metric,value"
    assert len(long) == 1 + 2 * (len(CSV_FIELDS) - 4)


def test_worker_count_does_not_change_results(monkeypatch):
    cfg = SuiteConfig(family="small2a", planners=["mcts:budget=10"], runs=4)
    monkeypatch.setenv("MARP_WORKERS", "1")
    one = [r.fingerprint() for r in run_episodes(cfg, "mcts:budget=10")]
    monkeypatch.setenv("MARP_WORKERS", "2")
    two = [r.fingerprint() for r in run_episodes(cfg, "mcts:budget=10")]
    assert one == two


def test_rational_pool_frequencies():
    counts = {}
    for seed in range(400):
        sc = generate_scenario("square4a", "rational", seed)
        for spec in sc.opponent_specs:
            counts[spec] = counts.get(spec, 0) + 1
    total = sum(counts.values())
    assert set(counts) == {"sp", "rand:0.2", "rand:0.5", "safe"}
    for c in counts.values():
        assert c / total == pytest.approx(0.25, abs=0.04)


def test_malicious_pool_uses_chasers():
    sc = generate_scenario("square4a", "malicious", 0, chase_p=0.3)
    assert set(sc.opponent_specs) == {"chase:0.3"}


def test_render_marks_agents_and_goals():
    grid = GridMap.from_rows(["..@", "..."])
    sc = Scenario(grid, ((0, 0), (1, 2)), ((1, 0), (0, 1)), 0, ("sp",), 5, 0)
    text = render(sc, [sc.initial_state()])
    assert text.splitlines()[:3] == ["t=0", "0b@", "a.1"]


def test_suite_config_validation():
    with pytest.raises(ValueError):
        SuiteConfig(family="nowhere", planners=["safe"])
    with pytest.raises(ValueError):
        SuiteConfig(family="small2a", planners=["warp"])
    assert SuiteConfig.from_dict({"family": "small2a", "planners": "safe"}).planners == ["safe"]


def test_raw_mean_is_nan_without_arrivals():
    grid = GridMap.from_rows(["..."])
    sc = Scenario(grid, ((0, 0), (0, 1)), ((0, 2), (0, 1)), 0, ("sp",), 4, 0)
    cfg = SuiteConfig(family="small2a", planners=["safe"], runs=1)
    row = summarize(cfg, "safe", [run_episode(sc, "safe", 0)])
    assert math.isnan(row.mean_raw)
