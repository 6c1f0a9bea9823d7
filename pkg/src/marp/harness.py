"""Episode runner, metrics, bounds and the benchmark suite."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .env import (
    FAMILIES,
    Action,
    JointState,
    Scenario,
    ScenarioFamily,
    generate_scenario,
    outcome_actions,
    step,
)
from .ne_oracle import CbsError, Timeout, bounded_cbs, cbs
from .opponents import ChasingAgent, RandomAgent, ShortestPathAgent, all_pairs_distance, parse_opponent_spec
from .planners import Planner, PlannerContext, make_planner, parse_planner_spec
from .solvers import CapacityError

log = logging.getLogger("marp.harness")

CSV_FIELDS = (
    "scenario_family",
    "opponent_class",
    "planner",
    "runs",
    "mean_penalized",
    "std_penalized",
    "mean_raw",
    "std_raw",
    "collision_ratio",
    "mean_ms_per_step",
    "fallback_rate",
)


@dataclass
class AgentOutcome:
    length: int
    collided: bool
    timed_out: bool

    @property
    def arrived(self) -> bool:
        return not (self.collided or self.timed_out)


@dataclass
class EpisodeRecord:
    scenario_id: str
    seed: int
    planner: str
    trajectory: list  # (JointState, joint actions) per step
    final_state: JointState | None
    modelling_path_length: int
    collided: bool
    timed_out: bool
    step_ms: list = field(default_factory=list)
    fallbacks: int = 0
    error: str | None = None
    agents: list = field(default_factory=list)  # AgentOutcome per agent
    safe_audit: list = field(default_factory=list)  # (safe set, collided) per modelling step, when recorded

    @property
    def failed(self) -> bool:
        return self.error is not None

    @property
    def reached_goal(self) -> bool:
        return not (self.collided or self.timed_out or self.failed)

    def fingerprint(self) -> dict:
        """Everything except wall-clock timings, for bit-exact replay comparison."""
        return {
            "scenario_id": self.scenario_id,
            "seed": self.seed,
            "planner": self.planner,
            "trajectory": [(s.to_json(), [int(a) for a in acts]) for s, acts in self.trajectory],
            "final_state": None if self.final_state is None else self.final_state.to_json(),
            "modelling_path_length": self.modelling_path_length,
            "collided": self.collided,
            "timed_out": self.timed_out,
            "fallbacks": self.fallbacks,
            "error": self.error,
            "agents": [asdict(a) for a in self.agents],
        }

    def to_json(self, scenario: Scenario | None = None) -> dict:
        data = self.fingerprint()
        data["step_ms"] = list(self.step_ms)
        if scenario is not None:
            # Dumps embed the map so they replay from any directory.
            sc = scenario.to_json()
            sc.pop("map", None)
            sc["map_text"] = scenario.map.to_text()
            data["scenario"] = sc
        return data


def penalized_length(record: EpisodeRecord, upper_bound: float) -> float:
    if record.collided or record.timed_out or record.failed:
        return float(upper_bound)
    return float(record.modelling_path_length)


def agent_seeds(seed: int, n_agents: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_agents)]


def build_agents(scenario: Scenario, planner_spec: str, seed: int, family: ScenarioFamily | None = None):
    """One controller per agent; opponents marked ``self`` run the modelling agent's planner spec."""
    if family is None:
        family = FAMILIES.get(scenario.family)
    defaults = family.planner_defaults() if family is not None else None
    rngs = agent_seeds(seed, scenario.n_agents)
    agents = []
    for i in range(scenario.n_agents):
        spec = planner_spec if i == scenario.modelling_index else scenario.spec_of(i)
        ctx = PlannerContext(
            grid=scenario.map,
            index=i,
            goal=scenario.goals[i],
            n_agents=scenario.n_agents,
            epsilon=scenario.epsilon,
            rng=rngs[i],
            defaults=defaults,
        )
        if spec == "self":
            spec = planner_spec
        if i == scenario.modelling_index or spec not in ("sp",) and not spec.startswith(("rand", "chase")):
            agents.append(make_planner(spec, ctx))
            continue
        opp = parse_opponent_spec(spec)
        if opp.kind == "sp":
            agents.append(ShortestPathAgent(scenario.map, i, scenario.goals[i], rngs[i]))
        elif opp.kind == "rand":
            agents.append(RandomAgent(scenario.map, i, scenario.goals[i], rngs[i], opp.p))
        else:
            agents.append(ChasingAgent(scenario.map, i, scenario.goals[i], rngs[i], opp.p, scenario.modelling_index))
    return agents


def run_episode(
    scenario: Scenario,
    planner_spec: str,
    seed: int,
    goal_ghosting: bool = False,
    selfplay: bool | None = None,
    until_all_arrive: bool | None = None,
    audit_safe: bool = False,
    record_trajectory: bool = True,
) -> EpisodeRecord:
    """Play one episode. The modelling agent's episode ends at her goal, at a collision, or at max_steps.

    In self-play (every opponent spec is ``self``) the loop continues until
    all agents are done. ``until_all_arrive`` forces that behaviour.
    """
    me = scenario.modelling_index
    if selfplay is None:
        selfplay = bool(scenario.opponent_specs) and all(s == "self" for s in scenario.opponent_specs)
    run_all = selfplay if until_all_arrive is None else until_all_arrive
    sid = f"{scenario.family}:{scenario.seed}"
    state = scenario.initial_state()
    try:
        agents = build_agents(scenario, planner_spec, seed)
        for agent in agents:
            agent.reset(state)
    except (CapacityError, ValueError, CbsError) as exc:
        return EpisodeRecord(sid, seed, planner_spec, [], state, scenario.max_steps, False, True,
                             error=f"{type(exc).__name__}: {exc}")
    n = scenario.n_agents
    lengths = [0 if state.arrived[i] else None for i in range(n)]
    collided = [False] * n
    trajectory = []
    step_ms = []
    audit = []
    t = 0
    while t < scenario.max_steps:
        own_done = state.arrived[me] or state.removed[me]
        if own_done and not run_all:
            break
        if all(state.arrived[i] or state.removed[i] for i in range(n)):
            break
        actions = []
        record = None
        for i, agent in enumerate(agents):
            if state.removed[i] or state.arrived[i]:
                actions.append(Action.STAY)
                continue
            if i == me:
                t0 = time.perf_counter()
                a = agent.act(state)
                step_ms.append((time.perf_counter() - t0) * 1000.0)
                if audit_safe:
                    record = dict(getattr(agent, "last_record", {}) or {})
            else:
                a = agent.act(state)
            actions.append(Action(a))
        nxt, hits = step(scenario.map, state, actions, scenario.goals, goal_ghosting)
        observed = outcome_actions(state, nxt)
        for agent in agents:
            agent.observe(state, observed)
        if record_trajectory:
            trajectory.append((state, tuple(actions)))
        if audit_safe and record is not None:
            audit.append((record.get("safe_set"), any(me in pair for pair in hits)))
        t += 1
        for i in range(n):
            if lengths[i] is None and (nxt.arrived[i] or nxt.removed[i]):
                lengths[i] = t
                collided[i] = nxt.removed[i]
        state = nxt
    outcomes = []
    for i in range(n):
        if lengths[i] is None:
            outcomes.append(AgentOutcome(scenario.max_steps, False, True))
        else:
            outcomes.append(AgentOutcome(lengths[i], collided[i], False))
    mine = outcomes[me]
    fallbacks = getattr(agents[me], "fallbacks", 0)
    return EpisodeRecord(
        sid,
        seed,
        planner_spec,
        trajectory,
        state,
        mine.length,
        mine.collided,
        mine.timed_out,
        step_ms,
        fallbacks,
        None,
        outcomes,
        audit,
    )


def replay_episode(data: dict, scenario: Scenario | None = None) -> tuple[EpisodeRecord, bool]:
    """Re-run a dumped record and report whether the fingerprint matches."""
    if scenario is None:
        scenario = Scenario.from_json(data["scenario"])
    rec = run_episode(scenario, data["planner"], data["seed"])
    expected = {k: data[k] for k in rec.fingerprint()}
    return rec, json.loads(json.dumps(rec.fingerprint())) == json.loads(json.dumps(expected))


# -- bounds --------------------------------------------------------------------


@dataclass
class Bounds:
    lower_mean: float
    lower_std: float
    upper: int
    approximate: bool = False


def compute_bounds(scenarios: Sequence[Scenario], mode: str, w: float = 0.2) -> Bounds:
    """Table-style lower bounds: own shortest path, or per-agent optimal joint cost under self-play."""
    if not scenarios:
        raise ValueError("need at least one scenario")
    values = []
    approximate = False
    for sc in scenarios:
        if mode in ("rational", "malicious"):
            me = sc.modelling_index
            dist = all_pairs_distance(sc.map)[sc.map.index[sc.goals[me]]]
            values.append(float(dist[sc.map.index[sc.starts[me]]]))
        elif mode == "selfplay":
            try:
                plan = cbs(sc.map, sc.starts, sc.goals)
            except Timeout:
                plan = bounded_cbs(sc.map, sc.starts, sc.goals, w)
                approximate = True
            values.append(plan.sum_of_costs / sc.n_agents)
        else:
            raise ValueError(f"unknown mode {mode!r}")
    return Bounds(float(np.mean(values)), float(np.std(values)), scenarios[0].max_steps, approximate)


# -- suites ------------------------------------------------------------------


@dataclass
class SuiteConfig:
    family: str
    planners: list
    opponent_class: str = "rational"
    runs: int = 10
    base_seed: int = 0
    workers: int = 1
    chase_p: float = 0.5
    goal_ghosting: bool = False

    def __post_init__(self):
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        if self.family not in FAMILIES:
            raise ValueError(f"unknown scenario family {self.family!r}")
        if self.opponent_class not in ("rational", "malicious", "selfplay"):
            raise ValueError("opponent_class must be rational, malicious or selfplay")
        for p in self.planners:
            parse_planner_spec(p)

    @classmethod
    def from_dict(cls, data: dict) -> "SuiteConfig":
        data = dict(data)
        if isinstance(data.get("planners"), str):
            data["planners"] = [data["planners"]]
        return cls(**data)


@dataclass
class SummaryRow:
    scenario_family: str
    opponent_class: str
    planner: str
    runs: int
    mean_penalized: float
    std_penalized: float
    mean_raw: float
    std_raw: float
    collision_ratio: float
    mean_ms_per_step: float
    fallback_rate: float
    failures: int = 0


def suite_scenario(config: SuiteConfig, k: int) -> Scenario:
    return generate_scenario(config.family, config.opponent_class, config.base_seed + k, chase_p=config.chase_p)


def _run_one(args) -> EpisodeRecord:
    config, planner, k = args
    scenario = suite_scenario(config, k)
    rec = run_episode(scenario, planner, config.base_seed + k, config.goal_ghosting, record_trajectory=False)
    return rec


def worker_count(config: SuiteConfig) -> int:
    env = os.environ.get("MARP_WORKERS")
    if env:
        return max(1, int(env))
    return max(1, int(config.workers))


def run_episodes(config: SuiteConfig, planner: str) -> list[EpisodeRecord]:
    """All episodes of one planner, in episode-index order regardless of worker count."""
    jobs = [(config, planner, k) for k in range(config.runs)]
    workers = worker_count(config)
    if workers == 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def summarize(config: SuiteConfig, planner: str, records: Sequence[EpisodeRecord]) -> SummaryRow:
    upper = FAMILIES[config.family].max_steps
    pen = np.array([penalized_length(r, upper) for r in records])
    raw = np.array([r.modelling_path_length for r in records if r.reached_goal], dtype=float)
    steps = sum(len(r.step_ms) for r in records)
    ms = sum(sum(r.step_ms) for r in records)
    return SummaryRow(
        config.family,
        config.opponent_class,
        planner,
        len(records),
        float(pen.mean()),
        float(pen.std()),
        float(raw.mean()) if raw.size else math.nan,
        float(raw.std()) if raw.size else math.nan,
        sum(r.collided for r in records) / len(records),
        ms / steps if steps else 0.0,
        sum(r.fallbacks for r in records) / steps if steps else 0.0,
        sum(r.failed for r in records),
    )


def run_suite(config: SuiteConfig, keep_records: bool = False):
    rows, all_records = [], {}
    for planner in config.planners:
        records = run_episodes(config, planner)
        failed = [r for r in records if r.failed]
        if failed:
            log.warning("%d of %d episodes of %s failed: %s", len(failed), len(records), planner, failed[0].error)
        rows.append(summarize(config, planner, records))
        if keep_records:
            all_records[planner] = records
    return (rows, all_records) if keep_records else rows


def _fmt(x):
    if isinstance(x, float):
        return "nan" if math.isnan(x) else f"{x:.6g}"
    return str(x)


def to_csv(rows: Sequence[SummaryRow], timings: bool = True) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for row in rows:
        d = asdict(row)
        if not timings:
            d["mean_ms_per_step"] = 0.0
        writer.writerow([_fmt(d[k]) for k in CSV_FIELDS])
    return buf.getvalue()


def plot_data(csv_text: str) -> str:
    """Long-format ``planner,class,metric,value`` rows for external plotting."""
    reader = csv.DictReader(io.StringIO(csv_text))
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(("scenario_family", "planner", "class", "metric", "value"))
    for row in reader:
        for metric in CSV_FIELDS[4:]:
            writer.writerow((row["scenario_family"], row["planner"], row["opponent_class"], metric, row[metric]))
    return out.getvalue()


def render(scenario: Scenario, states: Sequence[JointState]) -> str:
    """ASCII frames: agents as digits (mod 10), goals as letters, obstacles as '@'."""
    grid = scenario.map
    frames = []
    for t, st in enumerate(states):
        rows = [["." if grid.is_passable((r, c)) else "@" for c in range(grid.width)] for r in range(grid.height)]
        for i, g in enumerate(scenario.goals):
            rows[g[0]][g[1]] = chr(ord("a") + i % 26)
        for i, p in enumerate(st.positions):
            if not st.removed[i]:
                rows[p[0]][p[1]] = str(i % 10)
            else:
                rows[p[0]][p[1]] = "x"
        frames.append(f"t={t}\n" + "\n".join("".join(r) for r in rows))
    return "\n\n".join(frames) + "\n"
