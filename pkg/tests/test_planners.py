import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from marp.belief import init_belief
from marp.env import Action, GridMap, JointState, generate_scenario, step
from marp.harness import run_episode
from marp.planners import (
    CbsEval,
    PlannerContext,
    QmdpEval,
    SearchModel,
    ShortestPathEval,
    TsConfig,
    ZeroEval,
    make_planner,
    mcts,
    parse_planner_spec,
    safe_act,
    uniform_ts,
    unsafe_actions,
)
from marp.planners.search import _score, MaxNode, ExpNode
from marp.solvers import TransitionSkeleton

from oracles import context_q, expectimax_values
from randgen import random_belief, random_grid

OPEN = GridMap.from_rows(["....", "....", "...."])


def ctx_for(grid, goal, n_agents=2, seed=0, eps=0.01, **defaults):
    return PlannerContext(grid, 0, goal, n_agents, eps, np.random.default_rng(seed), defaults=defaults or None)


# -- spec strings --------------------------------------------------------------


@pytest.mark.parametrize(
    "text",
    [
        "astar",
        "safe",
        "esafe:K=3",
        "mdp:fixed",
        "mdp:update",
        "qmdp",
        "uts:n=2,m=0,eval=cbs,backup=exact",
        "uts:n=1,m=inf",
        "uts:n=1,backup=sampled:4,belief=fixed",
        "cbs:update",
        "mcts:sel=puct,budget=50,eval=cbs",
        "pomdp:h=2",
    ],
)
def test_spec_strings_build(text):
    spec = parse_planner_spec(text)
    planner = make_planner(spec, ctx_for(OPEN, (2, 3), depth=1))
    assert planner is not None


@pytest.mark.parametrize("text", ["dijkstra", "uts:n", "uts:depth=2", "mcts:sel=ucb", "mdp:sometimes", "esafe:K=0"])
def test_bad_spec_strings(text):
    with pytest.raises(ValueError):
        make_planner(text, ctx_for(OPEN, (2, 3)))


# -- rules ---------------------------------------------------------------------


def test_unsafe_actions_cover_vertex_and_swap():
    state = JointState(((1, 1), (1, 3)))
    # the opponent can reach (1, 2); our Right ends there
    assert Action.RIGHT in unsafe_actions(OPEN, state, 0, [1])
    adjacent = JointState(((1, 1), (1, 2)))
    bad = unsafe_actions(OPEN, adjacent, 0, [1])
    assert Action.RIGHT in bad and Action.STAY in bad
    assert Action.LEFT not in bad


@settings(max_examples=150, deadline=None)
@given(st.lists(st.sampled_from(OPEN.cells), min_size=2, max_size=4, unique=True), st.sampled_from(OPEN.cells))
def test_safe_act_picks_a_safe_action_when_one_exists(cells, goal):
    state = JointState(tuple(cells))
    others = list(range(1, len(cells)))
    unsafe = unsafe_actions(OPEN, state, 0, others)
    a = safe_act(OPEN, state, 0, goal)
    if tuple(cells[0]) == tuple(goal):
        assert a is Action.STAY
    elif set(OPEN.valid_actions(cells[0])) - unsafe:
        assert a not in unsafe


def test_safe_matches_astar_when_alone():
    ctx = ctx_for(OPEN, (2, 3))
    state = JointState(((0, 0), (2, 0)))
    far = JointState(((0, 0), (2, 0)), removed=(False, True))
    safe, astar = make_planner("safe", ctx), make_planner("astar", ctx)
    for p in (safe, astar):
        p.reset(state)
    assert safe.act(far) == astar.act(far) == Action.DOWN


def test_enhanced_safe_routes_around_parked_opponent():
    grid = GridMap.from_rows(["...", "...", "..."])
    ctx = ctx_for(grid, (2, 2))
    planner = make_planner("esafe:K=2", ctx)
    state = JointState(((0, 2), (1, 2)))
    planner.reset(state)
    planner.observe(state, [Action.STAY, Action.STAY])
    # the opponent has sat at (1, 2) for two steps, so it counts as a wall
    assert planner.stationary(state) == [1]
    assert planner.act(state) is Action.LEFT


# -- QMDP and tree search against oracles -------------------------------------


def test_qmdp_planner_matches_independent_q_values():
    grid = GridMap.from_rows(["...", ".@.", "..."])
    rows = ["...", ".@.", "..."]
    goal = (2, 2)
    rng = np.random.default_rng(4)
    ctx = ctx_for(grid, goal, eps=0.1)
    planner = make_planner("qmdp", ctx)
    root = JointState(((0, 0), (2, 0)))
    planner.reset(root)
    b = random_belief(rng, grid, [1], goal, epsilon=0.1, sparse=True)
    planner.belief = b
    tables = {g: context_q(rows, goal, grid.cells[g], 0.1, ctx.gamma) for g in b.goal_index}
    checked = 0
    for own in grid.cells:
        for opp in grid.cells:
            if own == opp or own == goal:
                continue
            state = JointState((own, opp))
            if planner.skeleton.state_index.get((grid.index[own], grid.index[opp])) is None:
                continue
            q = np.zeros(5)
            valid = grid.valid_actions(own)
            for p, g in zip(b.probs[0], b.goal_index):
                if p > 0:
                    q[valid] += p * np.array([tables[g][(own, opp)][a] for a in valid])
            a = planner.act(state)
            assert q[a] >= q[valid].max() - 1e-6
            checked += 1
    assert checked > 20


def _model(grid, goal, state, belief, gamma=0.95):
    model = SearchModel(grid, goal, belief, list(range(len(belief.opponents))), gamma)
    key = model.key_of(state, 0, belief.opponents)
    return model, key, model.probs_of(belief)


@pytest.mark.parametrize("n,m", [(1, 0), (2, 0), (1, 1)])
def test_uniform_ts_matches_expectimax_oracle(n, m):
    rng = np.random.default_rng(10 * n + m)
    for _ in range(4):
        grid = random_grid(rng, max_side=4, density=0.2, min_free=6)
        k = int(rng.integers(1, 3))
        cells = rng.choice(grid.empty_cell_count, k + 2, replace=False)
        goal = grid.cells[cells[-1]]
        state = JointState(tuple(grid.cells[c] for c in cells[: k + 1]))
        belief = random_belief(rng, grid, list(range(1, k + 1)), goal, epsilon=0.1, sparse=True)
        model, key, probs = _model(grid, goal, state, belief)
        res = uniform_ts(model, key, probs, TsConfig(n=n, m=m, eval="sp"), ShortestPathEval(), rng)
        rows = ["".join("." if grid.is_passable((r, c)) else "@" for c in range(grid.width)) for r in range(grid.height)]
        oracle = expectimax_values(
            rows, state.positions[0], goal, state.positions[1:], belief.goals, belief.probs, 0.1, 0.95, n, m
        )
        assert set(int(a) for a in res.root_values) == set(oracle)
        for a, v in res.root_values.items():
            assert v == pytest.approx(oracle[int(a)], abs=1e-9)


def test_uniform_ts_depth_zero_uses_evaluator_prior():
    grid = GridMap.from_rows(["....."])
    b = init_belief(grid, [], (0, 4), 0.01)
    model, key, probs = _model(grid, (0, 4), JointState(((0, 1),)), b)
    res = uniform_ts(model, key, probs, TsConfig(n=0, m=0), ShortestPathEval(), np.random.default_rng(0))
    assert res.action is Action.RIGHT and res.nodes == 0


def test_sampled_backup_is_seeded():
    grid = OPEN
    b = init_belief(grid, [1], (2, 3), 0.1)
    model, key, probs = _model(grid, (2, 3), JointState(((0, 0), (2, 0))), b)
    cfg = TsConfig(n=2, backup="sampled", backup_samples=3)
    a = uniform_ts(model, key, probs, cfg, ShortestPathEval(), np.random.default_rng(3))
    b2 = uniform_ts(model, key, probs, cfg, ShortestPathEval(), np.random.default_rng(3))
    assert a.root_values == b2.root_values


def test_qmdp_eval_depth_zero_is_qmdp_action():
    grid = GridMap.from_rows(["...", "...", "..."])
    goal = (2, 2)
    rng = np.random.default_rng(2)
    b = random_belief(rng, grid, [1], goal, epsilon=0.05)
    state = JointState(((0, 0), (1, 1)))
    sk = TransitionSkeleton(grid, state.positions, goal)
    model, key, probs = _model(grid, goal, state, b)
    ev = QmdpEval(sk, b, 0.95)
    value, prior = ev(model, key, probs, rng)
    res = uniform_ts(model, key, probs, TsConfig(n=0, m=0, eval="qmdp"), ev, rng)
    assert prior[res.action] == 1.0


# -- MCTS ----------------------------------------------------------------------


def test_puct_and_uct_scores():
    parent = MaxNode((0,), None, 0, 0.0)
    parent.N = 10
    parent.prior = np.array([0.5, 0.1, 0.1, 0.1, 0.2])
    child = ExpNode(0)
    child.v, child.N = 2.0, 4
    uct = TsConfig(selection="uct")
    puct = TsConfig(selection="puct")
    explore = np.sqrt(np.log(10) / 4)
    assert _score(uct, parent, child) == pytest.approx(0.5 + np.sqrt(2) * explore)
    assert _score(puct, parent, child) == pytest.approx(0.5 + 0.5 * explore * (1.25 + np.log((10 + 19625) / 19625)))


@pytest.mark.parametrize("sel", ["uct", "puct"])
def test_mcts_visits_and_determinism(sel):
    b = init_belief(OPEN, [1], (2, 3), 0.01)
    model, key, probs = _model(OPEN, (2, 3), JointState(((0, 0), (0, 3))), b)
    cfg = TsConfig(selection=sel, budget=40, select_samples=20)
    r1 = mcts(model, key, probs, cfg, ShortestPathEval(), np.random.default_rng(7))
    r2 = mcts(model, key, probs, cfg, ShortestPathEval(), np.random.default_rng(7))
    assert r1.action == r2.action and r1.visits == r2.visits
    assert r1.iterations == 40
    # the first iteration only evaluates the root
    assert sum(r1.visits.values()) == 39
    assert r1.visits[r1.action] == max(r1.visits.values())


def test_mcts_avoids_certain_collision():
    grid = GridMap.from_rows(["...", "...", "..."])
    b = init_belief(grid, [1], (2, 2), 1e-4)
    probs = np.zeros((1, b.n_hypotheses))
    probs[0, list(b.goal_index).index(grid.index[(0, 0)])] = 1.0
    b = b.with_probs(probs)
    # the opponent will step left into (0, 1) next
    model, key, p = _model(grid, (2, 2), JointState(((1, 1), (0, 1))), b)
    res = mcts(model, key, p, TsConfig(selection="uct", budget=300), ZeroEval(), np.random.default_rng(0))
    assert res.action is not Action.UP


def test_cbs_eval_prior_sums_to_one():
    b = init_belief(OPEN, [1], (2, 3), 0.01)
    model, key, probs = _model(OPEN, (2, 3), JointState(((0, 0), (2, 0))), b)
    value, prior = CbsEval(4)(model, key, probs, np.random.default_rng(0))
    assert 0 < value <= 1 and prior.sum() == pytest.approx(1.0)


# -- planners inside episodes --------------------------------------------------


@pytest.mark.parametrize(
    "spec",
    ["astar", "safe", "esafe", "mdp:fixed", "mdp:update", "qmdp", "uts:n=1,eval=sp", "uts:n=1,m=inf", "cbs:update",
     "mcts:sel=uct,budget=20", "mcts:budget=20,eval=qmdp"],
)
def test_planners_finish_tiny_episodes(spec):
    sc = generate_scenario("tiny2a", "rational", 1)
    rec = run_episode(sc, spec, 1)
    assert not rec.failed, rec.error
    assert rec.fallbacks == 0


def test_planner_ignores_opponent_arrived_flags():
    sc = generate_scenario("small2a", "rational", 4)
    ctx = PlannerContext(sc.map, 0, sc.goals[0], 2, sc.epsilon, np.random.default_rng(0))
    planner = make_planner("uts:n=1,eval=sp", ctx)
    state = sc.initial_state()
    planner.reset(state)
    flagged = JointState(state.positions, (False, True), state.removed)
    a1 = planner.act(state)
    planner.reset(state)
    assert planner.act(flagged) == a1


def test_removed_opponents_drop_out_of_the_model():
    grid = GridMap.from_rows(["....."])
    ctx = ctx_for(grid, (0, 4))
    planner = make_planner("uts:n=1,eval=sp", ctx)
    state = JointState(((0, 0), (0, 1)), removed=(False, True))
    planner.reset(state)
    assert planner.act(state) is Action.RIGHT
    nxt, hits = step(grid, state, [Action.RIGHT, Action.STAY], [(0, 4), (0, 3)])
    assert not hits
