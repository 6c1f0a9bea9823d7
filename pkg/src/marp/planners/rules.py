"""Rule-based planners: A* (ignores opponents), Safe and EnhancedSafe."""
from __future__ import annotations

from functools import lru_cache
from typing import Sequence

import numpy as np

from ..belief import HARD_MAX, Belief, detect_stationary, tempered_posterior
from ..env import ACTIONS, Action, Cell, GridMap, JointState
from ..opponents import all_pairs_distance, greedy_move
from .base import Planner


def astar_act(grid: GridMap, state: JointState, index: int, goal: Cell) -> Action:
    dist = all_pairs_distance(grid)[grid.index[tuple(goal)]]
    return greedy_move(grid, state.positions[index], dist)


def unsafe_actions(
    grid: GridMap, state: JointState, index: int, opponents: Sequence[int], own_grid: GridMap | None = None
) -> set[Action]:
    """Own actions that some single valid opponent move turns into a vertex or swap collision."""
    own_grid = own_grid or grid
    own = state.positions[index]
    unsafe = set()
    reach = []
    for j in opponents:
        c = state.positions[j]
        reach.append((c, {grid.resolve(c, a) for a in grid.valid_actions(c)}))
    for a in own_grid.valid_actions(own):
        target = own_grid.resolve(own, a)
        for c, cells in reach:
            if target in cells or (target == c and own in cells and target != own):
                unsafe.add(a)
                break
    return unsafe


def collision_probability(
    grid: GridMap, state: JointState, index: int, action: Action, belief: Belief | None, opponents: Sequence[int]
) -> float:
    """Belief-weighted chance that ``action`` collides with someone next step (opponents independent)."""
    own = state.positions[index]
    target = grid.resolve(own, action)
    if belief is not None:
        marg = belief.marginals(state)
        rows = {j: marg[k] for k, j in enumerate(belief.opponents)}
    else:
        rows = {}
    p_clear = 1.0
    for j in opponents:
        c = state.positions[j]
        probs = rows.get(j)
        if probs is None:
            probs = np.zeros(len(ACTIONS))
            valid = grid.valid_actions(c)
            probs[valid] = 1.0 / len(valid)
        p_hit = 0.0
        for b in ACTIONS:
            if probs[b] <= 0:
                continue
            c2 = grid.resolve(c, b)
            if c2 == target or (c2 == own and c == target and target != own):
                p_hit += probs[b]
        p_clear *= 1.0 - min(p_hit, 1.0)
    return 1.0 - p_clear


@lru_cache(maxsize=256)
def _masked_distance(grid: GridMap, goal: Cell, masked: frozenset) -> tuple[GridMap, np.ndarray]:
    g = grid.with_obstacles(masked) if masked else grid
    return g, all_pairs_distance(g)[g.index[goal]]


def safe_act(
    grid: GridMap,
    state: JointState,
    index: int,
    goal: Cell,
    belief: Belief | None = None,
    ignore: Sequence[int] = (),
    masked: Sequence[Cell] = (),
    record: dict | None = None,
) -> Action:
    """Shortest-distance action among the safe ones.

    ``ignore`` lists opponents left out of the unsafe-set computation and
    ``masked`` cells treated as obstacles for the own agent. ``record``, when
    given, receives ``safe_set`` for auditing.
    """
    goal = tuple(goal)
    own = state.positions[index]
    if own == goal:
        if record is not None:
            record["safe_set"] = None
        return Action.STAY
    own_grid, dist = _masked_distance(grid, goal, frozenset(masked) - {goal, own})
    opponents = [j for j in range(state.n_agents) if j != index and not state.removed[j] and j not in ignore]
    unsafe = unsafe_actions(grid, state, index, opponents, own_grid)
    candidates = own_grid.valid_actions(own)
    safe = [a for a in candidates if a not in unsafe]
    if record is not None:
        record["safe_set"] = tuple(safe)
    idx = own_grid.index

    def d(a):
        return dist[idx[own_grid.resolve(own, a)]]

    if safe:
        best = min(safe, key=lambda a: (d(a), int(a)))
        if not np.isfinite(d(best)):
            return Action.STAY if Action.STAY in safe else best
        return best
    live = [j for j in range(state.n_agents) if j != index and not state.removed[j]]
    risk = {a: collision_probability(grid, state, index, a, belief, live) for a in candidates}
    return min(candidates, key=lambda a: (round(risk[a], 12), d(a), int(a)))


class AstarPlanner(Planner):
    name = "astar"
    uses_belief = False

    def act(self, state: JointState) -> Action:
        if self.at_goal(state):
            return Action.STAY
        return astar_act(self.grid, state, self.index, self.goal)


class SafePlanner(Planner):
    """Safe rule; the belief is only consulted when every action is unsafe."""

    name = "safe"

    def __init__(self, ctx):
        super().__init__(ctx)
        self.last_record: dict = {}

    def act(self, state: JointState) -> Action:
        self.last_record = {}
        return safe_act(self.grid, state, self.index, self.goal, self.belief, record=self.last_record)


class EnhancedSafePlanner(SafePlanner):
    """Safe rule that treats opponents parked for ``k`` steps as obstacles."""

    name = "esafe"

    def __init__(self, ctx, k: int = 3):
        super().__init__(ctx)
        if k < 1:
            raise ValueError("K must be >= 1")
        self.k = k
        self.history: dict[int, list[Cell]] = {}

    def reset(self, state: JointState) -> None:
        super().reset(state)
        self.history = {j: [state.positions[j]] for j in self.ctx.opponents}

    def stationary(self, state: JointState) -> list[int]:
        live = self.live_opponents(state)
        flagged = detect_stationary([self.history[j] for j in live], self.k)
        return [live[i] for i in sorted(flagged)]

    def act(self, state: JointState) -> Action:
        self.last_record = {}
        parked = self.stationary(state)
        masked = [state.positions[j] for j in parked]
        return safe_act(
            self.grid, state, self.index, self.goal, self.belief, ignore=parked, masked=masked, record=self.last_record
        )

    def observe(self, state: JointState, actions) -> None:
        parked = set(self.stationary(state))
        if self.belief is not None:
            b = self.belief
            index = b.space.grid.index
            probs = b.probs.copy()
            for k, j in enumerate(b.opponents):
                if state.removed[j]:
                    continue
                cell = index[state.positions[j]]
                lik = b.space.table[b.goal_index, cell, int(actions[j])]
                beta = HARD_MAX if j in parked else self.beta
                probs[k] = tempered_posterior(probs[k], lik, beta)[0]
            self.belief = b.with_probs(probs)
        for j in self.ctx.opponents:
            c = state.positions[j]
            r, cc = c
            dr, dc = Action(actions[j]).delta
            self.history[j].append((r + dr, cc + dc))
