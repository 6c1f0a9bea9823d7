"""Goal-directed opponent hypotheses and the built-in opponent agents."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path

from .env import ACTIONS, Action, Cell, DistanceField, GridMap, JointState, bfs_distance

N_ACTIONS = len(ACTIONS)


@dataclass(frozen=True)
class HypothesisPolicy:
    """Epsilon-softened shortest-path policy toward a hypothesised goal."""

    goal: Cell
    epsilon: float
    distance_field: DistanceField

    @classmethod
    def for_goal(cls, grid: GridMap, goal: Cell, epsilon: float) -> "HypothesisPolicy":
        return cls(tuple(goal), epsilon, bfs_distance(grid, goal))


def action_dist(policy: HypothesisPolicy, cell: Cell) -> np.ndarray:
    """Probability of each of the 5 actions at ``cell``, indexed by ``Action``.

    Shortest moves share ``1 - eps`` uniformly, every other valid move (Stay
    included) shares ``eps``. At the goal the policy stays; with the goal out of
    reach it is uniform over valid moves.
    """
    grid = policy.distance_field.grid
    cell = tuple(cell)
    if not grid.is_passable(cell):
        raise ValueError(f"cell {cell} is not passable")
    probs = np.zeros(N_ACTIONS)
    if cell == policy.goal:
        probs[Action.STAY] = 1.0
        return probs
    valid = grid.valid_actions(cell)
    dist = policy.distance_field
    here = dist[cell]
    if math.isinf(here):
        probs[valid] = 1.0 / len(valid)
        return probs
    shortest = [a for a in valid if a != Action.STAY and dist[grid.resolve(cell, a)] == here - 1]
    others = [a for a in valid if a not in shortest]
    probs[shortest] = (1.0 - policy.epsilon) / len(shortest)
    probs[others] += policy.epsilon / len(others)
    return probs


class HypothesisSpace:
    """All-pairs distances and per-goal action tables for one map.

    ``table[g, c, a]`` is the probability that an agent heading to cell index
    ``g`` plays action ``a`` at cell index ``c``. Built in bulk from a sparse
    all-pairs shortest path; ``action_dist`` is the per-cell reference.
    """

    def __init__(self, grid: GridMap, epsilon: float):
        self.grid = grid
        self.epsilon = epsilon
        self.dist = all_pairs_distance(grid)
        self.table = self._build_table()

    def _build_table(self) -> np.ndarray:
        grid, eps, dist = self.grid, self.epsilon, self.dist
        n = grid.empty_cell_count
        moves = grid.move_table  # (n, 5)
        valid = grid.valid_table  # (n, 5)
        here = dist  # here[g, c]: distance from c to goal g
        nxt = dist[:, moves]  # (g, c, a)
        shortest = (nxt == (here - 1)[:, :, None]) & valid[None, :, :]
        shortest[:, :, Action.STAY] = False
        n_short = shortest.sum(axis=2, keepdims=True)
        n_valid = valid.sum(axis=1)[None, :, None]
        n_other = n_valid - n_short
        other = valid[None, :, :] & ~shortest
        with np.errstate(divide="ignore", invalid="ignore"):
            table = np.where(shortest, (1.0 - eps) / n_short, 0.0) + np.where(other, eps / n_other, 0.0)
        unreachable = ~np.isfinite(here)
        uniform = np.broadcast_to(valid / valid.sum(axis=1, keepdims=True), table.shape)
        table = np.where(unreachable[:, :, None], uniform, table)
        idx = np.arange(n)
        table[idx, idx, :] = 0.0
        table[idx, idx, Action.STAY] = 1.0
        table.flags.writeable = False
        return table

    def policy(self, goal: Cell) -> HypothesisPolicy:
        g = self.grid.index[tuple(goal)]
        return HypothesisPolicy(tuple(goal), self.epsilon, DistanceField(self.grid, tuple(goal), self.dist[g].copy()))

    def distance(self, goal_index: int) -> np.ndarray:
        return self.dist[goal_index]


def all_pairs_distance(grid: GridMap) -> np.ndarray:
    """``dist[g, c]``: 4-connected path length between cell indices (symmetric)."""
    return _all_pairs(grid)


@lru_cache(maxsize=16)
def _all_pairs(grid: GridMap) -> np.ndarray:
    n = grid.empty_cell_count
    rows, cols = [], []
    for i, nb in enumerate(grid.neighbors):
        rows.extend([i] * len(nb))
        cols.extend(nb)
    adj = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    dist = shortest_path(adj, method="D", unweighted=True, directed=False)
    dist.flags.writeable = False
    return dist


@lru_cache(maxsize=16)
def hypothesis_space(grid: GridMap, epsilon: float) -> HypothesisSpace:
    return HypothesisSpace(grid, epsilon)


# -- opponent specs and concrete agents --------------------------------------


@dataclass(frozen=True)
class OpponentSpec:
    kind: str  # "sp" | "rand" | "safe" | "chase" | "self"
    p: float | None = None

    def __post_init__(self):
        if self.p is not None and not 0.0 <= self.p <= 1.0:
            raise ValueError("p must lie in [0, 1]")

    def __str__(self):
        return self.kind if self.p is None else f"{self.kind}:{self.p:g}"


def parse_opponent_spec(text: str) -> OpponentSpec:
    kind, _, arg = text.strip().partition(":")
    if kind in ("sp", "safe", "self"):
        if arg:
            raise ValueError(f"{kind!r} takes no parameter")
        return OpponentSpec(kind)
    if kind in ("rand", "chase"):
        try:
            return OpponentSpec(kind, float(arg))
        except ValueError:
            raise ValueError(f"bad opponent spec {text!r}") from None
    raise ValueError(f"unknown opponent spec {text!r}")


def greedy_move(grid: GridMap, cell: Cell, dist_row: np.ndarray) -> Action:
    """First action in Up/Down/Left/Right order that decreases ``dist_row``; Stay if none."""
    i = grid.index[cell]
    here = dist_row[i]
    if here == 0 or not np.isfinite(here):
        return Action.STAY
    moves = grid.move_table[i]
    for a in ACTIONS[:4]:
        j = moves[a]
        if j != i and dist_row[j] == here - 1:
            return a
    return Action.STAY


def shortest_path_act(grid: GridMap, state: JointState, self_index: int, goal: Cell) -> Action:
    dist = all_pairs_distance(grid)[grid.index[tuple(goal)]]
    return greedy_move(grid, state.positions[self_index], dist)


def random_p_act(grid: GridMap, state: JointState, self_index: int, goal: Cell, p: float, rng) -> Action:
    if p > 0 and rng.random() < p:
        valid = grid.valid_actions(state.positions[self_index])
        return valid[int(rng.integers(len(valid)))]
    return shortest_path_act(grid, state, self_index, goal)


def chasing_p_act(
    grid: GridMap, state: JointState, self_index: int, target_index: int, own_goal: Cell, p: float, rng
) -> Action:
    if p > 0 and rng.random() < p and not state.removed[target_index]:
        target = state.positions[target_index]
        return shortest_path_act(grid, state, self_index, target)
    return shortest_path_act(grid, state, self_index, own_goal)


class ScriptedAgent:
    """Base for the non-modelling agents; same reset/act/observe surface as planners."""

    fallbacks = 0

    def __init__(self, grid: GridMap, index: int, goal: Cell, rng: np.random.Generator):
        self.grid = grid
        self.index = index
        self.goal = tuple(goal)
        self.rng = rng

    def reset(self, state: JointState) -> None:
        pass

    def observe(self, state: JointState, actions) -> None:
        pass


class ShortestPathAgent(ScriptedAgent):
    def act(self, state: JointState) -> Action:
        return shortest_path_act(self.grid, state, self.index, self.goal)


class RandomAgent(ScriptedAgent):
    def __init__(self, grid, index, goal, rng, p: float):
        super().__init__(grid, index, goal, rng)
        self.p = p

    def act(self, state: JointState) -> Action:
        return random_p_act(self.grid, state, self.index, self.goal, self.p, self.rng)


class ChasingAgent(ScriptedAgent):
    def __init__(self, grid, index, goal, rng, p: float, target: int):
        super().__init__(grid, index, goal, rng)
        self.p = p
        self.target = target

    def act(self, state: JointState) -> Action:
        return chasing_p_act(self.grid, state, self.index, self.target, self.goal, self.p, self.rng)
