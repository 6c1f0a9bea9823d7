"""Planner interface shared by every controlled agent, plus the search model helpers."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..belief import Belief, init_belief, tempered_posterior, update
from ..env import Action, Cell, GridMap, JointState
from ..solvers import RewardParams

log = logging.getLogger("marp.planners")

GAMMA = 0.95


@dataclass(frozen=True)
class PlannerContext:
    """Everything a planner may know about its episode before the first move."""

    grid: GridMap
    index: int
    goal: Cell
    n_agents: int
    epsilon: float
    rng: np.random.Generator
    gamma: float = GAMMA
    rewards: RewardParams = RewardParams()
    defaults: dict | None = None  # scenario-family planner parameters

    @property
    def opponents(self) -> tuple[int, ...]:
        return tuple(j for j in range(self.n_agents) if j != self.index)

    def default(self, key: str, fallback):
        value = (self.defaults or {}).get(key)
        return fallback if value is None else value


class Planner:
    """reset / act / observe. ``observe`` receives the state the joint action was played in.

    Planners read opponents' positions and ``removed`` flags only; opponents'
    ``arrived`` flags would reveal their goals and are ignored.
    """

    name = "planner"
    uses_belief = True
    beta = 1.0

    def __init__(self, ctx: PlannerContext):
        self.ctx = ctx
        self.grid = ctx.grid
        self.index = ctx.index
        self.goal = tuple(ctx.goal)
        self.rng = ctx.rng
        self.fallbacks = 0
        self.belief: Belief | None = None

    # -- lifecycle ---------------------------------------------------------
    def reset(self, state: JointState) -> None:
        if self.uses_belief:
            self.belief = init_belief(self.grid, self.ctx.opponents, self.goal, self.ctx.epsilon)

    def act(self, state: JointState) -> Action:
        raise NotImplementedError

    def observe(self, state: JointState, actions: Sequence[Action]) -> None:
        if self.belief is None:
            return
        observed = [None if state.removed[j] else actions[j] for j in self.belief.opponents]
        self.belief = update(self.belief, state, observed, self.beta)

    # -- helpers -----------------------------------------------------------
    def at_goal(self, state: JointState) -> bool:
        return tuple(state.positions[self.index]) == self.goal

    def live_opponents(self, state: JointState) -> list[int]:
        return [j for j in self.ctx.opponents if not state.removed[j]]

    def fallback(self, state: JointState, reason: str) -> Action:
        from .rules import safe_act

        self.fallbacks += 1
        log.warning("agent %d falls back to the safe rule: %s", self.index, reason)
        return safe_act(self.grid, state, self.index, self.goal, self.belief)


class SearchModel:
    """Compact transition model of one planning agent against its live opponents.

    Search states are tuples of cell indices ``(own, opp_1, ..., opp_k)``;
    beliefs are ``(k, G)`` arrays of probabilities over the belief's hypotheses.
    Collisions between opponents are not modelled, matching the induced MDP.
    """

    def __init__(self, grid: GridMap, own_goal: Cell, belief: Belief, rows: Sequence[int],
                 gamma: float = GAMMA, rewards: RewardParams = RewardParams()):
        self.grid = grid
        self.goal = grid.index[tuple(own_goal)]
        self.belief = belief
        self.rows = list(rows)  # belief rows of the live opponents, in model order
        self.k = len(self.rows)
        self.table = belief.hypothesis_tables()  # (G, cells, 5)
        self.moves = grid.move_table
        self.valid = grid.valid_table
        self.valid_actions = [tuple(int(a) for a in np.flatnonzero(v)) for v in self.valid]
        self.gamma = gamma
        self.rewards = rewards

    def key_of(self, state: JointState, own_index: int, opponents: Sequence[int]) -> tuple[int, ...]:
        index = self.grid.index
        return (index[state.positions[own_index]],) + tuple(index[state.positions[j]] for j in opponents)

    def probs_of(self, belief: Belief) -> np.ndarray:
        return belief.probs[self.rows]

    def marginals(self, key: tuple[int, ...], probs: np.ndarray) -> np.ndarray:
        """``P(a_j)`` for each live opponent at ``key``, shape ``(k, 5)``."""
        if self.k == 0:
            return np.zeros((0, 5))
        cells = np.array(key[1:])
        lik = self.table[:, cells, :]  # (G, k, 5)
        return np.einsum("kg,gka->ka", probs, lik)

    def outcome(self, key: tuple[int, ...], own_action: int, joint: Sequence[int]):
        """``(reward, terminal, next_key)`` for one own action and opponent joint action."""
        own = key[0]
        own_next = int(self.moves[own, own_action])
        nxt = [own_next]
        hit = False
        for c, a in zip(key[1:], joint):
            c2 = int(self.moves[c, a])
            if c2 == own_next or (c2 == own and c == own_next and own != own_next):
                hit = True
            nxt.append(c2)
        if hit:
            return self.rewards.collision_penalty, True, None
        if own_next == self.goal:
            return self.rewards.goal_reward, True, None
        return self.rewards.step_reward, False, tuple(nxt)

    def update(self, key: tuple[int, ...], probs: np.ndarray, joint: Sequence[int], beta=1.0) -> np.ndarray:
        if self.k == 0:
            return probs
        cells = np.array(key[1:])
        lik = self.table[:, cells, np.array(joint)].T  # (k, G)
        return tempered_posterior(probs, lik, beta)

    def to_state(self, key: tuple[int, ...]) -> JointState:
        cells = self.grid.cells
        return JointState(tuple(cells[c] for c in key))

    def to_belief(self, probs: np.ndarray) -> Belief:
        b = self.belief
        return Belief(b.space, tuple(range(1, self.k + 1)), b.goal_index, probs)


def argmax_first(values: Sequence[float], atol: float = 1e-12) -> int:
    """Index of the maximum, lowest index among values within ``atol`` of it."""
    values = np.asarray(values, dtype=np.float64)
    top = values.max()
    return int(np.flatnonzero(values >= top - atol)[0])
