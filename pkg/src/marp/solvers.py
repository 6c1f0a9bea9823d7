"""Belief-induced MDPs, value iteration and the QMDP action rule."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import sparse

from .belief import Belief, point_mass
from .env import ACTIONS, Action, Cell, GridMap, JointState

N_ACTIONS = len(ACTIONS)
DEFAULT_STATE_CAP = 100_000


class CapacityError(RuntimeError):
    """State space too large to enumerate; use a tree-search planner instead."""


@dataclass(frozen=True)
class RewardParams:
    goal_reward: float = 1.0
    collision_penalty: float = -1.0
    step_reward: float = 0.0

    def __post_init__(self):
        if self.goal_reward <= 0:
            raise ValueError("goal_reward must be positive")
        if self.collision_penalty > 0:
            raise ValueError("collision_penalty must be <= 0")
        if not self.collision_penalty < self.goal_reward:
            raise ValueError("collision_penalty must be below goal_reward")


@dataclass
class TabularMdp:
    transitions: list  # one (n, n) row-stochastic sparse matrix per action
    rewards: np.ndarray  # (n, n_actions)
    gamma: float
    terminal: np.ndarray = None
    valid: np.ndarray = None  # (n, n_actions) mask of genuine actions; None means all

    def __post_init__(self):
        self.transitions = [sparse.csr_matrix(t) for t in self.transitions]
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        if self.terminal is None:
            self.terminal = np.zeros(self.n_states, dtype=bool)
        if self.valid is not None:
            self.valid = np.asarray(self.valid, dtype=bool)
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")

    @property
    def n_states(self) -> int:
        return self.rewards.shape[0]

    @property
    def n_actions(self) -> int:
        return self.rewards.shape[1]

    def stacked(self) -> sparse.csr_matrix:
        cached = self.__dict__.get("_stacked")
        if cached is None:
            cached = sparse.vstack(self.transitions, format="csr")
            self.__dict__["_stacked"] = cached
        return cached

    def row_sums(self) -> np.ndarray:
        return np.stack([np.asarray(t.sum(axis=1)).ravel() for t in self.transitions], axis=1)

    def dump_triplets(self) -> str:
        """Plain-text sparse dump: ``T a s s' p`` and ``R s a r`` lines."""
        lines = []
        for a, t in enumerate(self.transitions):
            coo = t.tocoo()
            for s, s2, p in zip(coo.row, coo.col, coo.data):
                lines.append(f"T {a} {s} {s2} {p:.17g}")
        for s in range(self.n_states):
            for a in range(self.n_actions):
                lines.append(f"R {s} {a} {self.rewards[s, a]:.17g}")
        return "\n".join(lines) + "\n"


@dataclass
class InducedMdp(TabularMdp):
    states: list = field(default_factory=list)  # tuples of cell indices, own agent first
    state_index: dict = field(default_factory=dict)

    GOAL = "goal"
    COLLISION = "collision"

    def index_of(self, state: JointState, own_index: int, opponents: Sequence[int]) -> int | None:
        grid_index = self._grid.index
        key = (grid_index[state.positions[own_index]],) + tuple(grid_index[state.positions[j]] for j in opponents)
        return self.state_index.get(key)


class TransitionSkeleton:
    """Reachable joint states with every (state, own action, opponent joint action) outcome.

    Probabilities are left out so one skeleton can be re-weighted for any belief.
    """

    def __init__(
        self,
        grid: GridMap,
        root: Sequence[Cell],
        own_goal: Cell,
        rewards: RewardParams = RewardParams(),
        cap: int = DEFAULT_STATE_CAP,
    ):
        self.grid = grid
        self.rewards = rewards
        self.own_goal = grid.index[tuple(own_goal)]
        index = grid.index
        root_key = tuple(index[tuple(c)] for c in root)
        if root_key[0] == self.own_goal:
            raise ValueError("root state already has the modelling agent at its goal")
        self.k = len(root_key) - 1
        moves = grid.move_table
        valid = grid.valid_table
        opp_moves = [[(a, int(moves[c, a])) for a in range(N_ACTIONS) if valid[c, a]] for c in range(len(grid.cells))]

        states = [root_key]
        state_index = {root_key: 0}
        src, act, dst, rew, ocells, oacts = [], [], [], [], [], []
        goal_r, hit_r, step_r = rewards.goal_reward, rewards.collision_penalty, rewards.step_reward
        GOAL, HIT = -1, -2
        s = 0
        while s < len(states):
            key = states[s]
            own, opps = key[0], key[1:]
            options = [opp_moves[c] for c in opps]
            for a in range(N_ACTIONS):
                own_next = int(moves[own, a])
                for combo in itertools.product(*options):
                    hit = False
                    nxt = []
                    for c, (_, c2) in zip(opps, combo):
                        if c2 == own_next or (c2 == own and c == own_next and own != own_next):
                            hit = True
                        nxt.append(c2)
                    if hit:
                        target, r = HIT, hit_r
                    elif own_next == self.own_goal:
                        target, r = GOAL, goal_r
                    else:
                        nkey = (own_next,) + tuple(nxt)
                        target = state_index.get(nkey)
                        if target is None:
                            target = len(states)
                            if target >= cap:
                                raise CapacityError(
                                    f"more than {cap} reachable joint states; use a tree-search planner"
                                )
                            state_index[nkey] = target
                            states.append(nkey)
                        r = step_r
                    src.append(s)
                    act.append(a)
                    dst.append(target)
                    rew.append(r)
                    ocells.append(opps)
                    oacts.append(tuple(x for x, _ in combo))
            s += 1
        n = len(states)
        dst = np.array(dst, dtype=np.int64)
        dst[dst == GOAL] = n
        dst[dst == HIT] = n + 1
        self.states = states
        self.state_index = state_index
        self.n = n
        self.src = np.array(src, dtype=np.int64)
        self.act = np.array(act, dtype=np.int64)
        self.dst = dst
        self.reward = np.array(rew, dtype=np.float64)
        self.opp_cells = np.array(ocells, dtype=np.int64).reshape(len(src), self.k)
        self.opp_acts = np.array(oacts, dtype=np.int64).reshape(len(src), self.k)
        # Moves into walls behave like Stay; policies only pick genuine moves.
        self.own_valid = valid[[key[0] for key in states]]

    def entry_probs(self, cell_marginals: np.ndarray) -> np.ndarray:
        """Probability of each skeleton entry given ``P(a_j | cell)`` per opponent."""
        probs = np.ones(len(self.src))
        for j in range(self.k):
            probs *= cell_marginals[j, self.opp_cells[:, j], self.opp_acts[:, j]]
        return probs

    def induce(self, cell_marginals: np.ndarray, gamma: float) -> InducedMdp:
        n_total = self.n + 2
        probs = self.entry_probs(cell_marginals)
        transitions = []
        rewards = np.zeros((n_total, N_ACTIONS))
        term = np.arange(self.n, n_total)
        for a in range(N_ACTIONS):
            sel = self.act == a
            rows = np.concatenate([self.src[sel], term])
            cols = np.concatenate([self.dst[sel], term])
            vals = np.concatenate([probs[sel], np.ones(2)])
            transitions.append(sparse.csr_matrix((vals, (rows, cols)), shape=(n_total, n_total)))
            rewards[: self.n, a] = np.bincount(self.src[sel], weights=probs[sel] * self.reward[sel], minlength=self.n)
        terminal = np.zeros(n_total, dtype=bool)
        terminal[self.n:] = True
        mdp = InducedMdp(
            transitions=transitions,
            rewards=rewards,
            gamma=gamma,
            terminal=terminal,
            valid=np.vstack([self.own_valid, np.ones((2, N_ACTIONS), dtype=bool)]),
            states=self.states + [InducedMdp.GOAL, InducedMdp.COLLISION],
            state_index=self.state_index,
        )
        mdp._grid = self.grid
        return mdp


def induce_mdp(
    grid: GridMap,
    belief: Belief,
    state: JointState,
    own_index: int,
    own_goal: Cell,
    rewards: RewardParams = RewardParams(),
    gamma: float = 0.95,
    cap: int = DEFAULT_STATE_CAP,
    skeleton: TransitionSkeleton | None = None,
) -> InducedMdp:
    """Compile the single-agent MDP seen by ``own_index`` when opponents play the belief mixture."""
    if skeleton is None:
        root = [state.positions[own_index]] + [state.positions[j] for j in belief.opponents]
        skeleton = TransitionSkeleton(grid, root, own_goal, rewards, cap)
    return skeleton.induce(belief.cell_marginals(), gamma)


@dataclass
class Solution:
    values: np.ndarray
    q: np.ndarray
    policy: np.ndarray
    residuals: list

    def __iter__(self):
        return iter((self.values, self.q, self.policy))


def q_values(mdp: TabularMdp, v: np.ndarray) -> np.ndarray:
    nxt = mdp.stacked() @ v
    return mdp.rewards + mdp.gamma * nxt.reshape(mdp.n_actions, mdp.n_states).T


def bellman_backup(mdp: TabularMdp, v: np.ndarray) -> np.ndarray:
    return q_values(mdp, v).max(axis=1)


def greedy(q: np.ndarray, atol: float = 1e-9, valid: np.ndarray | None = None) -> np.ndarray:
    """Argmax per row, preferring the lowest action index among near-ties.

    ``valid`` masks out actions that may not be chosen.
    """
    if valid is not None:
        q = np.where(valid, q, -np.inf)
    top = q.max(axis=1, keepdims=True)
    return np.argmax(q >= top - atol * np.maximum(1.0, np.abs(top)), axis=1)


def value_iteration(mdp: TabularMdp, tol: float = 1e-6, max_sweeps: int = 1_000_000) -> Solution:
    """Synchronous Bellman sweeps until the sup-norm residual drops below ``tol``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    v = np.zeros(mdp.n_states)
    residuals = []
    for _ in range(max_sweeps):
        v_new = bellman_backup(mdp, v)
        res = float(np.max(np.abs(v_new - v))) if len(v) else 0.0
        residuals.append(res)
        v = v_new
        if res < tol:
            break
    q = q_values(mdp, v)
    return Solution(v, q, greedy(q, valid=mdp.valid), residuals)


def context_beliefs(belief: Belief) -> list[tuple[int, ...]]:
    """Every joint hypothesis (one hypothesis index per opponent)."""
    return list(itertools.product(range(belief.n_hypotheses), repeat=len(belief.opponents)))


def solve_context_mdps(
    skeleton: TransitionSkeleton,
    belief: Belief,
    contexts: Sequence[tuple[int, ...]],
    gamma: float = 0.95,
    tol: float = 1e-6,
    cap: int = DEFAULT_STATE_CAP,
) -> dict[tuple[int, ...], np.ndarray]:
    """Q-table of the MDP induced by each point-mass context."""
    if len(contexts) * skeleton.n > cap:
        raise CapacityError(f"{len(contexts)} contexts x {skeleton.n} states exceeds cap {cap}")
    tables = {}
    for ctx in contexts:
        mdp = skeleton.induce(point_mass(belief, ctx).cell_marginals(), gamma)
        tables[tuple(ctx)] = value_iteration(mdp, tol).q
    return tables


def context_weights(belief: Belief, contexts: Sequence[tuple[int, ...]]) -> np.ndarray:
    idx = np.array(contexts, dtype=np.int64).reshape(len(contexts), len(belief.opponents))
    w = np.ones(len(contexts))
    for j in range(idx.shape[1]):
        w *= belief.probs[j, idx[:, j]]
    return w


def qmdp_values(state_index: int, belief: Belief, q_tables: dict) -> np.ndarray:
    """Belief-weighted Q-values of the 5 actions at one state."""
    contexts = list(q_tables)
    w = context_weights(belief, contexts)
    support = np.flatnonzero(w > 0)
    if not np.isclose(w.sum(), 1.0, atol=1e-9):
        raise ValueError("q_tables do not cover the support of the belief")
    return sum(w[c] * q_tables[contexts[c]][state_index] for c in support)


def qmdp_action(state_index: int, belief: Belief, q_tables: dict, valid: np.ndarray | None = None) -> Action:
    values = qmdp_values(state_index, belief, q_tables)
    mask = None if valid is None else np.asarray(valid, dtype=bool)[None, :]
    return Action(int(greedy(values[None, :], valid=mask)[0]))
