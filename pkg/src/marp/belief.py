"""Factored beliefs over opponent goals and their tempered Bayesian update."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .env import Action, Cell, GridMap, JointState
from .opponents import HypothesisSpace, hypothesis_space

HARD_MAX = "hardmax"
"""Temperature marker for the beta -> 0 limit."""

_TIE_RTOL = 1e-12


class Belief:
    """One probability row per opponent over a shared set of hypothesised goals.

    The joint belief over opponent types is the product of the rows. Instances
    are immutable; ``update`` returns a new one.
    """

    __slots__ = ("space", "opponents", "goal_index", "probs", "_key")

    def __init__(self, space: HypothesisSpace, opponents: Sequence[int], goal_index: np.ndarray, probs: np.ndarray):
        self.space = space
        self.opponents = tuple(opponents)
        self.goal_index = np.asarray(goal_index, dtype=np.int64)
        self.goal_index.flags.writeable = False
        probs = np.array(probs, dtype=np.float64)
        if probs.shape != (len(self.opponents), len(self.goal_index)):
            raise ValueError("probs must be (n_opponents, n_hypotheses)")
        probs.flags.writeable = False
        self.probs = probs
        self._key = None

    @property
    def goals(self) -> tuple[Cell, ...]:
        cells = self.space.grid.cells
        return tuple(cells[g] for g in self.goal_index)

    @property
    def n_hypotheses(self) -> int:
        return len(self.goal_index)

    def row(self, opponent: int) -> np.ndarray:
        return self.probs[self.opponents.index(opponent)]

    def key(self) -> bytes:
        if self._key is None:
            self._key = self.probs.tobytes()
        return self._key

    def hypothesis_tables(self) -> np.ndarray:
        """Action tables of the hypotheses, ``(n_hypotheses, n_cells, 5)``."""
        return self.space.table[self.goal_index]

    def marginals(self, state: JointState) -> np.ndarray:
        """``P(a_j | S)`` per opponent, shape ``(n_opponents, 5)``."""
        cells = np.fromiter((self.space.grid.index[state.positions[j]] for j in self.opponents), dtype=np.int64)
        lik = self.space.table[self.goal_index[None, :], cells[:, None], :]  # (n_opp, G, 5)
        return np.einsum("jg,jga->ja", self.probs, lik)

    def cell_marginals(self) -> np.ndarray:
        """``P(a_j | cell)`` for every opponent and every cell, ``(n_opponents, n_cells, 5)``."""
        return np.einsum("jg,gca->jca", self.probs, self.hypothesis_tables())

    def sample_goals(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        """Hypothesis indices drawn independently per opponent from their rows."""
        out = []
        for row in self.probs:
            cdf = np.cumsum(row)
            u = rng.random(size if size is not None else 1) * cdf[-1]
            out.append(np.minimum(np.searchsorted(cdf, u, side="right"), len(row) - 1))
        out = np.array(out)
        return out[:, 0] if size is None else out

    def to_json(self) -> str:
        cells = self.space.grid.cells
        return json.dumps(
            {
                "opponents": [
                    {
                        "agent": j,
                        "belief": [
                            {"goal": list(cells[g]), "p": float(p)} for g, p in zip(self.goal_index, self.probs[k])
                        ],
                    }
                    for k, j in enumerate(self.opponents)
                ]
            }
        )

    @classmethod
    def from_json(cls, text: str, space: HypothesisSpace) -> "Belief":
        data = json.loads(text)
        index = space.grid.index
        rows = data["opponents"]
        goal_index = np.array([index[tuple(e["goal"])] for e in rows[0]["belief"]])
        probs = np.array([[e["p"] for e in r["belief"]] for r in rows])
        return cls(space, [r["agent"] for r in rows], goal_index, probs)

    def with_probs(self, probs: np.ndarray) -> "Belief":
        return Belief(self.space, self.opponents, self.goal_index, probs)

    def __repr__(self):
        return f"Belief(opponents={self.opponents}, hypotheses={self.n_hypotheses})"


def init_belief(
    grid: GridMap,
    opponent_indices: Sequence[int],
    own_goal: Cell,
    epsilon: float,
    include_own_goal: bool = False,
) -> Belief:
    """Uniform belief over every empty cell (minus the own goal) for each opponent."""
    if grid.empty_cell_count < 2:
        raise ValueError("map needs at least two passable cells")
    space = hypothesis_space(grid, epsilon)
    own = grid.index[tuple(own_goal)]
    goal_index = np.array([g for g in range(grid.empty_cell_count) if include_own_goal or g != own])
    n = len(goal_index)
    probs = np.full((len(opponent_indices), n), 1.0 / n)
    return Belief(space, opponent_indices, goal_index, probs)


def point_mass(belief: Belief, hypotheses: Sequence[int]) -> Belief:
    """Belief concentrated on one hypothesis index per opponent."""
    probs = np.zeros_like(belief.probs)
    probs[np.arange(len(hypotheses)), list(hypotheses)] = 1.0
    return belief.with_probs(probs)


def tempered_posterior(prior: np.ndarray, likelihood: np.ndarray, beta) -> np.ndarray:
    """Rows of ``(likelihood * prior) ** (1/beta)``, normalised.

    ``beta=HARD_MAX`` gives the uniform distribution over the argmax of the
    Bayes product. Rows whose product is all zero keep their prior.
    """
    prior = np.atleast_2d(prior)
    likelihood = np.atleast_2d(likelihood)
    product = prior * likelihood
    if not isinstance(beta, str) and beta == 1:
        totals = product.sum(axis=1, keepdims=True)
        dead = totals[:, 0] <= 0.0
        if not dead.any():
            return product / totals
        out = np.where(dead[:, None], prior, product / np.where(totals > 0, totals, 1.0))
        return out
    out = np.empty_like(product)
    for k in range(product.shape[0]):
        row = product[k]
        top = row.max()
        if top <= 0.0:
            out[k] = prior[k]
            continue
        if beta == HARD_MAX:
            winners = row >= top * (1.0 - _TIE_RTOL)
            out[k] = winners / winners.sum()
        else:
            with np.errstate(divide="ignore"):
                logs = (np.log(row) - np.log(top)) / float(beta)
            w = np.exp(logs)
            out[k] = w / w.sum()
    return out


def update(
    b: Belief,
    state: JointState,
    observed: Sequence[Action | None],
    beta=1.0,
    only: Sequence[int] | None = None,
) -> Belief:
    """Posterior after watching each opponent play ``observed[k]`` at ``state``.

    ``observed`` is aligned with ``b.opponents``; ``None`` entries (e.g. removed
    agents) leave that row untouched. ``only`` restricts the update to the
    listed opponent slots.
    """
    if not isinstance(beta, str) and beta <= 0:
        raise ValueError("beta must be positive or HARD_MAX")
    rows = [k for k, a in enumerate(observed) if a is not None and (only is None or k in only)]
    if not rows:
        return b
    index = b.space.grid.index
    cells = np.array([index[state.positions[b.opponents[k]]] for k in rows])
    acts = np.array([int(observed[k]) for k in rows])
    lik = b.space.table[b.goal_index[None, :], cells[:, None], acts[:, None]]  # (len(rows), G)
    probs = b.probs.copy()
    probs[rows] = tempered_posterior(b.probs[rows], lik, beta)
    return b.with_probs(probs)


@dataclass(frozen=True)
class JointActionDist:
    """Product distribution over opponent joint actions, kept factored."""

    opponents: tuple[int, ...]
    marginals: np.ndarray  # (n_opp, 5)

    def prob(self, joint: Sequence[int]) -> float:
        return float(np.prod(self.marginals[np.arange(len(joint)), list(joint)]))

    def support(self, tol: float = 0.0) -> list[list[int]]:
        return [list(np.flatnonzero(m > tol)) for m in self.marginals]

    def enumerate(self, tol: float = 0.0) -> Iterator[tuple[tuple[Action, ...], float]]:
        supports = self.support(tol)
        for combo in itertools.product(*supports):
            p = 1.0
            for k, a in enumerate(combo):
                p *= self.marginals[k, a]
            yield tuple(Action(a) for a in combo), float(p)

    def size(self) -> int:
        return int(np.prod([len(s) for s in self.support()]))


def joint_action_dist(b: Belief, state: JointState) -> JointActionDist:
    return JointActionDist(b.opponents, b.marginals(state))


def detect_stationary(position_history: Sequence[Sequence[Cell]], k: int) -> set[int]:
    """Indices whose last ``k`` recorded positions are all the same cell."""
    flagged = set()
    for j, history in enumerate(position_history):
        if len(history) >= k and len({tuple(c) for c in history[-k:]}) == 1:
            flagged.add(j)
    return flagged
