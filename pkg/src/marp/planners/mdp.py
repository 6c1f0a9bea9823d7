"""Planners built on the belief-induced MDP: fixed belief, replanning, and QMDP."""
from __future__ import annotations

from ..env import Action, JointState
from ..solvers import (
    DEFAULT_STATE_CAP,
    TransitionSkeleton,
    context_beliefs,
    qmdp_action,
    solve_context_mdps,
    value_iteration,
)
from .base import Planner


class _SkeletonPlanner(Planner):
    """Keeps a transition skeleton rooted at the current live opponents.

    The skeleton enumerates every joint state reachable from its root, so it
    is only rebuilt when an opponent drops out of play.
    """

    def __init__(self, ctx, cap: int = DEFAULT_STATE_CAP, tol: float = 1e-6):
        super().__init__(ctx)
        self.cap = cap
        self.tol = tol
        self.skeleton = None
        self.live: tuple[int, ...] = ()

    def _ensure_skeleton(self, state: JointState) -> bool:
        """(Re)build the skeleton if the live opponent set changed; True if rebuilt."""
        live = tuple(self.live_opponents(state))
        if self.skeleton is not None and live == self.live:
            return False
        root = [state.positions[self.index]] + [state.positions[j] for j in live]
        self.skeleton = TransitionSkeleton(self.grid, root, self.goal, self.ctx.rewards, self.cap)
        self.live = live
        return True

    def _rows(self):
        return [self.belief.opponents.index(j) for j in self.live]

    def _sub_belief(self, belief):
        return belief.__class__(belief.space, self.live, belief.goal_index, belief.probs[self._rows()])

    def _key(self, state: JointState):
        index = self.grid.index
        return (index[state.positions[self.index]],) + tuple(index[state.positions[j]] for j in self.live)

    def reset(self, state: JointState) -> None:
        super().reset(state)
        self.skeleton = None
        if not self.at_goal(state):
            self._ensure_skeleton(state)


class MdpPlanner(_SkeletonPlanner):
    """Greedy policy of M(b); ``fixed`` solves once for the prior, ``update`` re-solves every step."""

    def __init__(self, ctx, mode: str = "update", **kw):
        super().__init__(ctx, **kw)
        if mode not in ("fixed", "update"):
            raise ValueError("mode must be 'fixed' or 'update'")
        self.mode = mode
        self.name = f"mdp:{mode}"
        self.policy = None
        self.prior = None

    def reset(self, state: JointState) -> None:
        super().reset(state)
        self.prior = self.belief
        self.policy = None
        if self.skeleton is not None:
            self._solve(self.prior)

    def _solve(self, belief):
        mdp = self.skeleton.induce(self._sub_belief(belief).cell_marginals(), self.ctx.gamma)
        self.policy = value_iteration(mdp, self.tol).policy

    def act(self, state: JointState) -> Action:
        if self.at_goal(state):
            return Action.STAY
        if self._ensure_skeleton(state) or self.policy is None:
            self._solve(self.prior if self.mode == "fixed" else self.belief)
        s = self.skeleton.state_index.get(self._key(state))
        if s is None:
            return self.fallback(state, "state outside the enumerated MDP")
        return Action(int(self.policy[s]))

    def observe(self, state: JointState, actions) -> None:
        super().observe(state, actions)
        if self.mode == "update" and self.skeleton is not None:
            self.policy = None


class QmdpPlanner(_SkeletonPlanner):
    """Per-context Q-tables solved once; each step mixes them by the running belief."""

    name = "qmdp"

    def reset(self, state: JointState) -> None:
        super().reset(state)
        self.q_tables = None
        if self.skeleton is not None:
            self._solve_contexts()

    def _solve_contexts(self):
        sub = self._sub_belief(self.belief)
        self.q_tables = solve_context_mdps(
            self.skeleton, sub, context_beliefs(sub), self.ctx.gamma, self.tol, self.cap
        )

    def act(self, state: JointState) -> Action:
        if self.at_goal(state):
            return Action.STAY
        if self._ensure_skeleton(state) or self.q_tables is None:
            self._solve_contexts()
        s = self.skeleton.state_index.get(self._key(state))
        if s is None:
            return self.fallback(state, "state outside the enumerated MDP")
        valid = self.grid.valid_table[self.grid.index[state.positions[self.index]]]
        return qmdp_action(s, self._sub_belief(self.belief), self.q_tables, valid)
