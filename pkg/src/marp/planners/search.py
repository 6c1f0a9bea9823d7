"""Layered uniform tree search and opponent-modelling MCTS with pluggable leaf evaluators."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..belief import Belief
from ..env import ACTIONS, Action, JointState
from ..ne_oracle import OwnPlanCache, SearchLimits, ne_eval
from ..opponents import all_pairs_distance
from ..solvers import (
    CapacityError,
    TransitionSkeleton,
    context_beliefs,
    greedy,
    qmdp_values,
    solve_context_mdps,
    value_iteration,
)
from .base import Planner, SearchModel, argmax_first

N_ACTIONS = len(ACTIONS)
INF_DEPTH = math.inf

UCT_C = math.sqrt(2.0)
PUCT_C1 = 1.25
PUCT_C2 = 19625.0

#: Own-node expansion limit of one uniform-tree-search call before falling back.
DEFAULT_TS_BUDGET = 200_000

# Oracle limits used for leaf evaluation: much tighter than the standalone solver.
EVAL_LIMITS = SearchLimits(max_hl_nodes=64, max_ll_expansions=60_000)


class BudgetExceeded(RuntimeError):
    pass


@dataclass
class TsConfig:
    """Layer sizes, leaf evaluator and selection rule of one tree search."""

    n: int = 1
    m: float = 0
    eval: str = "zero"
    backup: str = "exact"  # "exact" or "sampled"
    backup_samples: int = 10
    selection: str = "none"  # "none" | "uct" | "puct"
    c: float = UCT_C
    c1: float = PUCT_C1
    c2: float = PUCT_C2
    budget: int = DEFAULT_TS_BUDGET  # node budget (uts) or iterations (mcts)
    select_samples: int = 50
    eval_samples: int = 5
    w: float = 0.2
    beta: float = 1.0

    def __post_init__(self):
        if self.n < 0 or self.m < 0:
            raise ValueError("n and m must be >= 0")
        if self.backup not in ("exact", "sampled"):
            raise ValueError("backup must be 'exact' or 'sampled'")
        if self.selection not in ("none", "uct", "puct"):
            raise ValueError("selection must be none, uct or puct")
        if self.budget < 1:
            raise ValueError("budget must be positive")
        if self.backup == "sampled" and self.backup_samples < 1:
            raise ValueError("backup samples must be >= 1")


# -- leaf evaluators -----------------------------------------------------------


class Evaluator:
    """``(model, key, probs, rng) -> (value, prior over the 5 actions)``."""

    name = "eval"

    def __call__(self, model: SearchModel, key, probs, rng) -> tuple[float, np.ndarray]:
        raise NotImplementedError


def _one_hot(a: int) -> np.ndarray:
    out = np.zeros(N_ACTIONS)
    out[a] = 1.0
    return out


class ZeroEval(Evaluator):
    name = "zero"

    def __call__(self, model, key, probs, rng):
        prior = model.valid[key[0]].astype(float)
        return 0.0, prior / prior.sum()


class ShortestPathEval(Evaluator):
    """``gamma**d * goal_reward`` with ``d`` the own distance to goal, ignoring opponents."""

    name = "sp"

    def __call__(self, model, key, probs, rng):
        dist = all_pairs_distance(model.grid)[model.goal]
        d = dist[key[0]]
        if not np.isfinite(d):
            return ZeroEval()(model, key, probs, rng)
        best = min(
            (a for a in model.valid_actions[key[0]]),
            key=lambda a: (dist[model.moves[key[0], a]], a),
        )
        return model.gamma**d * model.rewards.goal_reward, _one_hot(best)


class CbsEval(Evaluator):
    """NE-oracle leaf value: mean of ``gamma**l * goal_reward`` over sampled goal assignments."""

    name = "cbs"

    def __init__(self, samples: int, w: float = 0.2, limits: SearchLimits = EVAL_LIMITS,
                 cache: OwnPlanCache | None = None):
        self.samples = samples
        self.w = w
        self.limits = limits
        self.cache = cache if cache is not None else OwnPlanCache()

    def __call__(self, model, key, probs, rng):
        res = ne_eval(
            model.to_state(key),
            model.to_belief(probs),
            0,
            model.grid.cells[model.goal],
            self.samples,
            model.gamma,
            model.rewards,
            self.w,
            rng,
            self.limits,
            self.cache,
        )
        return res.value_estimate, res.policy_prior


class _SkeletonEval(Evaluator):
    """Shared plumbing for evaluators that solve MDPs on an enumerated skeleton."""

    def __init__(self, skeleton: TransitionSkeleton, tol: float = 1e-6):
        self.skeleton = skeleton
        self.tol = tol

    def _index(self, key):
        s = self.skeleton.state_index.get(tuple(key))
        if s is None:
            raise CapacityError("search state outside the enumerated skeleton")
        return s


class QmdpEval(_SkeletonEval):
    """Belief-mixed context Q-values; the prior is one-hot on the QMDP action."""

    name = "qmdp"

    def __init__(self, skeleton, belief: Belief, gamma: float, tol: float = 1e-6, cap: int = 100_000):
        super().__init__(skeleton, tol)
        self.contexts = context_beliefs(belief)
        self.q_tables = solve_context_mdps(skeleton, belief, self.contexts, gamma, tol, cap)

    def __call__(self, model, key, probs, rng):
        s = self._index(key)
        q = qmdp_values(s, model.to_belief(probs), self.q_tables)
        a = int(greedy(q[None, :], valid=model.valid[key[0]][None, :])[0])
        return float(q[a]), _one_hot(a)


class MdpEval(_SkeletonEval):
    """Optimal value of the MDP induced by the frontier belief (the infinite belief-fixed layer)."""

    name = "mdp"

    def __init__(self, skeleton, gamma: float, tol: float = 1e-6):
        super().__init__(skeleton, tol)
        self.gamma = gamma
        self._solved: dict[bytes, object] = {}

    def __call__(self, model, key, probs, rng):
        s = self._index(key)
        tag = probs.tobytes()
        sol = self._solved.get(tag)
        if sol is None:
            mdp = self.skeleton.induce(model.to_belief(probs).cell_marginals(), self.gamma)
            sol = value_iteration(mdp, self.tol)
            self._solved[tag] = sol
        return float(sol.values[s]), _one_hot(int(sol.policy[s]))


# -- uniform tree search -----------------------------------------------------


@dataclass
class TsResult:
    action: Action
    root_values: dict  # own action -> backed-up EXP value
    nodes: int


def _joint_supports(marg: np.ndarray):
    return [tuple(int(a) for a in np.flatnonzero(row > 0)) for row in marg]


def uniform_ts(model: SearchModel, key, probs, cfg: TsConfig, evaluator: Evaluator, rng) -> TsResult:
    """Depth ``n + m`` expectimax: beliefs update along the first ``n`` levels and freeze after."""
    depth = cfg.n + (0 if cfg.m == INF_DEPTH else int(cfg.m))
    counter = [0]

    def max_value(k, p, h):
        if h >= depth:
            return evaluator(model, k, p, rng)[0]
        return max(exp_value(k, p, a, h) for a in model.valid_actions[k[0]])

    def exp_value(k, p, a, h):
        counter[0] += 1
        if counter[0] > cfg.budget:
            raise BudgetExceeded(f"more than {cfg.budget} expansions")
        marg = model.marginals(k, p)
        update = h < cfg.n
        if cfg.backup == "exact":
            total = 0.0
            for joint in itertools.product(*_joint_supports(marg)):
                prob = 1.0
                for j, aj in enumerate(joint):
                    prob *= marg[j, aj]
                total += prob * edge(k, p, a, joint, h, update)
            return total
        draws = _sample_joint(marg, cfg.backup_samples, rng)
        seen = {}
        total = 0.0
        for joint in draws:
            if joint not in seen:
                seen[joint] = edge(k, p, a, joint, h, update)
            total += seen[joint]
        return total / len(draws)

    def edge(k, p, a, joint, h, update):
        r, terminal, nxt = model.outcome(k, a, joint)
        if terminal:
            return r
        p2 = model.update(k, p, joint, cfg.beta) if update else p
        return r + model.gamma * max_value(nxt, p2, h + 1)

    if depth == 0:
        _, prior = evaluator(model, key, probs, rng)
        valid = model.valid_actions[key[0]]
        a = valid[argmax_first([prior[x] for x in valid])]
        return TsResult(Action(a), {Action(x): float(prior[x]) for x in valid}, 0)
    values = {}
    for a in model.valid_actions[key[0]]:
        values[Action(a)] = exp_value(key, probs, a, 0)
    acts = list(values)
    best = acts[argmax_first([values[a] for a in acts])]
    return TsResult(best, values, counter[0])


def _sample_joint(marg: np.ndarray, size: int, rng) -> list[tuple[int, ...]]:
    """``size`` opponent joint actions drawn independently from per-opponent marginals."""
    if marg.shape[0] == 0:
        return [()] * size
    cdf = np.cumsum(marg, axis=1)
    u = rng.random((size, marg.shape[0])) * cdf[:, -1]
    picks = np.empty((size, marg.shape[0]), dtype=np.int64)
    for j in range(marg.shape[0]):
        picks[:, j] = np.minimum(np.searchsorted(cdf[j], u[:, j], side="right"), N_ACTIONS - 1)
    return [tuple(int(x) for x in row) for row in picks]


# -- MCTS ----------------------------------------------------------------------


class MaxNode:
    __slots__ = ("key", "probs", "height", "reward", "v", "N", "prior", "children", "untried", "mean_policy")

    def __init__(self, key, probs, height, reward):
        self.key = key
        self.probs = probs
        self.height = height
        self.reward = reward
        self.v = 0.0
        self.N = 0
        self.prior = None
        self.children: dict[int, ExpNode] = {}
        self.untried: list[int] | None = None
        self.mean_policy = None


class ExpNode:
    __slots__ = ("action", "v", "N", "children")

    def __init__(self, action):
        self.action = action
        self.v = 0.0
        self.N = 0
        self.children: dict[tuple, MaxNode | "TerminalLeaf"] = {}


@dataclass
class TerminalLeaf:
    reward: float
    N: int = 0
    v: float = 0.0


@dataclass
class MctsResult:
    action: Action
    root: MaxNode
    iterations: int
    visits: dict = field(default_factory=dict)


def mean_policy(model: SearchModel, node: MaxNode, samples: int, rng) -> np.ndarray:
    """Average action distribution of ``samples`` hypotheses drawn per opponent, ``(k, 5)``."""
    if node.mean_policy is None:
        k = model.k
        if k == 0:
            node.mean_policy = np.zeros((0, N_ACTIONS))
        else:
            cdf = np.cumsum(node.probs, axis=1)
            u = rng.random((k, samples)) * cdf[:, -1:]
            picks = np.empty((k, samples), dtype=np.int64)
            for j in range(k):
                picks[j] = np.searchsorted(cdf[j], u[j], side="right")
            np.minimum(picks, node.probs.shape[1] - 1, out=picks)
            cells = np.array(node.key[1:])
            rows = model.table[picks, cells[:, None], :]  # (k, samples, 5)
            node.mean_policy = rows.mean(axis=1)
    return node.mean_policy


def _score(cfg: TsConfig, parent: MaxNode, child: ExpNode) -> float:
    q = child.v / child.N
    explore = math.sqrt(math.log(parent.N) / child.N)
    if cfg.selection == "puct":
        prior = parent.prior[child.action] if parent.prior is not None else 1.0 / N_ACTIONS
        return q + prior * explore * (cfg.c1 + math.log((parent.N + cfg.c2) / cfg.c2))
    return q + cfg.c * explore


def mcts(model: SearchModel, key, probs, cfg: TsConfig, evaluator: Evaluator, rng) -> MctsResult:
    """Anytime MCTS; ``cfg.budget`` iterations, the first of which evaluates the root."""
    root = MaxNode(key, probs, 0, 0.0)
    valid = list(model.valid_actions[key[0]])
    if len(valid) == 1:
        return MctsResult(Action(valid[0]), root, 0)
    gamma = model.gamma

    def evaluate(node: MaxNode):
        value, prior = evaluator(model, node.key, node.probs, rng)
        node.prior = prior
        node.untried = list(model.valid_actions[node.key[0]])
        if cfg.selection == "puct":
            node.untried.sort(key=lambda a: (-prior[a], a))
        node.v += value
        node.N += 1
        return value

    def descend(node: MaxNode, a: int):
        """Sample an opponent joint action under ``a``; return the (possibly new) child and whether it is new."""
        exp = node.children[a]
        pol = mean_policy(model, node, cfg.select_samples, rng)
        joint = _sample_joint(pol, 1, rng)[0]
        child = exp.children.get(joint)
        if child is not None:
            return exp, child, False
        r, terminal, nxt = model.outcome(node.key, a, joint)
        if terminal:
            child = TerminalLeaf(r)
        else:
            child = MaxNode(nxt, model.update(node.key, node.probs, joint, cfg.beta), node.height + 1, r)
        exp.children[joint] = child
        return exp, child, True

    iterations = 0
    for _ in range(cfg.budget):
        iterations += 1
        if root.untried is None:
            evaluate(root)
            continue
        path = []  # (max_node, exp_node) pairs from the root down
        node = root
        while True:
            if node.untried:
                a = node.untried.pop(0)
                node.children[a] = ExpNode(a)
            else:
                a = max(node.children, key=lambda x: (_score(cfg, node, node.children[x]), -x))
            exp, child, new = descend(node, a)
            path.append((node, exp))
            if isinstance(child, TerminalLeaf):
                child.N += 1
                child.v += child.reward
                g = child.reward
                break
            if new:
                g = child.reward + gamma * evaluate(child)
                break
            node = child
        # backup: g is the return seen from the last EXP node on the path
        for i in range(len(path) - 1, -1, -1):
            parent, exp = path[i]
            exp.v += g
            exp.N += 1
            parent.v += g
            parent.N += 1
            if i:
                g = parent.reward + gamma * g
    if not root.children:
        raise BudgetExceeded("no root child was expanded")
    visits = {Action(a): e.N for a, e in root.children.items()}
    acts = sorted(root.children)
    best = acts[argmax_first([root.children[a].N for a in acts], atol=0)]
    return MctsResult(Action(best), root, iterations, visits)


# -- planners ------------------------------------------------------------------


EvaluatorFactory = Callable[["SearchPlanner", JointState], Evaluator]


class SearchPlanner(Planner):
    """Shared machinery of the tree-search planners."""

    def __init__(self, ctx, cfg: TsConfig, update_belief: bool = True, name: str = "search"):
        super().__init__(ctx)
        self.cfg = cfg
        self.beta = cfg.beta
        self.update_belief = update_belief
        self.name = name
        self._skeleton = None
        self._skeleton_live = None
        self._evaluator = None
        self._eval_live = None
        self._cache = OwnPlanCache()
        self.last_result = None

    def reset(self, state: JointState) -> None:
        super().reset(state)
        self._skeleton = None
        self._evaluator = None
        self._eval_live = None
        self.last_result = None

    def observe(self, state, actions) -> None:
        if self.update_belief:
            super().observe(state, actions)

    def _model(self, state: JointState):
        live = self.live_opponents(state)
        rows = [self.belief.opponents.index(j) for j in live]
        model = SearchModel(self.grid, self.goal, self.belief, rows, self.ctx.gamma, self.ctx.rewards)
        key = model.key_of(state, self.index, live)
        return model, key, model.probs_of(self.belief), live

    def _skeleton_for(self, state: JointState, live):
        if self._skeleton is None or self._skeleton_live != tuple(live):
            root = [state.positions[self.index]] + [state.positions[j] for j in live]
            self._skeleton = TransitionSkeleton(self.grid, root, self.goal, self.ctx.rewards)
            self._skeleton_live = tuple(live)
        return self._skeleton

    def evaluator(self, state: JointState, model: SearchModel, live) -> Evaluator:
        kind = "mdp" if self.cfg.m == INF_DEPTH else self.cfg.eval
        if self._evaluator is not None and self._eval_live == tuple(live):
            return self._evaluator
        if kind == "zero":
            ev = ZeroEval()
        elif kind == "sp":
            ev = ShortestPathEval()
        elif kind == "cbs":
            ev = CbsEval(self.cfg.eval_samples, self.cfg.w, cache=self._cache)
        elif kind in ("qmdp", "mdp"):
            skeleton = self._skeleton_for(state, live)
            if kind == "qmdp":
                sub = Belief(self.belief.space, tuple(live), self.belief.goal_index, model.probs_of(self.belief))
                ev = QmdpEval(skeleton, sub, self.ctx.gamma)
            else:
                ev = MdpEval(skeleton, self.ctx.gamma)
        else:
            raise ValueError(f"unknown evaluator {kind!r}")
        self._evaluator, self._eval_live = ev, tuple(live)
        return ev

    def act(self, state: JointState) -> Action:
        if self.at_goal(state):
            return Action.STAY
        try:
            model, key, probs, live = self._model(state)
            ev = self.evaluator(state, model, live)
            return self.search(model, key, probs, ev)
        except (BudgetExceeded, CapacityError) as exc:
            return self.fallback(state, str(exc))

    def search(self, model, key, probs, ev) -> Action:
        raise NotImplementedError


class UniformTsPlanner(SearchPlanner):
    def search(self, model, key, probs, ev):
        self.last_result = uniform_ts(model, key, probs, self.cfg, ev, self.rng)
        return self.last_result.action


class MctsPlanner(SearchPlanner):
    def search(self, model, key, probs, ev):
        self.last_result = mcts(model, key, probs, self.cfg, ev, self.rng)
        return self.last_result.action
