"""Conflict-based search (optimal and bounded-suboptimal) used as a Nash-equilibrium oracle.

Search budgets are counted in node expansions rather than wall-clock time so
that results, and therefore whole episodes, replay bit-identically.
"""
from __future__ import annotations

import heapq
import itertools
import time
from bisect import bisect_right, insort
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from .belief import Belief
from .env import ACTIONS, Action, Cell, GridMap, JointState, components
from .opponents import all_pairs_distance
from .solvers import RewardParams

_INF = 10**9


class CbsError(RuntimeError):
    pass


class Infeasible(CbsError):
    pass


class Timeout(CbsError):
    def __init__(self, message: str, incumbent: "NePlan | None" = None):
        super().__init__(message)
        self.incumbent = incumbent


class _Exhausted(Exception):
    pass


@dataclass(frozen=True)
class Constraint:
    """Vertex constraint ``(cell, time)``, or edge constraint ``cell -> to`` arriving at ``time``."""

    agent: int
    cell: Cell
    time: int
    to: Cell | None = None

    def __post_init__(self):
        if self.time < 0:
            raise ValueError("constraint time must be non-negative")


@dataclass
class NePlan:
    paths: list[list[Cell]]
    sum_of_costs: int
    hl_expanded: int = 0

    def format(self) -> str:
        return "\n".join(" ".join(f"{t}:({r},{c})" for t, (r, c) in enumerate(p)) for p in self.paths)


@dataclass(frozen=True)
class SearchLimits:
    max_hl_nodes: int = 20_000
    max_ll_expansions: int = 2_000_000
    timeout: float | None = None  # seconds; makes results timing-dependent


DEFAULT_LIMITS = SearchLimits()


class _Budget:
    __slots__ = ("ll_left", "deadline")

    def __init__(self, limits: SearchLimits):
        self.ll_left = limits.max_ll_expansions
        self.deadline = None if limits.timeout is None else time.perf_counter() + limits.timeout

    def spend(self, n: int = 1):
        self.ll_left -= n
        if self.ll_left < 0:
            raise _Exhausted
        if self.deadline is not None and time.perf_counter() > self.deadline:
            raise _Exhausted


class _MapData:
    """Per-map lookup tables shared by every search on that map."""

    def __init__(self, grid: GridMap):
        self.grid = grid
        self.dist = all_pairs_distance(grid)
        self.moves = [tuple(nb) + (i,) for i, nb in enumerate(grid.neighbors)]
        self._h = np.where(np.isfinite(self.dist), self.dist, _INF).astype(np.int64).tolist()

    def h(self, goal: int) -> list[int]:
        return self._h[goal]


@lru_cache(maxsize=16)
def _map_data(grid: GridMap) -> _MapData:
    return _MapData(grid)


class _AgentCons:
    __slots__ = ("vertex", "edge", "goal_last", "max_t")

    def __init__(self, cons: Sequence[tuple], goal: int):
        self.vertex = {(c, t) for c, t, to in cons if to is None}
        self.edge = {(c, to, t) for c, t, to in cons if to is not None}
        self.goal_last = max((t for c, t, to in cons if to is None and c == goal), default=-1)
        self.max_t = max((t for _, t, _ in cons), default=-1)


_EMPTY = _AgentCons((), -1)


class _Reservation:
    """Space-time occupancy of the other agents' paths, for pairwise conflict counting."""

    __slots__ = ("occ", "moves", "rest", "occ_times")

    def __init__(self, paths=()):
        self.occ: dict[tuple[int, int], int] = {}
        self.moves: dict[tuple[int, int, int], int] = {}
        self.rest: dict[int, list[int]] = {}
        self.occ_times: dict[int, list[int]] = {}
        for p in paths:
            self.add(p)

    def add(self, path: list[int]):
        occ, moves, times = self.occ, self.moves, self.occ_times
        prev = None
        for t, c in enumerate(path):
            occ[(c, t)] = occ.get((c, t), 0) + 1
            insort(times.setdefault(c, []), t)
            if prev is not None and prev != c:
                moves[(prev, c, t)] = moves.get((prev, c, t), 0) + 1
            prev = c
        insort(self.rest.setdefault(path[-1], []), len(path))

    def remove(self, path: list[int]):
        occ, moves, times = self.occ, self.moves, self.occ_times
        prev = None
        for t, c in enumerate(path):
            occ[(c, t)] -= 1
            times[c].remove(t)
            if prev is not None and prev != c:
                moves[(prev, c, t)] -= 1
            prev = c
        self.rest[path[-1]].remove(len(path))

    def count(self, c: int, n: int, t: int) -> int:
        """Conflicts incurred by moving ``c -> n`` arriving at time ``t``."""
        k = self.occ.get((n, t), 0)
        r = self.rest.get(n)
        if r:
            k += bisect_right(r, t)
        if n != c:
            k += self.moves.get((n, c, t), 0)
        return k

    def future(self, goal: int, t: int) -> int:
        """Conflicts from others entering ``goal`` after time ``t``."""
        k = 0
        times = self.occ_times.get(goal)
        if times:
            k += len(times) - bisect_right(times, t)
        r = self.rest.get(goal)
        if r:
            k += len(r) - bisect_right(r, t)
        return k


_NO_RES = _Reservation()


def _greedy_path(md: _MapData, h: list[int], start: int, goal: int) -> list[int]:
    path = [start]
    c = start
    moves = md.moves
    while c != goal:
        hc = h[c]
        for n in moves[c]:
            if h[n] == hc - 1:
                c = n
                break
        path.append(c)
    return path


def _path_ok(path: list[int], cons: _AgentCons, blocked: frozenset) -> bool:
    vertex, edge = cons.vertex, cons.edge
    prev = None
    for t, c in enumerate(path):
        if c in blocked or (c, t) in vertex:
            return False
        if prev is not None and (prev, c, t) in edge:
            return False
        prev = c
    return len(path) - 1 > cons.goal_last


def _path_conflicts(path: list[int], res: _Reservation) -> int:
    k = 0
    for t in range(1, len(path)):
        k += res.count(path[t - 1], path[t], t)
    return k + res.future(path[-1], len(path) - 1)


def _lower_bound(md, h, start, goal, cons: _AgentCons, blocked, budget: _Budget, n_cells: int):
    """Shortest constraint-respecting path by plain space-time A*; ``(length, path)`` or None."""
    if h[start] >= _INF:
        return None
    greedy = _greedy_path(md, h, start, goal)
    if (not cons.vertex and not cons.edge and not blocked) or _path_ok(greedy, cons, blocked):
        return h[start], greedy
    vertex, edge = cons.vertex, cons.edge
    floor_t = cons.goal_last + 1
    horizon = cons.max_t + n_cells + 1
    moves = md.moves
    heap = [(max(h[start], floor_t), 0, start)]
    parent = {}
    closed = set()
    spent = 0
    while heap:
        f, negt, c = heapq.heappop(heap)
        t = -negt
        if (c, t) in closed:
            continue
        closed.add((c, t))
        if c == goal and t >= floor_t:
            budget.spend(spent)
            return t, _unwind(parent, c, t)
        spent += 1
        if spent & 255 == 0:
            budget.spend(spent)
            spent = 0
        t1 = t + 1
        if t1 > horizon:
            continue
        for n in moves[c]:
            if n in blocked or (n, t1) in vertex or (c, n, t1) in edge or (n, t1) in closed:
                continue
            hn = h[n]
            if hn >= _INF:
                continue
            if (n, t1) not in parent:
                parent[(n, t1)] = (c, t)
            f1 = t1 + hn
            heapq.heappush(heap, (f1 if f1 > floor_t else floor_t, -t1, n))
    budget.spend(spent)
    return None


def _unwind(parent: dict, c: int, t: int) -> list[int]:
    path = [c]
    key = (c, t)
    while key in parent:
        key = parent[key]
        path.append(key[0])
    path.reverse()
    return path


FOCAL_EXPANSION_CAP = 400
"""Low-level focal searches stop after this many expansions and keep the A* path."""


def _focal_path(md, h, start, goal, cons: _AgentCons, blocked, bound: int, res: _Reservation, budget: _Budget,
                cap: int = FOCAL_EXPANSION_CAP):
    """Fewest-conflict path with cost at most ``bound``; returns ``(path, conflicts)`` or None.

    None means the expansion cap was hit (or no path fits the bound).
    """
    if h[start] <= bound:
        greedy = _greedy_path(md, h, start, goal)
        if _path_ok(greedy, cons, blocked) and _path_conflicts(greedy, res) == 0:
            return greedy, 0
    vertex, edge = cons.vertex, cons.edge
    check_cons = bool(vertex or edge or blocked)
    floor_t = cons.goal_last + 1
    moves = md.moves
    n_cells = len(moves)
    occ, rest, rmoves, future = res.occ, res.rest, res.moves, res.future
    # States are encoded as t * n_cells + cell and heap priorities as one int
    # ordering by (conflicts, f, deeper first, insertion order).
    span = bound + 2
    tie_span = 1 << 22
    tie = 0
    best = {start: 0}
    parent = {}
    heap = [((max(h[start], floor_t) * span + span - 1) * tie_span, start)]
    closed = set()
    spent = 0
    while heap:
        prio, sid = heapq.heappop(heap)
        if sid < 0:
            sid = -sid - 1
            budget.spend(spent)
            t, c = divmod(sid, n_cells)
            path = [c]
            while sid in parent:
                sid = parent[sid]
                path.append(sid % n_cells)
            path.reverse()
            return path, prio // (tie_span * span * span)
        if sid in closed:
            continue
        closed.add(sid)
        spent += 1
        if spent >= cap:
            break
        k = prio // (tie_span * span * span)
        t, c = divmod(sid, n_cells)
        if c == goal and t >= floor_t:
            tie += 1
            f = max(t, floor_t)
            heapq.heappush(heap, ((((k + future(goal, t)) * span + f) * span + span - 1 - t) * tie_span + tie, -sid - 1))
        t1 = t + 1
        base = t1 * n_cells
        for n in moves[c]:
            f1 = t1 + h[n]
            if f1 < floor_t:
                f1 = floor_t
            if f1 > bound:
                continue
            if check_cons and (n in blocked or (n, t1) in vertex or (c, n, t1) in edge):
                continue
            nid = base + n
            if nid in closed:
                continue
            k1 = k + occ.get((n, t1), 0)
            r = rest.get(n)
            if r:
                k1 += bisect_right(r, t1)
            if n != c:
                k1 += rmoves.get((n, c, t1), 0)
            if k1 < best.get(nid, _INF):
                best[nid] = k1
                parent[nid] = sid
                tie += 1
                heapq.heappush(heap, (((k1 * span + f1) * span + span - 1 - t1) * tie_span + tie, nid))
    budget.spend(spent)
    return None


def _first_conflict(paths: list[list[int]]):
    """Earliest pairwise conflict, or None.

    A conflict is ``("v", i, j, cell, t)`` or ``("e", i, j, u, v, t)`` where
    agent ``i`` moves ``u -> v`` and ``j`` moves ``v -> u`` arriving at ``t``.
    """
    n = len(paths)
    horizon = max(len(p) for p in paths)
    if n * horizon < 600:
        return _first_conflict_small(paths, horizon)
    pos = np.empty((n, horizon), dtype=np.int64)
    for i, p in enumerate(paths):
        pos[i, : len(p)] = p
        pos[i, len(p):] = p[-1]
    # vertex conflicts: repeated cells within a column
    srt = np.sort(pos, axis=0)
    vdup = (srt[1:] == srt[:-1]).any(axis=0)
    tv = int(np.argmax(vdup)) if vdup.any() else horizon
    # swap conflicts: the same undirected edge used twice within a column
    te = horizon
    if horizon > 1:
        u, v = pos[:, :-1], pos[:, 1:]
        big = int(pos.max()) + 1
        edge_id = np.minimum(u, v) * big + np.maximum(u, v)
        edge_id = np.where(u != v, edge_id, -1 - np.arange(n)[:, None])
        se = np.sort(edge_id, axis=0)
        edup = ((se[1:] == se[:-1]) & (se[1:] >= 0)).any(axis=0)
        if edup.any():
            te = int(np.argmax(edup)) + 1
    if tv == horizon and te == horizon:
        return None
    if tv <= te:
        col = pos[:, tv].tolist()
        seen: dict[int, int] = {}
        for i, c in enumerate(col):
            if c in seen:
                return ("v", seen[c], i, c, tv)
            seen[c] = i
    t = te
    moved: dict[tuple[int, int], int] = {}
    for i in range(n):
        a, b = int(pos[i, t - 1]), int(pos[i, t])
        if a == b:
            continue
        j = moved.get((b, a))
        if j is not None:
            return ("e", j, i, b, a, t)
        moved[(a, b)] = i
    raise AssertionError("conflict scan disagreed with itself")


def _first_conflict_small(paths: list[list[int]], horizon: int):
    n = len(paths)
    prev_pos = [p[0] for p in paths]
    for t in range(horizon):
        seen: dict[int, int] = {}
        moved: dict[tuple[int, int], int] = {}
        for i in range(n):
            p = paths[i]
            c = p[t] if t < len(p) else p[-1]
            other = seen.get(c)
            if other is not None:
                return ("v", other, i, c, t)
            seen[c] = i
            if t:
                u = prev_pos[i]
                if u != c:
                    j = moved.get((c, u))
                    if j is not None:
                        return ("e", j, i, c, u, t)
                    moved[(u, c)] = i
            prev_pos[i] = c
    return None


@dataclass
class _Node:
    cons: dict
    paths: list
    lbs: list
    cost: int
    lb: int
    conflicts: int
    order: int


def _check_instance(md: _MapData, starts, goals, blocked):
    if len(starts) != len(goals):
        raise ValueError("starts and goals differ in length")
    if len(set(starts)) != len(starts) or len(set(goals)) != len(goals):
        raise Infeasible("starts and goals must be pairwise distinct")
    for c in list(starts) + list(goals):
        if c in blocked:
            raise Infeasible("start or goal on a blocked cell")
    if blocked:
        masked = md.grid.with_obstacles([md.grid.cells[b] for b in blocked])
        labels = components(masked)
        index = masked.index
        cells = md.grid.cells
        for s, g in zip(starts, goals):
            if labels[index[cells[s]]] != labels[index[cells[g]]]:
                raise Infeasible("goal unreachable")
    else:
        for s, g in zip(starts, goals):
            if md.dist[g, s] == np.inf:
                raise Infeasible("goal unreachable")


def _solve(
    grid: GridMap,
    starts: Sequence[int],
    goals: Sequence[int],
    w: float,
    limits: SearchLimits,
    blocked: frozenset = frozenset(),
) -> NePlan:
    if w < 0:
        raise ValueError("w must be >= 0")
    md = _map_data(grid)
    _check_instance(md, starts, goals, blocked)
    n = len(starts)
    n_cells = grid.empty_cell_count
    budget = _Budget(limits)
    hs = [md.h(g) for g in goals]
    factor = 1.0 + w

    def plan(i, cons: _AgentCons, res: _Reservation):
        out = _lower_bound(md, hs[i], starts[i], goals[i], cons, blocked, budget, n_cells)
        if out is None:
            return None
        lb, shortest = out
        bound = int(np.floor(factor * lb + 1e-9))
        found = _focal_path(md, hs[i], starts[i], goals[i], cons, blocked, bound, res, budget)
        if found is None:
            return shortest, _path_conflicts(shortest, res), lb
        return found[0], found[1], lb

    try:
        res = _Reservation()
        paths, lbs = [], []
        conflicts = 0
        for i in range(n):
            out = plan(i, _EMPTY, res)
            if out is None:
                raise Infeasible(f"agent {i} has no path")
            path, k, lb = out
            paths.append(path)
            lbs.append(lb)
            conflicts += k
            res.add(path)
        loaded = list(paths)  # paths currently held by ``res``
        order = itertools.count()
        root = _Node({}, paths, lbs, sum(len(p) - 1 for p in paths), sum(lbs), conflicts, next(order))
        open_nodes = [root]
        expanded = 0
        while open_nodes:
            lb_min = min(node.lb for node in open_nodes)
            threshold = factor * lb_min + 1e-9
            best_i = min(
                (i for i, node in enumerate(open_nodes) if node.cost <= threshold),
                key=lambda i: (open_nodes[i].conflicts, open_nodes[i].cost, open_nodes[i].order),
            )
            node = open_nodes.pop(best_i)
            first = _first_conflict(node.paths) if node.conflicts else None
            if first is None:
                return NePlan(
                    [[grid.cells[c] for c in p] for p in node.paths], node.cost, hl_expanded=expanded
                )
            expanded += 1
            if expanded > limits.max_hl_nodes:
                raise _Exhausted
            budget.spend(0)
            if first[0] == "v":
                _, a, b, c, t = first
                branches = [(a, (c, t, None)), (b, (c, t, None))]
            else:
                _, a, b, u, v, t = first
                # a moved u -> v while b moved v -> u; forbid each its own move
                branches = [(a, (u, t, v)), (b, (v, t, u))]
            for i, p in enumerate(node.paths):
                if loaded[i] is not p:
                    res.remove(loaded[i])
                    res.add(p)
                    loaded[i] = p
            for agent, con in branches:
                cons = dict(node.cons)
                cons[agent] = cons.get(agent, ()) + (con,)
                old = node.paths[agent]
                res.remove(old)
                try:
                    out = plan(agent, _AgentCons(cons[agent], goals[agent]), res)
                    old_k = _path_conflicts(old, res) if out is not None else 0
                finally:
                    res.add(old)
                if out is None:
                    continue
                path, k, lb = out
                paths = list(node.paths)
                lbs = list(node.lbs)
                paths[agent], lbs[agent] = path, lb
                open_nodes.append(
                    _Node(
                        cons,
                        paths,
                        lbs,
                        node.cost - (len(old) - 1) + (len(path) - 1),
                        node.lb - node.lbs[agent] + lb,
                        node.conflicts - old_k + k,
                        next(order),
                    )
                )
        raise Infeasible("constraint tree exhausted")
    except _Exhausted:
        raise Timeout("search budget exhausted") from None


def _indices(grid: GridMap, cells: Sequence[Cell]) -> list[int]:
    return [grid.index[tuple(c)] for c in cells]


def cbs(
    grid: GridMap,
    starts: Sequence[Cell],
    goals: Sequence[Cell],
    timeout: float | None = None,
    limits: SearchLimits = DEFAULT_LIMITS,
    blocked: Sequence[Cell] = (),
) -> NePlan:
    """Conflict-free plan with minimum sum of costs."""
    if timeout is not None:
        limits = SearchLimits(limits.max_hl_nodes, limits.max_ll_expansions, timeout)
    return _solve(grid, _indices(grid, starts), _indices(grid, goals), 0.0, limits, frozenset(_indices(grid, blocked)))


def bounded_cbs(
    grid: GridMap,
    starts: Sequence[Cell],
    goals: Sequence[Cell],
    w: float = 0.2,
    timeout: float | None = None,
    limits: SearchLimits = DEFAULT_LIMITS,
    blocked: Sequence[Cell] = (),
) -> NePlan:
    """Conflict-free plan with sum of costs at most ``(1 + w)`` times the optimum (focal search)."""
    if timeout is not None:
        limits = SearchLimits(limits.max_hl_nodes, limits.max_ll_expansions, timeout)
    return _solve(grid, _indices(grid, starts), _indices(grid, goals), w, limits, frozenset(_indices(grid, blocked)))


def space_time_astar(
    grid: GridMap,
    start: Cell,
    goal: Cell,
    constraints: Sequence[Constraint] = (),
    horizon: int | None = None,
) -> list[Cell] | None:
    """Shortest path honouring ``constraints``; None if none exists within ``horizon`` steps."""
    md = _map_data(grid)
    s, g = grid.index[tuple(start)], grid.index[tuple(goal)]
    raw = [
        (grid.index[tuple(c.cell)], c.time, None if c.to is None else grid.index[tuple(c.to)]) for c in constraints
    ]
    cons = _AgentCons(raw, g)
    h = md.h(g)
    budget = _Budget(SearchLimits(max_ll_expansions=10**7))
    out = _lower_bound(md, h, s, g, cons, frozenset(), budget, grid.empty_cell_count)
    if out is None or (horizon is not None and out[0] > horizon):
        return None
    return [grid.cells[c] for c in out[1]]


# -- NE-based leaf evaluation -------------------------------------------------


@dataclass(frozen=True)
class NeEvalResult:
    value_estimate: float
    policy_prior: np.ndarray = field(compare=False)


def _first_action(path: list[Cell]) -> Action:
    if len(path) < 2:
        return Action.STAY
    (r0, c0), (r1, c1) = path[0], path[1]
    return Action.from_delta(r1 - r0, c1 - c0)


class OwnPlanCache:
    """Memo of (own path length, first action) per CBS instance; None marks failure."""

    def __init__(self, maxsize: int = 200_000):
        self.maxsize = maxsize
        self.data: dict = {}
        self.hits = 0
        self.misses = 0

    def get(self, grid, starts, goals, blocked, own_slot, w, limits):
        key = (grid, starts, goals, blocked, own_slot, w, limits)
        try:
            out = self.data[key]
            self.hits += 1
            return out
        except KeyError:
            pass
        self.misses += 1
        try:
            plan = _solve(grid, list(starts), list(goals), w, limits, blocked)
            path = plan.paths[own_slot]
            out = (len(path) - 1, _first_action(path))
        except CbsError:
            out = None
        if len(self.data) >= self.maxsize:
            self.data.clear()
        self.data[key] = out
        return out


_SHARED_CACHE = OwnPlanCache()


def sample_instance(
    state: JointState,
    belief: Belief,
    own_index: int,
    own_goal: Cell,
    rng: np.random.Generator,
):
    """Draw one goal per live opponent; opponents sampled to be at their goal become static.

    Goals are drawn in opponent order, each from its belief row restricted to
    cells not already claimed by the own goal or earlier opponents.
    """
    grid = belief.space.grid
    index = grid.index
    own_g = index[tuple(own_goal)]
    starts = [index[state.positions[own_index]]]
    goals = [own_g]
    blocked = []
    cand = belief.goal_index
    free = np.ones(grid.empty_cell_count, dtype=bool)
    free[own_g] = False
    for k, j in enumerate(belief.opponents):
        if state.removed[j]:
            continue
        p = belief.probs[k] * free[cand]
        cdf = np.cumsum(p)
        if cdf[-1] <= 0:
            continue
        pick = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        g = int(cand[min(pick, len(cand) - 1)])
        free[g] = False
        pos = index[state.positions[j]]
        if g == pos:
            blocked.append(pos)
        else:
            starts.append(pos)
            goals.append(g)
    return tuple(starts), tuple(goals), frozenset(blocked)


def ne_eval(
    state: JointState,
    belief: Belief,
    own_index: int,
    own_goal: Cell,
    samples: int,
    gamma: float = 0.95,
    rewards: RewardParams = RewardParams(),
    w: float = 0.2,
    rng: np.random.Generator | None = None,
    limits: SearchLimits = DEFAULT_LIMITS,
    cache: OwnPlanCache | None = _SHARED_CACHE,
) -> NeEvalResult:
    """Average NE value ``gamma**l * goal_reward`` and one-hot first-move prior over sampled goals."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    if rng is None:
        rng = np.random.default_rng(0)
    grid = belief.space.grid
    if tuple(state.positions[own_index]) == tuple(own_goal):
        prior = np.zeros(len(ACTIONS))
        prior[Action.STAY] = 1.0
        return NeEvalResult(rewards.goal_reward, prior)
    total = 0.0
    prior = np.zeros(len(ACTIONS))
    for _ in range(samples):
        starts, goals, blocked = sample_instance(state, belief, own_index, own_goal, rng)
        if cache is not None:
            out = cache.get(grid, starts, goals, blocked, 0, w, limits)
        else:
            out = OwnPlanCache(1).get(grid, starts, goals, blocked, 0, w, limits)
        if out is None:
            prior += 1.0 / len(ACTIONS)
            continue
        length, first = out
        total += gamma**length * rewards.goal_reward
        prior[first] += 1.0
    return NeEvalResult(total / samples, prior / samples)
