"""Independent reference implementations used only by the tests.

Each oracle here is written from first principles and shares no search code
with the package, so agreement is meaningful.
"""
from __future__ import annotations

import heapq
import itertools

import numpy as np

MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1), (0, 0))


def _step_cell(rows, cell, move):
    r, c = cell[0] + move[0], cell[1] + move[1]
    if 0 <= r < len(rows) and 0 <= c < len(rows[0]) and rows[r][c] == ".":
        return (r, c)
    return cell


def joint_astar_cost(rows, starts, goals):
    """Optimal sum of costs for two or more agents by Dijkstra on the product graph.

    Each agent carries a ``finished`` flag. Finishing is only allowed at the
    goal and pins the agent there for good at no further cost, which matches
    the usual sum-of-costs convention (cost = time of final arrival).
    """
    n = len(starts)
    start = (tuple(map(tuple, starts)), (False,) * n)
    goals = tuple(map(tuple, goals))
    dist = {start: 0}
    heap = [(0, 0, start)]
    tie = itertools.count(1)
    while heap:
        d, _, node = heapq.heappop(heap)
        if d > dist.get(node, np.inf):
            continue
        pos, fin = node
        if all(fin):
            return d
        # finishing transitions (free)
        for i in range(n):
            if not fin[i] and pos[i] == goals[i]:
                nf = fin[:i] + (True,) + fin[i + 1:]
                nxt = (pos, nf)
                if d < dist.get(nxt, np.inf):
                    dist[nxt] = d
                    heapq.heappush(heap, (d, next(tie), nxt))
        options = []
        for i in range(n):
            if fin[i]:
                options.append([pos[i]])
            else:
                options.append(sorted({_step_cell(rows, pos[i], m) for m in MOVES}))
        cost = d + sum(1 for f in fin if not f)
        for combo in itertools.product(*options):
            if len(set(combo)) < n:
                continue
            swap = any(
                combo[i] == pos[j] and combo[j] == pos[i] and pos[i] != pos[j]
                for i in range(n)
                for j in range(i + 1, n)
            )
            if swap:
                continue
            nxt = (tuple(combo), fin)
            if cost < dist.get(nxt, np.inf):
                dist[nxt] = cost
                heapq.heappush(heap, (cost, next(tie), nxt))
    return None


def plan_is_valid(rows, starts, goals, paths):
    """Independent check of vertex and swap conflicts and step validity."""
    for p, s, g in zip(paths, starts, goals):
        if tuple(p[0]) != tuple(s) or tuple(p[-1]) != tuple(g):
            return False
        for a, b in zip(p, p[1:]):
            if abs(a[0] - b[0]) + abs(a[1] - b[1]) > 1 or rows[b[0]][b[1]] != ".":
                return False
    horizon = max(len(p) for p in paths)

    def at(p, t):
        return tuple(p[min(t, len(p) - 1)])

    for t in range(horizon):
        cells = [at(p, t) for p in paths]
        if len(set(cells)) < len(cells):
            return False
        if t:
            for i, j in itertools.combinations(range(len(paths)), 2):
                if at(paths[i], t) == at(paths[j], t - 1) and at(paths[j], t) == at(paths[i], t - 1):
                    if at(paths[i], t) != at(paths[i], t - 1):
                        return False
    return True


def brute_force_values(P, R, gamma):
    """Optimal values by enumerating every deterministic stationary policy.

    ``P`` has shape ``(A, S, S)`` and ``R`` shape ``(S, A)``; each policy is
    evaluated exactly with a linear solve.
    """
    n_actions, n_states, _ = P.shape
    best = np.full(n_states, -np.inf)
    for policy in itertools.product(range(n_actions), repeat=n_states):
        Pp = np.array([P[policy[s], s] for s in range(n_states)])
        Rp = np.array([R[s, policy[s]] for s in range(n_states)])
        v = np.linalg.solve(np.eye(n_states) - gamma * Pp, Rp)
        best = np.maximum(best, v)
    return best


def _bfs(rows, goal):
    dist = {tuple(goal): 0}
    frontier = [tuple(goal)]
    while frontier:
        nxt = []
        for cell in frontier:
            for m in MOVES[:4]:
                n = _step_cell(rows, cell, m)
                if n != cell and n not in dist:
                    dist[n] = dist[cell] + 1
                    nxt.append(n)
        frontier = nxt
    return dist


def _moves_from(rows, cell):
    """Index of each move that changes the cell, plus Stay (index 4)."""
    return [i for i, m in enumerate(MOVES) if i == 4 or _step_cell(rows, cell, m) != cell]


def soft_policy(rows, goal, cell, eps):
    """Action probabilities of an opponent heading to ``goal`` (ε-softened shortest path)."""
    probs = [0.0] * 5
    if tuple(cell) == tuple(goal):
        probs[4] = 1.0
        return probs
    dist = _bfs(rows, goal)
    valid = _moves_from(rows, cell)
    if tuple(cell) not in dist:
        for i in valid:
            probs[i] = 1.0 / len(valid)
        return probs
    here = dist[tuple(cell)]
    best = [i for i in valid if i != 4 and dist.get(_step_cell(rows, cell, MOVES[i])) == here - 1]
    rest = [i for i in valid if i not in best]
    for i in best:
        probs[i] += (1 - eps) / len(best)
    for i in rest:
        probs[i] += eps / len(rest)
    return probs


def expectimax_values(rows, own, own_goal, opps, hyp_goals, probs, eps, gamma, n, m=0):
    """Root value of each own action of a depth ``n + m`` expectimax.

    Opponent ``j`` has goal ``hyp_goals[g]`` with probability ``probs[j][g]``;
    beliefs follow Bayes' rule during the first ``n`` levels. Reaching the goal
    pays 1, hitting an opponent pays -1 and both end the episode. Leaves are
    worth ``gamma ** d`` with ``d`` the own distance to goal.
    """
    own_dist = _bfs(rows, own_goal)
    depth = n + m

    def leaf(cell):
        d = own_dist.get(tuple(cell))
        return 0.0 if d is None else gamma**d

    def marg(cell, row):
        out = [0.0] * 5
        for g, p in enumerate(row):
            if p > 0:
                pol = soft_policy(rows, hyp_goals[g], cell, eps)
                for a in range(5):
                    out[a] += p * pol[a]
        return out

    def posterior(cell, row, a):
        post = [p * soft_policy(rows, hyp_goals[g], cell, eps)[a] if p > 0 else 0.0 for g, p in enumerate(row)]
        z = sum(post)
        return list(row) if z <= 0 else [x / z for x in post]

    def v_max(me, others, belief, h):
        if h == depth:
            return leaf(me)
        return max(q(me, others, belief, a, h) for a in _moves_from(rows, me))

    def q(me, others, belief, a, h):
        me2 = _step_cell(rows, me, MOVES[a])
        margs = [marg(c, row) for c, row in zip(others, belief)]
        total = 0.0
        for joint in itertools.product(*[[x for x in range(5) if mg[x] > 0] for mg in margs]):
            p = 1.0
            for mg, x in zip(margs, joint):
                p *= mg[x]
            nxt = [_step_cell(rows, c, MOVES[x]) for c, x in zip(others, joint)]
            hit = any(c2 == me2 or (c2 == me and c == me2 and me != me2) for c, c2 in zip(others, nxt))
            if hit:
                total += p * -1.0
            elif me2 == tuple(own_goal):
                total += p * 1.0
            else:
                b2 = [posterior(c, row, x) for c, row, x in zip(others, belief, joint)] if h < n else belief
                total += p * gamma * v_max(me2, nxt, b2, h + 1)
        return total

    own = tuple(own)
    others = [tuple(c) for c in opps]
    return {a: q(own, others, [list(r) for r in probs], a, 0) for a in _moves_from(rows, own)}


def context_q(rows, own_goal, opp_goal, eps, gamma, tol=1e-12):
    """Q-values of the one-opponent MDP where the opponent heads for ``opp_goal``.

    Returns ``{(own, opp): [q per own action or None for invalid moves]}``.
    """
    cells = [(r, c) for r in range(len(rows)) for c in range(len(rows[0])) if rows[r][c] == "."]
    states = [(a, b) for a in cells for b in cells if a != b and a != tuple(own_goal)]
    v = {s: 0.0 for s in states}
    pols = {c: soft_policy(rows, opp_goal, c, eps) for c in cells}

    def backup(s, a):
        me, op = s
        me2 = _step_cell(rows, me, MOVES[a])
        total = 0.0
        for x, p in enumerate(pols[op]):
            if p == 0:
                continue
            op2 = _step_cell(rows, op, MOVES[x])
            if op2 == me2 or (op2 == me and op == me2 and me != me2):
                total += -p
            elif me2 == tuple(own_goal):
                total += p
            else:
                total += p * gamma * v[(me2, op2)]
        return total

    while True:
        new = {s: max(backup(s, a) for a in _moves_from(rows, s[0])) for s in states}
        delta = max(abs(new[s] - v[s]) for s in states)
        v = new
        if delta < tol:
            break
    return {s: [backup(s, a) if a in _moves_from(rows, s[0]) else None for a in range(5)] for s in states}
