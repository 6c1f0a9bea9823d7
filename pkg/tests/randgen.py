"""Random small instances shared by several tests."""
from __future__ import annotations

import numpy as np

from marp.belief import init_belief
from marp.env import GridMap, components
from marp.solvers import CapacityError, TransitionSkeleton


def random_grid(rng, max_side=5, density=0.25, min_free=4) -> GridMap:
    while True:
        w, h = int(rng.integers(2, max_side + 1)), int(rng.integers(2, max_side + 1))
        passable = rng.random(w * h) >= density
        if passable.sum() < min_free:
            continue
        grid = GridMap(w, h, tuple(bool(p) for p in passable))
        labels = components(grid)
        if len(set(labels.tolist())) == 1:
            return grid


def random_belief(rng, grid, opponents, own_goal, epsilon=0.05, sparse=False):
    b = init_belief(grid, opponents, own_goal, epsilon)
    probs = rng.dirichlet(np.ones(b.n_hypotheses), size=len(opponents))
    if sparse:
        probs[probs < np.median(probs)] = 0.0
        probs /= probs.sum(axis=1, keepdims=True)
    return b.with_probs(probs)


def random_induced_mdp(rng, gamma=0.95, max_opponents=2):
    """Induced MDP of a random ≤5×5 map with up to ``max_opponents`` opponents and a random belief."""
    while True:
        grid = random_grid(rng)
        k = int(rng.integers(1, max_opponents + 1))
        if grid.empty_cell_count < k + 2:
            continue
        cells = rng.choice(grid.empty_cell_count, k + 2, replace=False)
        root = [grid.cells[c] for c in cells[: k + 1]]
        goal = grid.cells[cells[-1]]
        try:
            skeleton = TransitionSkeleton(grid, root, goal, cap=3000)
        except CapacityError:
            continue
        belief = random_belief(rng, grid, list(range(1, k + 1)), goal, epsilon=float(rng.uniform(0.01, 0.3)))
        return skeleton.induce(belief.cell_marginals(), gamma)
