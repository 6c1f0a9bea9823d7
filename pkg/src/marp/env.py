"""Grid maps, joint states and the deterministic multi-agent step function."""
from __future__ import annotations

import math
import os
from collections import deque
from dataclasses import dataclass, field, replace
from enum import IntEnum
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml

Cell = tuple[int, int]


class MapParseError(ValueError):
    """Malformed map text. Carries the 1-based line and column of the problem."""

    def __init__(self, message: str, line: int, column: int | None = None):
        where = f"line {line}" if column is None else f"line {line}, column {column}"
        super().__init__(f"{where}: {message}")
        self.line = line
        self.column = column


class ScenarioError(ValueError):
    pass


class Action(IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3
    STAY = 4

    @property
    def delta(self) -> Cell:
        return _DELTAS[self]

    @classmethod
    def from_delta(cls, dr: int, dc: int) -> "Action":
        return _FROM_DELTA[(dr, dc)]


# fixed order also serves as the global tie-break order
ACTIONS: tuple[Action, ...] = tuple(Action)
_DELTAS = {
    Action.UP: (-1, 0),
    Action.DOWN: (1, 0),
    Action.LEFT: (0, -1),
    Action.RIGHT: (0, 1),
    Action.STAY: (0, 0),
}
_FROM_DELTA = {d: a for a, d in _DELTAS.items()}


def shift(cell: Cell, action: Action) -> Cell:
    dr, dc = _DELTAS[action]
    return (cell[0] + dr, cell[1] + dc)


@dataclass(frozen=True, eq=False)
class GridMap:
    """Obstacle grid. ``passable`` is row-major, ``width * height`` long."""

    width: int
    height: int
    passable: tuple[bool, ...]

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("map dimensions must be positive")
        if len(self.passable) != self.width * self.height:
            raise ValueError("passable must have width*height entries")
        object.__setattr__(self, "passable", tuple(bool(p) for p in self.passable))

    def __eq__(self, other):
        if not isinstance(other, GridMap):
            return NotImplemented
        return (self.width, self.height, self.passable) == (other.width, other.height, other.passable)

    def __hash__(self):
        h = self.__dict__.get("_hash")
        if h is None:
            h = hash((self.width, self.height, self.passable))
            object.__setattr__(self, "_hash", h)
        return h

    def in_bounds(self, cell: Cell) -> bool:
        r, c = cell
        return 0 <= r < self.height and 0 <= c < self.width

    def is_passable(self, cell: Cell) -> bool:
        return self.in_bounds(cell) and self.passable[cell[0] * self.width + cell[1]]

    @cached_property
    def cells(self) -> tuple[Cell, ...]:
        """Passable cells in row-major order; their position is the cell index."""
        return tuple(
            (r, c) for r in range(self.height) for c in range(self.width) if self.passable[r * self.width + c]
        )

    @cached_property
    def index(self) -> dict[Cell, int]:
        return {cell: i for i, cell in enumerate(self.cells)}

    @property
    def empty_cell_count(self) -> int:
        return len(self.cells)

    @cached_property
    def move_table(self) -> np.ndarray:
        """``move_table[i, a]`` is the index reached from cell ``i`` by action ``a``.

        Invalid moves (off-grid or into an obstacle) resolve to staying put.
        """
        table = np.empty((len(self.cells), len(ACTIONS)), dtype=np.int64)
        for i, cell in enumerate(self.cells):
            for a in ACTIONS:
                nxt = shift(cell, a)
                table[i, a] = self.index[nxt] if self.is_passable(nxt) else i
        table.flags.writeable = False
        return table

    @cached_property
    def valid_table(self) -> np.ndarray:
        """``valid_table[i, a]``: action ``a`` is a genuine move from ``i`` (Stay is always valid)."""
        mt = self.move_table
        valid = mt != np.arange(len(self.cells))[:, None]
        valid[:, Action.STAY] = True
        valid.flags.writeable = False
        return valid

    @cached_property
    def neighbors(self) -> tuple[tuple[int, ...], ...]:
        """4-connected passable neighbour indices per cell index."""
        mt = self.move_table
        return tuple(
            tuple(int(mt[i, a]) for a in ACTIONS[:4] if mt[i, a] != i) for i in range(len(self.cells))
        )

    def valid_actions(self, cell: Cell) -> list[Action]:
        row = self.valid_table[self.index[cell]]
        return [a for a in ACTIONS if row[a]]

    def resolve(self, cell: Cell, action: Action) -> Cell:
        nxt = shift(cell, action)
        return nxt if self.is_passable(nxt) else cell

    def with_obstacles(self, cells: Iterable[Cell]) -> "GridMap":
        blocked = list(self.passable)
        for r, c in cells:
            blocked[r * self.width + c] = False
        return GridMap(self.width, self.height, tuple(blocked))

    def to_text(self) -> str:
        rows = [
            "".join("." if self.passable[r * self.width + c] else "@" for c in range(self.width))
            for r in range(self.height)
        ]
        return f"height {self.width} {self.height}\n" + "\n".join(rows) + "\n"

    @classmethod
    def from_rows(cls, rows: Sequence[str]) -> "GridMap":
        return parse_map(f"height {len(rows[0])} {len(rows)}\n" + "\n".join(rows))


def parse_map(text: str) -> GridMap:
    """Parse the ASCII map format: a ``height W H`` header, then H rows of W chars.

    The MovingAI header (``type``/``height H``/``width W``/``map``) is accepted too.
    """
    lines = text.splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines:
        raise MapParseError("empty map", 1)
    head = lines[0].split()
    if len(head) == 3 and head[0] == "height":
        try:
            width, height = int(head[1]), int(head[2])
        except ValueError:
            raise MapParseError("header must be 'height W H'", 1) from None
        first = 1
    elif head and head[0] == "type":
        width = height = None
        first = None
        for n, line in enumerate(lines[1:], start=2):
            parts = line.split()
            if parts[:1] == ["height"] and len(parts) == 2:
                height = int(parts[1])
            elif parts[:1] == ["width"] and len(parts) == 2:
                width = int(parts[1])
            elif parts == ["map"]:
                first = n
                break
        if width is None or height is None or first is None:
            raise MapParseError("incomplete MovingAI header", 1)
    else:
        raise MapParseError("header must be 'height W H'", 1)
    if width < 1 or height < 1:
        raise MapParseError("dimensions must be positive", first)
    rows = lines[first:]
    if len(rows) != height:
        raise MapParseError(f"expected {height} rows, found {len(rows)}", first + min(len(rows), height) + 1)
    passable = []
    for r, row in enumerate(rows):
        lineno = first + r + 1
        if len(row) != width:
            raise MapParseError(f"expected {width} characters, found {len(row)}", lineno)
        for c, ch in enumerate(row):
            if ch == ".":
                passable.append(True)
            elif ch == "@":
                passable.append(False)
            else:
                raise MapParseError(f"unknown character {ch!r}", lineno, c + 1)
    return GridMap(width, height, tuple(passable))


@dataclass(frozen=True)
class JointState:
    """Positions of all agents plus their arrived / removed flags.

    ``removed`` marks agents taken out of play by a collision; they are ignored
    by every later step.
    """

    positions: tuple[Cell, ...]
    arrived: tuple[bool, ...] = None
    removed: tuple[bool, ...] = None

    def __post_init__(self):
        n = len(self.positions)
        object.__setattr__(self, "positions", tuple(tuple(p) for p in self.positions))
        if self.arrived is None:
            object.__setattr__(self, "arrived", (False,) * n)
        if self.removed is None:
            object.__setattr__(self, "removed", (False,) * n)

    @property
    def n_agents(self) -> int:
        return len(self.positions)

    def active(self, i: int) -> bool:
        return not self.removed[i]

    def to_json(self) -> dict:
        return {
            "positions": [list(p) for p in self.positions],
            "arrived": list(self.arrived),
            "removed": list(self.removed),
        }

    @classmethod
    def from_json(cls, data: dict) -> "JointState":
        return cls(
            tuple(tuple(p) for p in data["positions"]),
            tuple(data["arrived"]),
            tuple(data["removed"]),
        )


def initial_state(starts: Sequence[Cell], goals: Sequence[Cell]) -> JointState:
    starts = tuple(tuple(s) for s in starts)
    return JointState(starts, tuple(s == tuple(g) for s, g in zip(starts, goals)))


def find_collisions(
    before: Sequence[Cell],
    after: Sequence[Cell],
    live: Sequence[bool],
    ghosts: Sequence[bool] | None = None,
) -> set[tuple[int, int]]:
    """Vertex and swap collisions among ``live`` agents, as ordered pairs ``(i, j)``, ``i < j``.

    ``ghosts`` marks agents that cannot be hit by vertex collisions.
    """
    hits: set[tuple[int, int]] = set()
    idx = [i for i, alive in enumerate(live) if alive]
    by_cell: dict[Cell, list[int]] = {}
    for i in idx:
        if ghosts is not None and ghosts[i]:
            continue
        by_cell.setdefault(after[i], []).append(i)
    for group in by_cell.values():
        if len(group) > 1:
            for x in range(len(group)):
                for y in range(x + 1, len(group)):
                    hits.add((group[x], group[y]))
    moved = {(before[i], after[i]): i for i in idx if before[i] != after[i]}
    for (src, dst), i in moved.items():
        j = moved.get((dst, src))
        if j is not None and i < j:
            hits.add((i, j))
    return hits


def step(
    grid: GridMap,
    state: JointState,
    actions: Sequence[Action],
    goals: Sequence[Cell],
    goal_ghosting: bool = False,
) -> tuple[JointState, set[tuple[int, int]]]:
    """Advance all agents simultaneously.

    Moves off-grid or into obstacles resolve to Stay, arrived and removed agents
    stay put. Every agent involved in a collision is flagged removed in the
    returned state; positions still show where they tried to go.
    """
    n = state.n_agents
    live = [not r for r in state.removed]
    nxt = []
    for i in range(n):
        cell = state.positions[i]
        if state.removed[i] or state.arrived[i]:
            nxt.append(cell)
        else:
            nxt.append(grid.resolve(cell, Action(actions[i])))
    ghosts = state.arrived if goal_ghosting else None
    collisions = find_collisions(state.positions, nxt, live, ghosts)
    hit = {i for pair in collisions for i in pair}
    arrived = tuple(
        state.arrived[i] or (live[i] and i not in hit and nxt[i] == tuple(goals[i])) for i in range(n)
    )
    removed = tuple(state.removed[i] or i in hit for i in range(n))
    return JointState(tuple(nxt), arrived, removed), collisions


def outcome_actions(before: JointState, after: JointState) -> tuple[Action, ...]:
    """Actions reconstructed from position deltas (a blocked move reads as Stay)."""
    return tuple(
        Action.from_delta(b[0] - a[0], b[1] - a[1]) for a, b in zip(before.positions, after.positions)
    )


class DistanceField:
    """Shortest 4-connected path lengths to one goal; ``inf`` where unreachable."""

    __slots__ = ("grid", "goal", "values")

    def __init__(self, grid: GridMap, goal: Cell, values: np.ndarray):
        self.grid = grid
        self.goal = goal
        self.values = values
        self.values.flags.writeable = False

    def __getitem__(self, cell: Cell) -> float:
        i = self.grid.index.get(tuple(cell))
        return math.inf if i is None else float(self.values[i])

    def at(self, index: int) -> float:
        return float(self.values[index])


def bfs_distance(grid: GridMap, goal: Cell) -> DistanceField:
    goal = tuple(goal)
    if not grid.is_passable(goal):
        raise ValueError(f"goal {goal} is not passable")
    dist = np.full(grid.empty_cell_count, np.inf)
    g = grid.index[goal]
    dist[g] = 0
    queue = deque([g])
    nbrs = grid.neighbors
    while queue:
        i = queue.popleft()
        d = dist[i] + 1
        for j in nbrs[i]:
            if dist[j] == np.inf:
                dist[j] = d
                queue.append(j)
    return DistanceField(grid, goal, dist)


def state_count(empty_cells: int, agents: int) -> int:
    """Ordered placements of ``agents`` distinct agents on ``empty_cells`` cells."""
    if agents < 0 or empty_cells < 0:
        raise ValueError("counts must be non-negative")
    if agents > empty_cells:
        raise ValueError(f"cannot place {agents} agents on {empty_cells} cells")
    return math.perm(empty_cells, agents)


def components(grid: GridMap) -> np.ndarray:
    """Connected-component label per cell index."""
    label = np.full(grid.empty_cell_count, -1, dtype=np.int64)
    nbrs = grid.neighbors
    current = 0
    for s in range(grid.empty_cell_count):
        if label[s] >= 0:
            continue
        label[s] = current
        queue = deque([s])
        while queue:
            i = queue.popleft()
            for j in nbrs[i]:
                if label[j] < 0:
                    label[j] = current
                    queue.append(j)
        current += 1
    return label


# -- scenarios -------------------------------------------------------------


@dataclass(frozen=True)
class ScenarioFamily:
    """Scenario-generation parameters plus the per-family planner defaults."""

    name: str
    width: int
    height: int
    n_agents: int
    max_steps: int
    epsilon: float
    n_empty: int | None = None
    obstacle_density: float | None = None
    map_seed: int | None = 0
    depth: int | None = None
    eval_samples: int = 5
    backup_samples: int | None = None
    max_iter: int = 50
    select_samples: int = 50
    cbs_timeout_ms: float = 100.0

    def planner_defaults(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "depth": self.depth,
            "eval_samples": self.eval_samples,
            "backup_samples": self.backup_samples,
            "max_iter": self.max_iter,
            "select_samples": self.select_samples,
            "cbs_timeout_ms": self.cbs_timeout_ms,
        }


FAMILIES: dict[str, ScenarioFamily] = {
    f.name: f
    for f in (
        ScenarioFamily("tiny2a", 3, 3, 2, 32, 7e-4, n_empty=9, depth=2, eval_samples=10, max_iter=30,
                       select_samples=50),
        ScenarioFamily("small2a", 8, 8, 2, 32, 7e-4, n_empty=31, depth=2, eval_samples=10, max_iter=30,
                       select_samples=50),
        ScenarioFamily("square2a", 12, 12, 2, 48, 2e-4, n_empty=86, depth=2, eval_samples=10, max_iter=50,
                       select_samples=50),
        ScenarioFamily("square4a", 12, 12, 4, 48, 2e-4, n_empty=86, depth=1, eval_samples=5,
                       backup_samples=10, max_iter=60, select_samples=50),
        ScenarioFamily("medium20a", 18, 18, 20, 144, 8e-5, n_empty=219, eval_samples=5, max_iter=80,
                       select_samples=80, cbs_timeout_ms=500.0),
        ScenarioFamily("large50a", 32, 32, 50, 256, 2e-5, n_empty=819, eval_samples=2, max_iter=100,
                       select_samples=125, cbs_timeout_ms=500.0),
    )
}


@dataclass(frozen=True)
class Scenario:
    map: GridMap
    starts: tuple[Cell, ...]
    goals: tuple[Cell, ...]
    modelling_index: int
    opponent_specs: tuple[str, ...]
    max_steps: int
    seed: int
    family: str = "custom"
    epsilon: float = 7e-4
    map_path: str | None = field(default=None, compare=False)

    def __post_init__(self):
        starts = tuple(tuple(s) for s in self.starts)
        goals = tuple(tuple(g) for g in self.goals)
        object.__setattr__(self, "starts", starts)
        object.__setattr__(self, "goals", goals)
        object.__setattr__(self, "opponent_specs", tuple(self.opponent_specs))
        if len(starts) != len(goals):
            raise ScenarioError("starts and goals differ in length")
        if len(set(starts)) != len(starts):
            raise ScenarioError("starts must be pairwise distinct")
        if len(set(goals)) != len(goals):
            raise ScenarioError("goals must be pairwise distinct")
        for c in starts + goals:
            if not self.map.is_passable(c):
                raise ScenarioError(f"cell {c} is not passable")
        if not 0 <= self.modelling_index < len(starts):
            raise ScenarioError("modelling_index out of range")
        if len(self.opponent_specs) != len(starts) - 1:
            raise ScenarioError("need one opponent spec per non-modelling agent")

    @property
    def n_agents(self) -> int:
        return len(self.starts)

    @property
    def opponents(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.n_agents) if i != self.modelling_index)

    def spec_of(self, agent: int) -> str:
        """Opponent spec string for a non-modelling agent."""
        return self.opponent_specs[self.opponents.index(agent)]

    def initial_state(self) -> JointState:
        return initial_state(self.starts, self.goals)

    def to_json(self, map_path: str | None = None) -> dict:
        data = {
            "family": self.family,
            "seed": self.seed,
            "max_steps": self.max_steps,
            "epsilon": self.epsilon,
            "modelling_index": self.modelling_index,
            "agents": [
                {
                    "start": list(s),
                    "goal": list(g),
                    "spec": "model" if i == self.modelling_index else self.spec_of(i),
                }
                for i, (s, g) in enumerate(zip(self.starts, self.goals))
            ],
        }
        if map_path or self.map_path:
            data["map"] = map_path or self.map_path
        else:
            data["map_text"] = self.map.to_text()
        return data

    @classmethod
    def from_json(cls, data: dict, grid: GridMap | None = None) -> "Scenario":
        if grid is None:
            if "map_text" in data:
                grid = parse_map(data["map_text"])
            else:
                with open(data["map"]) as fh:
                    grid = parse_map(fh.read())
        agents = data["agents"]
        mi = data.get("modelling_index", 0)
        return cls(
            map=grid,
            starts=tuple(tuple(a["start"]) for a in agents),
            goals=tuple(tuple(a["goal"]) for a in agents),
            modelling_index=mi,
            opponent_specs=tuple(a["spec"] for i, a in enumerate(agents) if i != mi),
            max_steps=data["max_steps"],
            seed=data["seed"],
            family=data.get("family", "custom"),
            epsilon=data.get("epsilon", 7e-4),
            map_path=data.get("map"),
        )


class GenerationError(RuntimeError):
    pass


def generate_map(
    width: int,
    height: int,
    rng: np.random.Generator,
    n_empty: int | None = None,
    obstacle_density: float | None = None,
    connected: bool = True,
    max_tries: int = 50,
) -> GridMap:
    """Random obstacle layout with exactly ``n_empty`` passable cells.

    With ``connected`` the passable region stays one component: obstacles are
    added one at a time and rejected if they would split it.
    """
    total = width * height
    if n_empty is None:
        density = 0.0 if obstacle_density is None else obstacle_density
        n_empty = total - int(round(density * total))
    if not 1 <= n_empty <= total:
        raise GenerationError(f"cannot leave {n_empty} empty cells on a {width}x{height} map")
    for _ in range(max_tries):
        passable = [True] * total
        order = rng.permutation(total)
        empty = total
        for k in order:
            if empty == n_empty:
                break
            passable[k] = False
            if connected and not _connected(passable, width, height, empty - 1):
                passable[k] = True
                continue
            empty -= 1
        if empty == n_empty:
            return GridMap(width, height, tuple(passable))
    raise GenerationError("could not reach the requested obstacle count")


def _connected(passable: list[bool], width: int, height: int, expected: int) -> bool:
    start = next(i for i, p in enumerate(passable) if p)
    seen = {start}
    queue = deque([start])
    while queue:
        i = queue.popleft()
        r, c = divmod(i, width)
        for j, ok in ((i - width, r > 0), (i + width, r < height - 1), (i - 1, c > 0), (i + 1, c < width - 1)):
            if ok and passable[j] and j not in seen:
                seen.add(j)
                queue.append(j)
    return len(seen) == expected


_map_cache: dict[tuple, GridMap] = {}


def family_map(family: ScenarioFamily, seed: int | None = None) -> GridMap:
    """The family's fixed layout (or a per-seed one when ``map_seed`` is None)."""
    map_seed = family.map_seed if family.map_seed is not None else seed
    key = (family.width, family.height, family.n_empty, family.obstacle_density, map_seed)
    grid = _map_cache.get(key)
    if grid is None:
        rng = np.random.default_rng([0x6D6170, map_seed])
        grid = generate_map(family.width, family.height, rng, family.n_empty, family.obstacle_density)
        _map_cache[key] = grid
    return grid


RATIONAL_POOL = ("sp", "rand:0.2", "rand:0.5", "safe")


def opponent_pool(opponent_class: str, chase_p: float = 0.5, pool: Sequence[str] = RATIONAL_POOL):
    """Return a function drawing one opponent spec string from ``rng``."""
    if opponent_class == "rational":
        return lambda rng: pool[int(rng.integers(len(pool)))]
    if opponent_class == "malicious":
        spec = f"chase:{chase_p}"
        return lambda rng: spec
    if opponent_class == "selfplay":
        return lambda rng: "self"
    raise ValueError(f"unknown opponent class {opponent_class!r}")


def generate_scenario(
    family: ScenarioFamily | str,
    opponent_class: str,
    seed: int,
    grid: GridMap | None = None,
    max_retries: int = 100,
    chase_p: float = 0.5,
) -> Scenario:
    """Random starts/goals on the family map; deterministic in ``seed``.

    Every agent's goal is reachable from its start and differs from it.
    """
    if isinstance(family, str):
        family = FAMILIES[family]
    if grid is None:
        grid = family_map(family, seed)
    k = family.n_agents
    cells = grid.cells
    if len(cells) < k + 1:
        raise GenerationError("not enough passable cells for distinct starts and goals")
    labels = components(grid)
    rng = np.random.default_rng([0x5CE7, seed])
    draw = opponent_pool(opponent_class, chase_p)
    for _ in range(max_retries):
        starts = rng.choice(len(cells), size=k, replace=False)
        goals = rng.choice(len(cells), size=k, replace=False)
        if any(s == g or labels[s] != labels[g] for s, g in zip(starts, goals)):
            continue
        specs = tuple(draw(rng) for _ in range(k - 1))
        return Scenario(
            map=grid,
            starts=tuple(cells[s] for s in starts),
            goals=tuple(cells[g] for g in goals),
            modelling_index=0,
            opponent_specs=specs,
            max_steps=family.max_steps,
            seed=seed,
            family=family.name,
            epsilon=family.epsilon,
        )
    raise GenerationError(f"no feasible placement after {max_retries} attempts")


def with_scenario(scenario: Scenario, **changes) -> Scenario:
    return replace(scenario, **changes)


# -- files ---------------------------------------------------------------------


def load_map(path: str | os.PathLike) -> GridMap:
    with open(path) as fh:
        return parse_map(fh.read())


def load_scenario(path: str | os.PathLike) -> Scenario:
    """Read a scenario document (YAML or JSON); a relative map path resolves against the file's folder."""
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict) or "agents" not in data:
        raise ScenarioError(f"{path}: not a scenario document")
    grid = None
    if "map_text" not in data:
        if "map" not in data:
            raise ScenarioError(f"{path}: scenario names no map")
        map_path = Path(data["map"])
        if not map_path.is_absolute():
            map_path = Path(path).parent / map_path
        grid = load_map(map_path)
    return Scenario.from_json(data, grid)


def save_scenario(scenario: Scenario, path: str | os.PathLike, map_path: str | None = None) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(scenario.to_json(map_path), fh, sort_keys=False, default_flow_style=None)
