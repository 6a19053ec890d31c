"""Grid world data model, 6x6x17 encoding and a replay simulator.

Cell vector layout (17 entries)::

    [0:4]   size one-hot (1..4)
    [4:8]   color one-hot (red, blue, green, yellow)
    [8:12]  shape one-hot (circle, square, cylinder, box)
    [12]    agent present
    [13:17] agent orientation one-hot (north, east, south, west)

Rows grow southward and columns eastward, so north is ``row - 1``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

import numpy as np

GRID_SIZE = 6
CELL_DIM = 17

COLORS = ("red", "blue", "green", "yellow")
SHAPES = ("circle", "square", "cylinder", "box")
SIZES = (1, 2, 3, 4)
ORIENTATIONS = ("north", "east", "south", "west")
ACTIONS = ("turn_left", "turn_right", "walk", "push", "pull")

_DELTAS = {"north": (-1, 0), "east": (0, 1), "south": (1, 0), "west": (0, -1)}

_SIZE_OFFSET = 0
_COLOR_OFFSET = 4
_SHAPE_OFFSET = 8
_AGENT_BIT = 12
_ORIENT_OFFSET = 13


@dataclass(frozen=True)
class ObjectSpec:
    color: str
    shape: str
    size: int

    def __post_init__(self):
        if self.color not in COLORS:
            raise ValueError(f"unknown color {self.color!r}")
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.size not in SIZES:
            raise ValueError(f"size must be in 1..4, got {self.size!r}")


@dataclass(frozen=True)
class AgentState:
    row: int
    col: int
    orientation: str = "east"

    def __post_init__(self):
        if not (0 <= self.row < GRID_SIZE and 0 <= self.col < GRID_SIZE):
            raise ValueError(f"agent position ({self.row}, {self.col}) is off the grid")
        if self.orientation not in ORIENTATIONS:
            raise ValueError(f"unknown orientation {self.orientation!r}")


@dataclass(frozen=True)
class World:
    """Immutable 6x6 world.

    ``objects`` maps ``(row, col)`` to the object in that cell; the mapping is
    stored as a sorted tuple of pairs so worlds hash and compare by value.
    ``interactions`` records push/pull actions applied by :func:`step`.
    """

    agent: AgentState
    objects: tuple = ()
    interactions: tuple = field(default=(), compare=False)

    def __post_init__(self):
        items = self.objects.items() if isinstance(self.objects, dict) else self.objects
        cells = {}
        for (r, c), obj in items:
            if not (0 <= r < GRID_SIZE and 0 <= c < GRID_SIZE):
                raise ValueError(f"object position ({r}, {c}) is off the grid")
            if (r, c) in cells:
                raise ValueError(f"cell ({r}, {c}) holds more than one object")
            if not isinstance(obj, ObjectSpec):
                raise TypeError(f"expected ObjectSpec, got {type(obj).__name__}")
            cells[(int(r), int(c))] = obj
        object.__setattr__(self, "objects", tuple(sorted(cells.items())))

    def object_at(self, row: int, col: int) -> Optional[ObjectSpec]:
        for pos, obj in self.objects:
            if pos == (row, col):
                return obj
        return None

    def iter_objects(self) -> Iterable[tuple[int, int, ObjectSpec]]:
        for (r, c), obj in self.objects:
            yield r, c, obj

    def to_dict(self) -> dict:
        return {
            "agent": {
                "row": self.agent.row,
                "col": self.agent.col,
                "orientation": self.agent.orientation,
            },
            "objects": [
                {"row": r, "col": c, "color": o.color, "shape": o.shape, "size": o.size}
                for r, c, o in self.iter_objects()
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "World":
        a = data["agent"]
        agent = AgentState(int(a["row"]), int(a["col"]), a["orientation"])
        objects = [
            ((int(o["row"]), int(o["col"])), ObjectSpec(o["color"], o["shape"], int(o["size"])))
            for o in data.get("objects", [])
        ]
        return cls(agent, tuple(objects))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "World":
        return cls.from_dict(json.loads(text))


def encode_cell(cell: Optional[ObjectSpec], agent_here: Optional[AgentState] = None) -> np.ndarray:
    vec = np.zeros(CELL_DIM, dtype=np.float64)
    if cell is not None:
        vec[_SIZE_OFFSET + SIZES.index(cell.size)] = 1.0
        vec[_COLOR_OFFSET + COLORS.index(cell.color)] = 1.0
        vec[_SHAPE_OFFSET + SHAPES.index(cell.shape)] = 1.0
    if agent_here is not None:
        vec[_AGENT_BIT] = 1.0
        vec[_ORIENT_OFFSET + ORIENTATIONS.index(agent_here.orientation)] = 1.0
    return vec


def encode_world(world: World) -> np.ndarray:
    """Return the ``(6, 6, 17)`` array; row-major flattening gives the 36 visual tokens."""
    out = np.zeros((GRID_SIZE, GRID_SIZE, CELL_DIM), dtype=np.float64)
    for r, c, obj in world.iter_objects():
        out[r, c] = encode_cell(obj)
    a = world.agent
    out[a.row, a.col] += encode_cell(None, a)
    return out


def turn(orientation: str, action: str) -> str:
    i = ORIENTATIONS.index(orientation)
    if action == "turn_right":
        return ORIENTATIONS[(i + 1) % 4]
    if action == "turn_left":
        return ORIENTATIONS[(i - 1) % 4]
    raise ValueError(f"not a turn action: {action!r}")


def step(world: World, action: str) -> World:
    """Apply one action; walking off the grid is a no-op."""
    agent = world.agent
    if action in ("turn_left", "turn_right"):
        return replace(world, agent=replace(agent, orientation=turn(agent.orientation, action)))
    if action == "walk":
        dr, dc = _DELTAS[agent.orientation]
        r, c = agent.row + dr, agent.col + dc
        if 0 <= r < GRID_SIZE and 0 <= c < GRID_SIZE:
            return replace(world, agent=replace(agent, row=r, col=c))
        return world
    if action in ("push", "pull"):
        return replace(world, interactions=world.interactions + ((action, agent.row, agent.col),))
    raise ValueError(f"unknown action {action!r}")


def replay(world: World, actions: Iterable[str]) -> World:
    for action in actions:
        world = step(world, action)
    return world
